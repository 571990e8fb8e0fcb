"""Independent reference computations used by several test modules."""

import math

import numpy as np
from scipy.optimize import minimize_scalar


def numeric_min_epsilon(sigma, delta, n, k):
    """Minimise eps(alpha) numerically over alpha in (1, 1e6], parametrised as 1 + e^t."""
    log_inv = math.log(1 / delta)

    def eps(t):
        a = 1 + math.exp(t)
        return n * a / (2 * k**2 * sigma**2) + log_inv / (a - 1)

    res = minimize_scalar(eps, bounds=(-40.0, math.log(1e6 - 1)), method="bounded",
                          options={"xatol": 1e-12})
    return res.fun, 1 + math.exp(res.x)


def brute_force_components(eigenvalues, sigma):
    """Number of components minimising the PCA loss by direct enumeration."""
    lam = np.asarray(eigenvalues, dtype=float)
    losses = [lam[l:].sum() + l * sigma**2 for l in range(lam.size + 1)]
    return int(np.argmin(losses))


def haar_1d(x):
    """One level of the orthonormal Haar transform, written out by hand."""
    x = np.asarray(x, dtype=float)
    a = (x[0::2] + x[1::2]) / math.sqrt(2)
    d = (x[0::2] - x[1::2]) / math.sqrt(2)
    return np.concatenate([a, d])
