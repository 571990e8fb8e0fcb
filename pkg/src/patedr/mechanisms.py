"""Seeded noise primitives: Gaussian perturbation and the Sparse Vector Technique.

Randomness comes from the Philox-4x64-10 counter-based generator. A
:class:`NoiseSeed` keys Philox with ``(base_seed, query_index)``; a stream
number occupies the top word of the 256-bit counter, and successive draws
walk the low words, so coordinate j of a stream is always produced by the
same counter block no matter which queries ran before. Normal variates use
NumPy's ziggurat sampler and Laplace variates use inversion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream identifiers within one query's key.
STREAM_GAUSSIAN = 0
STREAM_SVT_THRESHOLD = 1
STREAM_SVT_QUERIES = 2
STREAM_SVT_VALUES = 3


@dataclass(frozen=True)
class NoiseSeed:
    base_seed: int
    query_index: int = 0

    def __post_init__(self):
        if not 0 <= self.base_seed < 2**64:
            raise ValueError("base_seed must be a 64-bit unsigned integer")
        if self.query_index < 0 or self.query_index >= 2**64:
            raise ValueError("query_index must be a nonnegative 64-bit integer")

    def generator(self, stream: int = STREAM_GAUSSIAN) -> np.random.Generator:
        key = np.array([self.base_seed, self.query_index], dtype=np.uint64)
        counter = np.array([0, 0, 0, stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def for_query(self, query_index: int) -> "NoiseSeed":
        return NoiseSeed(self.base_seed, query_index)


def gaussian_perturb(z, sigma: float, seed: NoiseSeed) -> np.ndarray:
    """Return ``z + N(0, sigma^2 I)``; exactly ``z`` when sigma is zero."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    z = np.asarray(z, dtype=np.float64)
    if sigma == 0:
        return z.copy()
    noise = seed.generator(STREAM_GAUSSIAN).standard_normal(z.shape)
    return z + sigma * noise


@dataclass(frozen=True)
class SvtConfig:
    """AboveThreshold parameters for selecting at most ``max_selections`` coefficients.

    ``selection_epsilon`` is the pure-DP cost of the whole selection. With
    ``noiseless=True`` the Laplace noise is dropped, which is only useful for
    testing the streaming logic.
    """

    threshold: float
    max_selections: int
    selection_epsilon: float
    value_sigma: float
    coefficient_sensitivity: float
    noiseless: bool = False

    def __post_init__(self):
        if self.max_selections < 1:
            raise ValueError("max_selections must be positive")
        if not self.selection_epsilon > 0:
            raise ValueError("selection_epsilon must be positive")
        if self.value_sigma < 0:
            raise ValueError("value_sigma must be nonnegative")
        if not self.coefficient_sensitivity > 0:
            raise ValueError("coefficient_sensitivity must be positive")

    @property
    def threshold_scale(self) -> float:
        if self.noiseless:
            return 0.0
        return 2 * self.coefficient_sensitivity * self.max_selections / self.selection_epsilon

    @property
    def query_scale(self) -> float:
        if self.noiseless:
            return 0.0
        return 4 * self.coefficient_sensitivity * self.max_selections / self.selection_epsilon


def _laplace(gen: np.random.Generator, scale: float, size=None):
    if scale == 0:
        return np.zeros(size) if size is not None else 0.0
    u = gen.random(size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2 * np.abs(u))


def svt_select(coeffs, cfg: SvtConfig, seed: NoiseSeed) -> list[tuple[int, float]]:
    """Stream over ``|coeffs|`` in index order and release those above a noisy threshold.

    The threshold is perturbed once; after each selection it is kept (the
    c-selection AboveThreshold variant with noise calibrated to c). Selected
    values are released with Gaussian noise of scale ``cfg.value_sigma``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    noisy_threshold = cfg.threshold + float(
        _laplace(seed.generator(STREAM_SVT_THRESHOLD), cfg.threshold_scale)
    )
    query_noise = _laplace(seed.generator(STREAM_SVT_QUERIES), cfg.query_scale, coeffs.size)
    above = np.abs(coeffs) + query_noise >= noisy_threshold
    picked = np.flatnonzero(above)[: cfg.max_selections]
    values = coeffs[picked]
    if cfg.value_sigma > 0:
        values = values + cfg.value_sigma * seed.generator(STREAM_SVT_VALUES).standard_normal(
            picked.size
        )
    return [(int(i), float(v)) for i, v in zip(picked, values)]

