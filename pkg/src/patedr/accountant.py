"""Renyi-DP accounting for N Gaussian aggregation queries.

Each query releases the mean of K codes with l2 norm at most one, plus
N(0, sigma^2 I) noise. Adjacent datasets differ by one teacher's code being
present or absent (replaced by zero), so a query has l2 sensitivity 1/K.
Under the replace-one convention the sensitivity would be 2/K; pass
``sensitivity`` explicitly to account for that.

The Gaussian mechanism with sensitivity s is (alpha, alpha s^2 / (2 sigma^2))
RDP. N-fold composition and the standard RDP to (eps, delta) conversion give

    eps(alpha) = N alpha / (2 K^2 sigma^2) + log(1/delta) / (alpha - 1)

which is minimised in closed form over continuous alpha > 1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class QueryPlan:
    """N aggregation queries over K teachers."""

    num_queries: int
    num_teachers: int
    sensitivity: Optional[float] = None

    def __post_init__(self):
        if int(self.num_queries) < 1 or int(self.num_queries) != self.num_queries:
            raise ValueError(f"num_queries must be a positive integer, got {self.num_queries}")
        if int(self.num_teachers) < 1 or int(self.num_teachers) != self.num_teachers:
            raise ValueError(f"num_teachers must be a positive integer, got {self.num_teachers}")
        if self.sensitivity is None:
            object.__setattr__(self, "sensitivity", 1.0 / self.num_teachers)
        elif not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")

    @property
    def noise_multiplier_scale(self) -> float:
        """Sensitivity-normalised query count N * s^2 that drives the RDP curve."""
        return self.num_queries * self.sensitivity**2


@dataclass(frozen=True)
class RdpPoint:
    order: float
    rdp_epsilon: float


def _log_inv(delta: float) -> float:
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return -math.log(delta)


def _check_sigma(sigma: float) -> None:
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")


def rdp_gaussian(sigma: float, order: float, plan: QueryPlan) -> RdpPoint:
    """RDP of the N-fold composed Gaussian aggregation at ``order``."""
    _check_sigma(sigma)
    if not order > 1:
        raise ValueError("Renyi order must exceed 1")
    return RdpPoint(order, plan.noise_multiplier_scale * order / (2 * sigma**2))


def epsilon_at_order(sigma: float, delta: float, plan: QueryPlan, order: float) -> float:
    """(eps, delta)-DP epsilon obtained by converting at a fixed Renyi order."""
    return rdp_gaussian(sigma, order, plan).rdp_epsilon + _log_inv(delta) / (order - 1)


def calibrate_sigma(budget: PrivacyBudget, plan: QueryPlan) -> float:
    """Smallest noise scale for which the N queries are (eps, delta)-DP."""
    log_inv = _log_inv(budget.delta)
    eps = budget.epsilon
    return (
        math.sqrt(plan.noise_multiplier_scale)
        * (math.sqrt(log_inv + eps) + math.sqrt(log_inv))
        / (math.sqrt(2) * eps)
    )


def optimal_alpha(sigma: float, delta: float, plan: QueryPlan) -> float:
    """Stationary point of eps(alpha); always strictly greater than one."""
    _check_sigma(sigma)
    return 1.0 + sigma * math.sqrt(2 * _log_inv(delta) / plan.noise_multiplier_scale)


def compose_epsilon(sigma: float, delta: float, plan: QueryPlan) -> float:
    """Epsilon spent by the N queries at noise scale ``sigma``; inverse of :func:`calibrate_sigma`."""
    _check_sigma(sigma)
    c = plan.noise_multiplier_scale
    return c / (2 * sigma**2) + math.sqrt(2 * c * _log_inv(delta)) / sigma


def privacy_curve(
    sigma: float, delta: float, num_queries: int, k_range: Iterable[int]
) -> list[tuple[int, float]]:
    """Epsilon as a function of the number of teachers at fixed noise."""
    ks = [int(k) for k in k_range]
    if not ks:
        raise ValueError("k_range must be nonempty")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("k_range must be strictly increasing")
    return [(k, compose_epsilon(sigma, delta, QueryPlan(num_queries, k))) for k in ks]


def first_k_below(curve: list[tuple[int, float]], epsilon: float) -> Optional[int]:
    """Smallest K on ``curve`` whose epsilon is strictly below ``epsilon``."""
    return next((k for k, eps in curve if eps < epsilon), None)


def curve_to_csv(curve: list[tuple[int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "epsilon"])
    for k, eps in curve:
        w.writerow([k, repr(eps)])
    return buf.getvalue()
