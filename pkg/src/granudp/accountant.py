"""Rényi-DP accounting for Poisson-subsampled Gaussian DP-SGD.

Per-step RDP uses the integer-order binomial expansion of the subsampled
Gaussian mixture; composition is additive; conversion to (epsilon, delta)
uses ``rdp + log(1/delta) / (alpha - 1)`` minimised over orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65))
DEFAULT_DELTA = 1e-8
DEFAULT_SIGMA_BOUNDS = (0.05, 1000.0)
CALIBRATION_RTOL = 1e-3


class AccountingError(ValueError):
    pass


class BracketError(AccountingError):
    """The target epsilon is not reachable inside the given noise bracket."""


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float
    # Set when a conversion pushed delta to 1, i.e. the guarantee is empty.
    vacuous: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise AccountingError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise AccountingError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class MechanismParams:
    sigma: float
    q: float
    steps: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise AccountingError(f"noise multiplier must be > 0, got {self.sigma}")
        if not 0.0 <= self.q <= 1.0:
            raise AccountingError(f"sampling rate must lie in [0, 1], got {self.q}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise AccountingError(f"steps must be a positive integer, got {self.steps}")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.values):
            raise AccountingError("orders and values differ in length")
        if any(a <= 1 for a in self.orders):
            raise AccountingError("all RDP orders must exceed 1")
        if any(not v >= 0 for v in self.values):
            raise AccountingError("RDP values must be non-negative")

    def __len__(self) -> int:
        return len(self.orders)

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.orders, self.values))


def gaussian_rdp(sigma: float, alpha: float) -> float:
    if not sigma > 0:
        raise AccountingError(f"sigma must be > 0, got {sigma}")
    if not alpha > 1:
        raise AccountingError(f"alpha must be > 1, got {alpha}")
    return alpha / (2.0 * sigma**2)


def _check_integer_order(alpha) -> int:
    if isinstance(alpha, bool) or int(alpha) != alpha or alpha < 2:
        raise AccountingError(f"alpha must be an integer >= 2, got {alpha}")
    return int(alpha)


def subsampled_gaussian_rdp(m: MechanismParams, alpha: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian at integer order ``alpha``.

    (1/(a-1)) log sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1) / (2 sigma^2)),
    evaluated in log space.
    """
    a = _check_integer_order(alpha)
    q, sigma = m.q, m.sigma
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return gaussian_rdp(sigma, a)
    j = np.arange(a + 1, dtype=np.float64)
    log_terms = (
        gammaln(a + 1) - gammaln(j + 1) - gammaln(a - j + 1)
        + (a - j) * math.log1p(-q)
        + j * math.log(q)
        + j * (j - 1) / (2.0 * sigma**2)
    )
    return max(float(logsumexp(log_terms)) / (a - 1), 0.0)


def rdp_curve(m: MechanismParams, orders: Sequence[int] = DEFAULT_ORDERS) -> RdpCurve:
    """Per-step curve for ``m`` (steps are applied separately via :func:`compose`)."""
    return RdpCurve(tuple(float(a) for a in orders), tuple(subsampled_gaussian_rdp(m, a) for a in orders))


def compose(per_step_curve: RdpCurve, steps: int) -> RdpCurve:
    if int(steps) != steps or steps < 1:
        raise AccountingError(f"steps must be a positive integer, got {steps}")
    return RdpCurve(per_step_curve.orders, tuple(v * steps for v in per_step_curve.values))


def rdp_to_dp_with_order(curve: RdpCurve, delta: float) -> tuple[PrivacyParams, float]:
    if len(curve) == 0:
        raise AccountingError("cannot convert an empty RDP curve")
    if not 0.0 < delta < 1.0:
        raise AccountingError(f"delta must lie in (0, 1), got {delta}")
    log_inv_delta = math.log(1.0 / delta)
    best = min(
        ((v + log_inv_delta / (a - 1.0), a) for a, v in zip(curve.orders, curve.values)),
        key=lambda t: t[0],
    )
    return PrivacyParams(best[0], delta), best[1]


def rdp_to_dp(curve: RdpCurve, delta: float) -> PrivacyParams:
    return rdp_to_dp_with_order(curve, delta)[0]


def epsilon_for(
    sigma: float, q: float, steps: int, delta: float = DEFAULT_DELTA, orders: Sequence[int] = DEFAULT_ORDERS
) -> float:
    m = MechanismParams(sigma, q, steps)
    return rdp_to_dp(compose(rdp_curve(m, orders), steps), delta).epsilon


def calibrate_noise(
    target: PrivacyParams,
    q: float,
    steps: int,
    sigma_bounds: tuple[float, float] = DEFAULT_SIGMA_BOUNDS,
    orders: Sequence[int] = DEFAULT_ORDERS,
    rtol: float = CALIBRATION_RTOL,
) -> float:
    """Smallest noise multiplier (to relative tolerance ``rtol``) meeting ``target``.

    Bisects in log-sigma; the returned value is always on the feasible side.
    """
    if not target.epsilon > 0:
        raise AccountingError("target epsilon must be > 0")
    lo, hi = sigma_bounds
    if not 0 < lo < hi:
        raise AccountingError(f"invalid sigma bounds {sigma_bounds}")

    def eps(sigma: float) -> float:
        return epsilon_for(sigma, q, steps, target.delta, orders)

    if eps(hi) > target.epsilon:
        raise BracketError(
            f"epsilon={target.epsilon} unreachable: even sigma={hi} gives epsilon={eps(hi):.6g}"
        )
    if eps(lo) <= target.epsilon:
        return lo
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def group_privacy(base: PrivacyParams, k: int) -> PrivacyParams:
    """(k*eps, k*exp((k-1)*eps)*delta), with delta clamped to 1 and flagged vacuous."""
    if int(k) != k or k < 1:
        raise AccountingError(f"group size must be a positive integer, got {k}")
    k = int(k)
    eps = k * base.epsilon
    if base.delta == 0.0:
        return PrivacyParams(eps, 0.0)
    try:
        delta = k * math.exp((k - 1) * base.epsilon) * base.delta
    except OverflowError:
        delta = math.inf
    if delta >= 1.0:
        return PrivacyParams(eps, 1.0, vacuous=True)
    return PrivacyParams(eps, delta)


def scale_epsilon_for_granularity(eps_base: float, max_utterances: int) -> float:
    """Document-level epsilon budget matching ``eps_base`` per utterance."""
    if not eps_base > 0:
        raise AccountingError("eps_base must be > 0")
    if int(max_utterances) != max_utterances or max_utterances < 1:
        raise AccountingError("max_utterances must be a positive integer")
    return eps_base * max_utterances


def steps_for_epochs(epochs: float, dataset_size: int, lot_size: int) -> int:
    """One epoch is N/L expected lots; rounds half up, never below one step."""
    if dataset_size < 1 or lot_size < 1:
        raise AccountingError("dataset_size and lot_size must be >= 1")
    return max(1, int(math.floor(epochs * dataset_size / lot_size + 0.5)))


@dataclass(frozen=True)
class AccountingReport:
    run_id: str
    sigma: float
    q: float
    steps: int
    delta: float
    epsilon: float

    CSV_FIELDS = ("run_id", "sigma", "q", "steps", "delta", "epsilon")

    def row(self) -> dict:
        return {f: getattr(self, f) for f in self.CSV_FIELDS}


def account(
    sigma: float, q: float, steps: int, delta: float = DEFAULT_DELTA, orders: Iterable[int] = DEFAULT_ORDERS
) -> PrivacyParams:
    """Total (epsilon, delta) after ``steps`` lots."""
    return PrivacyParams(epsilon_for(sigma, q, steps, delta, tuple(orders)), delta)
