"""Renyi-DP bookkeeping for the two noise mechanisms used by the trainers.

The accountant tracks one RDP curve (privacy loss as a function of the
Renyi order alpha) per mechanism invocation, adds curves across training
events, and converts the composed curve to a single reportable
(epsilon, delta) pair via

    epsilon = min over alpha of  rdp(alpha) + log(1/delta) / (alpha - 1).

Closed forms implemented here (sensitivity normalized to 1):

* Gaussian mechanism, std sigma:      rdp(alpha) = alpha / (2 sigma^2)
* Poisson-subsampled Gaussian, rate q: stable binomial-expansion sum for
  integer alpha; fractional orders take the conservative max of the two
  neighboring integers (RDP is nondecreasing in alpha).
* Laplace mechanism, scale b:
  rdp(alpha) = log( a/(2a-1) * e^((a-1)/b) + (a-1)/(2a-1) * e^(-a/b) ) / (a-1)

All sums of exponentials run in log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError

# Order grid: dense integers where the optimum usually lands for this
# artifact's (q, sigma, steps), plus a few fractional and large orders.
DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(
    float(a) for a in range(2, 65)
) + (128.0, 256.0, 512.0)

#: Practicality threshold: an epsilon at or below this is flagged usable.
PRACTICAL_EPSILON = 14.0


def rdp_gaussian(sigma: float, alpha: float) -> float:
    """RDP of the Gaussian mechanism at order ``alpha``, sensitivity 1."""
    if sigma <= 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if alpha <= 1:
        raise DomainError(f"alpha must be > 1, got {alpha}")
    return alpha / (2.0 * sigma * sigma)


def _log_binom(n: int, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _subsampled_gaussian_int(q: float, sigma: float, alpha: int) -> float:
    """Binomial-expansion RDP bound for integer order, 0 < q < 1."""
    i = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        _log_binom(alpha, i)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2.0 * sigma * sigma)
    )
    log_a = float(logsumexp(log_terms))
    # A_alpha >= 1 analytically; clamp roundoff below zero.
    return max(log_a, 0.0) / (alpha - 1)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of the Poisson-subsampled Gaussian mechanism.

    Reduces to :func:`rdp_gaussian` at q = 1 and to 0 at q = 0.  Fractional
    orders are bounded by the larger of the two neighboring integer orders,
    which is conservative because RDP is nondecreasing in alpha.
    """
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"sampling rate must be in [0, 1], got {q}")
    if sigma <= 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if alpha <= 1:
        raise DomainError(f"alpha must be > 1, got {alpha}")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return rdp_gaussian(sigma, alpha)
    if float(alpha).is_integer():
        return _subsampled_gaussian_int(q, sigma, int(alpha))
    lo, hi = int(math.floor(alpha)), int(math.ceil(alpha))
    hi_val = _subsampled_gaussian_int(q, sigma, hi)
    if lo < 2:
        return hi_val
    return max(_subsampled_gaussian_int(q, sigma, lo), hi_val)


def rdp_laplace(b: float, alpha: float) -> float:
    """RDP of the Laplace mechanism at scale ``b``, sensitivity 1.

    The alpha -> infinity limit is the mechanism's pure-DP epsilon 1/b.
    """
    if b <= 0:
        raise DomainError(f"scale must be > 0, got {b}")
    if alpha <= 1:
        raise DomainError(f"alpha must be > 1, got {alpha}")
    t1 = math.log(alpha / (2.0 * alpha - 1.0)) + (alpha - 1.0) / b
    t2 = math.log((alpha - 1.0) / (2.0 * alpha - 1.0)) - alpha / b
    return max(float(logsumexp([t1, t2])), 0.0) / (alpha - 1.0)


@dataclass(frozen=True)
class RdpCurve:
    """RDP values on a fixed grid of orders."""

    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.orders) != len(self.values):
            raise DomainError("orders and values must have equal length")
        if any(a <= 1 for a in self.orders):
            raise DomainError("all orders must be > 1")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            raise DomainError("all rdp values must be finite and >= 0")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise DomainError("cannot add curves on different order grids")
        return RdpCurve(self.orders, tuple(
            a + b for a, b in zip(self.values, other.values)
        ))


def zero_curve(orders: tuple[float, ...] = DEFAULT_ORDERS) -> RdpCurve:
    """The identity of composition: zero privacy loss at every order."""
    return RdpCurve(tuple(orders), (0.0,) * len(orders))


@dataclass(frozen=True)
class MechanismEvent:
    """One (possibly repeated) mechanism invocation in a training run.

    ``kind`` is ``"gaussian-subsampled"`` (parameters q, sigma) or
    ``"laplace-query"`` (parameter b).
    """

    kind: str
    q: float = 0.0
    sigma: float = 0.0
    b: float = 0.0
    count: int = 1

    def __post_init__(self) -> None:
        if self.count < 1:
            raise DomainError(f"repetition count must be >= 1, got {self.count}")
        if self.kind == "gaussian-subsampled":
            if not 0.0 <= self.q <= 1.0:
                raise DomainError(f"q must be in [0, 1], got {self.q}")
            if self.sigma <= 0:
                raise DomainError(f"sigma must be > 0, got {self.sigma}")
        elif self.kind == "laplace-query":
            if self.b <= 0:
                raise DomainError(f"b must be > 0, got {self.b}")
        else:
            raise DomainError(f"unknown mechanism kind {self.kind!r}")

    def curve(self, orders: tuple[float, ...] = DEFAULT_ORDERS) -> RdpCurve:
        """Single-invocation RDP curve (repetition count not applied)."""
        if self.kind == "gaussian-subsampled":
            vals = tuple(rdp_subsampled_gaussian(self.q, self.sigma, a)
                         for a in orders)
        else:
            vals = tuple(rdp_laplace(self.b, a) for a in orders)
        return RdpCurve(tuple(orders), vals)


@dataclass
class PrivacyLedger:
    """Ordered log of mechanism events with a lazily composed curve.

    Training threads must serialize appends externally; composition and
    conversion are pure reads.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    events: list[MechanismEvent] = field(default_factory=list)

    def record_gaussian_steps(self, q: float, sigma: float, count: int = 1) -> None:
        self.events.append(
            MechanismEvent("gaussian-subsampled", q=q, sigma=sigma, count=count))

    def record_laplace_queries(self, b: float, count: int = 1) -> None:
        self.events.append(MechanismEvent("laplace-query", b=b, count=count))


def compose(ledger: PrivacyLedger) -> RdpCurve:
    """Pointwise sum of event curves weighted by repetition counts."""
    total = np.zeros(len(ledger.orders))
    for event in ledger.events:
        total += event.count * np.asarray(event.curve(ledger.orders).values)
    return RdpCurve(tuple(ledger.orders), tuple(float(v) for v in total))


@dataclass(frozen=True)
class DpGuarantee:
    """A reportable (epsilon, delta) pair and the order that attained it."""

    epsilon: float
    delta: float
    alpha: float

    def __str__(self) -> str:
        return (f"epsilon={self.epsilon:.6g} alpha={self.alpha:g} "
                f"delta={self.delta:g} private="
                f"{'true' if flag_private(self) else 'false'}")


def to_dp(curve: RdpCurve, delta: float) -> DpGuarantee:
    """Convert an RDP curve to the tightest (epsilon, delta) on its grid."""
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(curve.orders)
    eps = np.asarray(curve.values) + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return DpGuarantee(float(eps[best]), delta, float(orders[best]))


def flag_private(guarantee: DpGuarantee,
                 threshold: float = PRACTICAL_EPSILON) -> bool:
    """True when the guarantee clears the practicality threshold (inclusive)."""
    return guarantee.epsilon <= threshold


def dpsgd_epsilon(q: float, sigma: float, steps: int, delta: float,
                  orders: tuple[float, ...] = DEFAULT_ORDERS) -> DpGuarantee:
    """Privacy cost of ``steps`` subsampled-Gaussian updates.

    ``steps == 0`` means the mechanism was never invoked: the loss is
    exactly zero, bypassing the grid conversion's residual term.
    """
    if steps < 0:
        raise DomainError(f"steps must be >= 0, got {steps}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must be in (0, 1), got {delta}")
    if steps == 0:
        return DpGuarantee(0.0, delta, math.inf)
    ledger = PrivacyLedger(orders=tuple(orders))
    ledger.record_gaussian_steps(q, sigma, count=steps)
    return to_dp(compose(ledger), delta)
