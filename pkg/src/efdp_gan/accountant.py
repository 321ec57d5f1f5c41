"""Renyi-DP accounting for the subsampled Gaussian mechanism.

All RDP values assume unit sensitivity: the noise multiplier is expressed
relative to the clipping norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numeric import InvalidParameterError, InvalidStateError

DEFAULT_ORDERS: tuple[float, ...] = tuple(range(2, 65)) + (128, 256)


@dataclass(frozen=True)
class DpBudget:
    epsilon: float = 10.0
    delta: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidParameterError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise InvalidParameterError("delta must lie in (0, 1)")


def rdp_gaussian(order: float, sigma: float, sensitivity: float = 1.0) -> float:
    """RDP of the plain Gaussian mechanism: ``order * sensitivity^2 / (2 sigma^2)``."""
    if not order > 1:
        raise InvalidParameterError(f"Renyi order must exceed 1, got {order}")
    if not sigma > 0:
        raise InvalidParameterError("sigma must be positive")
    return order * sensitivity ** 2 / (2.0 * sigma ** 2)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


@lru_cache(maxsize=4096)
def rdp_subsampled_gaussian(order: int, sigma: float, gamma: float) -> float:
    """Integer-order RDP bound of the Poisson-subsampled Gaussian mechanism.

    ``1/(order-1) * log sum_j C(order, j) (1-gamma)^(order-j) gamma^j exp(j(j-1)/(2 sigma^2))``.
    The binomial weights sum to one, so the series is evaluated as ``log1p(A - 1)``
    with ``A - 1 = sum_{j>=2} w_j expm1(j(j-1)/(2 sigma^2))``, all in log space.
    This keeps full relative precision when the cost is far below machine epsilon.
    """
    if int(order) != order or order < 2:
        raise InvalidParameterError(f"order must be an integer >= 2, got {order}")
    if not 0 < gamma <= 1:
        raise InvalidParameterError(f"sampling rate must lie in (0, 1], got {gamma}")
    if not sigma > 0:
        raise InvalidParameterError("sigma must be positive")
    lam = int(order)
    if gamma == 1.0:
        return rdp_gaussian(lam, sigma)
    log_g, log_1mg = math.log(gamma), math.log1p(-gamma)
    terms = []
    for j in range(2, lam + 1):
        x = j * (j - 1) / (2.0 * sigma ** 2)
        log_expm1 = x + math.log(-math.expm1(-x))
        terms.append(_log_binom(lam, j) + (lam - j) * log_1mg + j * log_g + log_expm1)
    log_am1 = float(np.logaddexp.reduce(terms))
    return float(np.logaddexp(0.0, log_am1)) / (lam - 1)


@dataclass(frozen=True)
class RdpLedger:
    """Per-order RDP spent after ``steps`` identical subsampled Gaussian releases.

    ``eps_per_order`` is ``steps * per_step_rdp`` so composition is exact.
    """

    sigma: float
    gamma: float
    orders: tuple = DEFAULT_ORDERS
    steps: int = 0
    per_step: np.ndarray = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        orders = tuple(self.orders)
        if any(o <= 1 for o in orders):
            raise InvalidParameterError("all orders must exceed 1")
        if list(orders) != sorted(set(orders)):
            raise InvalidParameterError("orders must be strictly ascending")
        object.__setattr__(self, "orders", orders)
        if self.per_step is None:
            per = np.array([rdp_subsampled_gaussian(int(o), self.sigma, self.gamma) for o in orders])
            object.__setattr__(self, "per_step", per)

    @property
    def eps_per_order(self) -> np.ndarray:
        return float(self.steps) * self.per_step

    def with_steps(self, steps: int) -> "RdpLedger":
        return RdpLedger(self.sigma, self.gamma, self.orders, int(steps), self.per_step)


def step_account(ledger: RdpLedger) -> RdpLedger:
    return ledger.with_steps(ledger.steps + 1)


def conversion(eps_per_order, orders, delta: float):
    """``(epsilon, best_order)`` from ``min_l eps(l) + log(1/delta)/(l-1)``."""
    if not 0 < delta < 1:
        raise InvalidParameterError("delta must lie in (0, 1)")
    if len(orders) == 0:
        raise InvalidStateError("empty order grid")
    orders = np.asarray(orders, dtype=np.float64)
    eps = np.asarray(eps_per_order, dtype=np.float64) + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.argmin(eps))
    return float(eps[i]), float(orders[i])


def to_eps_delta(ledger: RdpLedger, delta: float) -> float:
    return conversion(ledger.eps_per_order, ledger.orders, delta)[0]


def steps_for_budget(budget: DpBudget, sigma: float, gamma: float, orders=DEFAULT_ORDERS) -> int:
    """Largest ``T`` whose converted epsilon stays within ``budget.epsilon``."""
    base = RdpLedger(sigma, gamma, tuple(orders))

    def ok(t: int) -> bool:
        return to_eps_delta(base.with_steps(t), budget.delta) <= budget.epsilon

    if not ok(0):
        return 0
    hi = 1
    while ok(hi):
        hi *= 2
        if hi > 2 ** 200:
            raise InvalidParameterError("budget is effectively unbounded for this sigma")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
