"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Per-step RDP at integer orders comes from the binomial expansion of
``A_a = E_{z~N(0,s^2)}[((1-q) + q * exp((2z-1)/(2 s^2)))^a]``; fractional
orders use the two-sided series split at ``z0`` (signed, since generalized
binomial coefficients change sign). RDP of the mechanism is
``log(A_a) / (a - 1)``. Sensitivity is 1 in units of the clip norm
(add/remove adjacency).
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from ..errors import InvalidArgument

DEFAULT_ORDERS = tuple(float(a) for a in np.concatenate([np.arange(1.25, 63.0 + 1e-9, 0.25),
                                                        np.arange(64, 257)]))
CONVERSION = "rdp-standard: eps = min_a [rdp(a) + log(1/delta) / (a - 1)]"
ADJACENCY = "add-remove"


def _log_erfc(x):
    return math.log(2.0) + special.log_ndtr(-np.asarray(x) * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    i = np.arange(alpha + 1, dtype=np.float64)
    log_coef = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_coef + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alphas, max_terms: int = 20_000, block: int = 128) -> np.ndarray:
    """log A_a for fractional orders ``alphas`` (vectorized over orders and series terms)."""
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1, 1)
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    logs, signs = [], []
    done = np.zeros(len(alphas), dtype=bool)
    for start in range(0, max_terms, block):
        i = np.arange(start, start + block, dtype=np.float64).reshape(1, -1)
        coef = special.binom(alphas, i)
        with np.errstate(divide="ignore"):
            log_coef = np.log(np.abs(coef))
        j = alphas - i
        log_s0 = (log_coef + i * log_q + j * log_1mq + (i * i - i) / (2 * sigma**2)
                  + math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma)))
        log_s1 = (log_coef + j * log_q + i * log_1mq + (j * j - j) / (2 * sigma**2)
                  + math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma)))
        # orders already converged contribute nothing further
        log_s0[done] = -np.inf
        log_s1[done] = -np.inf
        logs += [log_s0, log_s1]
        signs += [np.sign(coef)] * 2
        tail = np.maximum(log_s0[:, -1], log_s1[:, -1])
        done |= (i[0, -1] > alphas[:, 0]) & (tail < -30)
        if done.all():
            break
    out, sign = special.logsumexp(np.concatenate(logs, axis=1), axis=1,
                                  b=np.concatenate(signs, axis=1), return_sign=True)
    return np.where(done & (sign > 0), out, np.inf)


@functools.lru_cache(maxsize=256)
def _curve(q: float, sigma: float, orders: tuple[float, ...]) -> np.ndarray:
    if q == 1.0:
        return np.asarray(orders) / (2 * sigma**2)
    a = np.asarray(orders, dtype=np.float64)
    log_a = np.empty(len(a))
    frac = a != np.floor(a)
    for k in np.flatnonzero(~frac):
        log_a[k] = _log_a_int(q, sigma, int(a[k]))
    if frac.any():
        log_a[frac] = _log_a_frac(q, sigma, a[frac])
    return log_a / (a - 1)


def rdp_subsampled_gaussian(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP of the sampled Gaussian mechanism at each order."""
    if not 0.0 < q <= 1.0:
        raise InvalidArgument(f"sample rate q must lie in (0, 1], got {q}")
    if not sigma > 0:
        raise InvalidArgument(f"noise multiplier must be positive, got {sigma}")
    orders = tuple(float(a) for a in orders)
    if any(a <= 1 for a in orders):
        raise InvalidArgument("RDP orders must exceed 1")
    return _curve(float(q), float(sigma), orders).copy()


@dataclass(frozen=True)
class AccountantState:
    """Cumulative RDP, stored as its composition history.

    Consecutive epochs with the same (q, sigma) are merged, so the totals are
    a pure function of (orders, history) and compose exactly.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    history: tuple[tuple[float, float, int], ...] = ()

    @property
    def steps_taken(self) -> int:
        return sum(n for _, _, n in self.history)

    @property
    def rdp(self) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for q, sigma, n in self.history:
            total = total + n * _curve(q, sigma, self.orders)
        return total

    def to_dict(self) -> dict:
        return {"orders": list(self.orders), "history": [list(h) for h in self.history]}

    @classmethod
    def from_dict(cls, d: dict) -> "AccountantState":
        return cls(tuple(float(a) for a in d["orders"]),
                   tuple((float(q), float(s), int(n)) for q, s, n in d["history"]))


def fresh_state(orders=DEFAULT_ORDERS) -> AccountantState:
    orders = tuple(sorted(float(a) for a in orders))
    return AccountantState(orders=orders)


def rdp_step(state: AccountantState, q: float, sigma: float, n_steps: int) -> AccountantState:
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise InvalidArgument(f"n_steps must be a positive integer, got {n_steps!r}")
    rdp_subsampled_gaussian(q, sigma, state.orders)  # validates, warms the cache
    q, sigma = float(q), float(sigma)
    history = list(state.history)
    if history and history[-1][:2] == (q, sigma):
        history[-1] = (q, sigma, history[-1][2] + int(n_steps))
    else:
        history.append((q, sigma, int(n_steps)))
    return AccountantState(state.orders, tuple(history))


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < 1.0:
        raise InvalidArgument(f"delta must lie in (0, 1), got {delta}")


def epsilon_and_order(state: AccountantState, delta: float) -> tuple[float, float]:
    _check_delta(delta)
    if not state.orders:
        raise InvalidArgument("empty RDP order grid")
    orders = np.asarray(state.orders)
    eps = state.rdp + math.log(1.0 / delta) / (orders - 1.0)
    k = int(np.nanargmin(eps))
    return float(eps[k]), float(orders[k])


def rdp_to_dp(state: AccountantState, delta: float) -> float:
    return epsilon_and_order(state, delta)[0]


def _epsilon_for_steps(curve: np.ndarray, log_term: np.ndarray, n: int) -> float:
    return float(np.min(n * curve + log_term))


def max_steps_for_budget(epsilon_budget: float, delta: float, q: float, sigma: float,
                         orders=DEFAULT_ORDERS, cap: int = 2**40) -> int:
    """Largest step count whose (epsilon, delta) stays within budget; 0 if one step is too many."""
    _check_delta(delta)
    if not math.isfinite(epsilon_budget):
        raise InvalidArgument("epsilon budget must be finite")
    curve = rdp_subsampled_gaussian(q, sigma, orders)
    log_term = math.log(1.0 / delta) / (np.asarray(orders, dtype=np.float64) - 1.0)
    if _epsilon_for_steps(curve, log_term, 1) > epsilon_budget:
        return 0
    lo, hi = 1, 2
    while hi < cap and _epsilon_for_steps(curve, log_term, hi) <= epsilon_budget:
        lo, hi = hi, hi * 2
    if hi >= cap and _epsilon_for_steps(curve, log_term, cap) <= epsilon_budget:
        return cap
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _epsilon_for_steps(curve, log_term, mid) <= epsilon_budget:
            lo = mid
        else:
            hi = mid
    return lo


def noise_for_budget(epsilon_budget: float, delta: float, q: float, steps: int,
                     orders=DEFAULT_ORDERS, tol: float = 1e-4) -> float:
    """Smallest noise multiplier (to relative ``tol``) that affords ``steps`` steps within budget."""
    if steps < 1:
        raise InvalidArgument("steps must be positive")
    if not epsilon_budget > 0:
        raise InvalidArgument("epsilon budget must be positive")

    def fits(sigma):
        state = AccountantState(tuple(float(a) for a in orders), ((float(q), float(sigma), int(steps)),))
        return rdp_to_dp(state, delta) <= epsilon_budget

    lo, hi = 0.05, 1.0
    while not fits(hi):
        lo, hi = hi, hi * 2
        if hi > 1e4:
            raise InvalidArgument("no reasonable noise multiplier meets this budget")
    if fits(lo):
        return lo
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if fits(mid) else (mid, hi)
    return hi


@dataclass
class RdpAccountant:
    """Mutable accountant owned by one training loop, with an append-only audit log."""

    delta: float
    state: AccountantState = field(default_factory=fresh_state)
    log_path: Path | None = None

    def step(self, q: float, sigma: float, n_steps: int) -> AccountantState:
        self.state = rdp_step(self.state, q, sigma, n_steps)
        if self.log_path is not None:
            record = {"q": q, "sigma": sigma, "steps": n_steps,
                      "total_steps": self.state.steps_taken,
                      "epsilon": self.epsilon(), "delta": self.delta}
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return self.state

    def epsilon(self) -> float:
        return rdp_to_dp(self.state, self.delta)

    def snapshot(self) -> AccountantState:
        return self.state
