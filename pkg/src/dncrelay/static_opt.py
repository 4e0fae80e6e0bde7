"""Energy-minimal time sharing over static channels.

The joint problem over fractions and rates collapses to a convex problem in
the fractions alone once each mode carries exactly its load
(``f_i * R_i = L_i``, see :func:`dncrelay.model.mode_loads`). Stationarity
then ties every active mode's rate to one shared multiplier ``beta``
through ``2**R (1 - R ln 2) = 1 - beta * g``, and ``beta`` is pinned by
full use of the slot, ``sum(f) = 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .model import Allocation, ArrivalRates, ChannelGains, power_for_rate

__all__ = [
    "InfeasibleError",
    "StaticSolution",
    "rate_for_multiplier",
    "solve_static",
    "solve_conventional",
    "approx_small_lambda",
    "brute_force_oracle",
    "p1_energy",
]

LN2 = math.log(2.0)
BETA_CAP = 1e9


class InfeasibleError(ArithmeticError):
    """The requested loads cannot be carried within one slot."""


def _psi(rate: float) -> float:
    """``1 - 2**R (1 - R ln 2)``; increasing from 0 at R = 0."""
    x = rate * LN2
    if x < 1e-3:
        # series: sum_{k>=2} (k-1) x^k / k!
        return x * x * (0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0)))
    return x * math.exp(x) - math.expm1(x)


def rate_for_multiplier(beta: float, gain: float) -> float:
    """Rate of an active mode whose stationarity condition holds at ``beta``.

    Solves ``2**R (1 - R ln 2) = 1 - beta * gain`` for ``R >= 0``. The left
    side falls strictly from 1, so the root is unique; it depends on
    ``beta * gain`` only. A nonpositive multiplier has no active root and
    yields 0.
    """
    if gain <= 0:
        raise ValueError("channel gain must be positive")
    target = beta * gain
    if not target > 0:
        return 0.0
    hi = 1.0
    while _psi(hi) < target:
        hi *= 2.0
        if hi > 2048:
            raise OverflowError(f"rate root for beta*g={target:g} exceeds float range")
    return optimize.brentq(lambda r: _psi(r) - target, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)


@dataclass
class StaticSolution:
    allocation: Allocation
    kkt_residuals: dict
    active_modes: tuple
    beta: float
    loads: np.ndarray
    gains: ChannelGains
    rates: ArrivalRates
    conventional: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def fractions(self) -> np.ndarray:
        return self.allocation.fractions

    @property
    def total_energy(self) -> float:
        return self.allocation.total_energy

    def to_dict(self) -> dict:
        return {
            "kind": "static",
            "conventional": self.conventional,
            "gains": self.gains.to_dict(),
            "arrivals": self.rates.to_dict(),
            "loads": self.loads.tolist(),
            "active_modes": list(self.active_modes),
            "beta": self.beta,
            "kkt_residuals": {str(k): v for k, v in self.kkt_residuals.items()},
            **self.allocation.to_dict(),
        }


def _idle_solution(gains, rates, loads, conventional):
    f = np.array([1 / 3, 1 / 3, 1 / 3, 0.0, 0.0]) if not conventional else np.array([0.25, 0.25, 0.0, 0.25, 0.25])
    alloc = Allocation(f, np.zeros(5), np.zeros(5), {"beta": 0.0})
    return StaticSolution(alloc, {}, (), 0.0, loads, gains, rates, conventional)


def _solve_loads(gains: ChannelGains, rates: ArrivalRates, loads: np.ndarray, conventional: bool):
    g = gains.as_array()
    active = [i for i in range(5) if loads[i] > 0]
    if not active:
        return _idle_solution(gains, rates, loads, conventional)

    def excess(beta):
        return sum(loads[i] / rate_for_multiplier(beta, g[i]) for i in active) - 1.0

    lo = 1e-12
    while excess(lo) <= 0:
        lo *= 1e-3
        if lo < 1e-300:
            raise InfeasibleError("loads too small to bracket the multiplier")
    hi = 1.0
    while excess(hi) >= 0:
        hi *= 2.0
        if hi > BETA_CAP:
            raise InfeasibleError(
                f"loads {loads.tolist()} need more than one slot even at beta={BETA_CAP:g}"
            )
    beta = optimize.brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)

    R = np.zeros(5)
    f = np.zeros(5)
    for i in active:
        R[i] = rate_for_multiplier(beta, g[i])
        f[i] = loads[i] / R[i]
    P = np.where(R > 0, power_for_rate(R, g), 0.0)
    residuals = {i + 1: float(-_psi(R[i]) / g[i] + beta) for i in active}
    alloc = Allocation(f, R, P, {"beta": beta})
    return StaticSolution(alloc, residuals, tuple(i + 1 for i in active), beta, loads, gains, rates, conventional)


def solve_static(gains: ChannelGains, rates: ArrivalRates) -> StaticSolution:
    """Minimum-energy allocation with network coding at the relay.

    Designs for the inflated rates ``rates.design``. Raises
    :class:`InfeasibleError` if the loads cannot fit in a slot before the
    multiplier reaches ``BETA_CAP``.
    """
    return _solve_loads(gains, rates, rates.loads(), conventional=False)


def solve_conventional(gains: ChannelGains, rates: ArrivalRates) -> StaticSolution:
    """Baseline without network coding: mode 3 off, both flows forwarded."""
    return _solve_loads(gains, rates, rates.loads(conventional=True), conventional=True)


def approx_small_lambda(gains: ChannelGains, rates: ArrivalRates) -> Allocation:
    """Closed-form fractions for light traffic.

    Each active mode gets ``f_i = L_i * sqrt(1 + beta - 1/g_i)`` and
    ``beta`` is bisected so the fractions fill the slot. Only meaningful for
    loads well below one packet per slot.
    """
    loads = rates.loads()
    g = gains.as_array()
    active = [i for i in range(5) if loads[i] > 0]
    if not active:
        return _idle_solution(gains, rates, loads, False).allocation

    def fractions(beta):
        f = np.zeros(5)
        for i in active:
            f[i] = loads[i] * math.sqrt(max(1.0 + beta - 1.0 / g[i], 0.0))
        return f

    lo = max(1.0 / g[i] - 1.0 for i in active)
    if fractions(lo).sum() >= 1.0:
        raise ValueError("light-traffic approximation has no root for these loads")
    hi = max(lo, 0.0) + 1.0
    while fractions(hi).sum() < 1.0:
        hi = lo + 2.0 * (hi - lo)
    beta = optimize.brentq(lambda b: fractions(b).sum() - 1.0, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    f = fractions(beta)
    R = np.zeros(5)
    R[active] = loads[active] / f[active]
    P = np.where(R > 0, power_for_rate(R, g), 0.0)
    return Allocation(f, R, P, {"beta": beta})


# --------------------------------------------------------------------------
# brute-force oracle over the original (fractions, rates) problem
# --------------------------------------------------------------------------


def _term(f, x, g):
    """``f * P(x / f)`` with the conventions 0 load -> 0 and f = 0 -> inf."""
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        val = f * np.expm1(np.where(f > 0, x / np.where(f > 0, f, 1.0), 0.0) * LN2) / g
    val = np.where(f > 0, val, np.inf)
    return np.where(x <= 0, 0.0, val)


def _golden_min(cost, lo, hi, iters=90):
    """Vectorized golden-section minimum of convex ``cost`` over ``[lo, hi]``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo.copy(), hi.copy()
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = cost(c), cost(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - invphi * (b - a)
        new_d = a + invphi * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_old, fd_old = fc, fd
        c, d = c_next, d_next
        fc = np.where(left, cost(c), fd_old)
        fd = np.where(left, fc_old, cost(d))
    xs = np.stack([lo, hi, c, d])
    vals = np.stack([cost(lo), cost(hi), fc, fd])
    k = np.argmin(vals, axis=0)
    cols = np.arange(lo.shape[0])
    return vals[k, cols], xs[k, cols]


def p1_energy(F, gains: ChannelGains, lam1: float, lam2: float, conventional=False, return_split=False):
    """Least energy of fractions ``F`` (rows, 5 columns) over all rates.

    Uplinks must carry their flow in full. For the downlink the split of
    each flow between the coded broadcast and the forwarding modes is itself
    optimized, so no structural property of the optimum is assumed. With
    ``return_split`` the optimal coded traffic ``f3 * R3`` per row is
    returned as well.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    g = gains.as_array()
    f1, f2, f3, f4, f5 = F.T
    up = _term(f1, lam1, g[0]) + _term(f2, lam2, g[1])
    if conventional:
        down = _term(f4, lam2, g[3]) + _term(f5, lam1, g[4])
        return (up + down, np.zeros(F.shape[0])) if return_split else up + down

    def cost(x3):
        return (
            _term(f3, x3, g[2])
            + _term(f4, np.maximum(lam2 - x3, 0.0), g[3])
            + _term(f5, np.maximum(lam1 - x3, 0.0), g[4])
        )

    lo = np.maximum(np.where(f4 > 0, 0.0, lam2), np.where(f5 > 0, 0.0, lam1))
    hi = np.where(f3 > 0, max(lam1, lam2), 0.0)
    feasible = lo <= hi
    lo_c = np.where(feasible, lo, 0.0)
    hi_c = np.where(feasible, hi, 0.0)
    down, x3 = _golden_min(cost, lo_c, hi_c)
    total = up + np.where(feasible, down, np.inf)
    return (total, x3) if return_split else total


def _simplex_grid(dim: int, k: int) -> np.ndarray:
    pts = []
    for bars in itertools.combinations(range(k + dim - 1), dim - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(k + dim - 2 - prev)
        pts.append(parts)
    return np.asarray(pts, dtype=float) / k


def brute_force_oracle(
    gains: ChannelGains,
    rates: ArrivalRates,
    grid_step: float = 0.1,
    rounds: int = 10,
    conventional: bool = False,
) -> Allocation:
    """Grid search plus local refinement over the fraction simplex.

    Independent of the multiplier solver: it evaluates the original
    objective, with the downlink flow split optimized per candidate. Any
    point it returns is feasible, so its energy upper-bounds the optimum.
    """
    if not 0 < grid_step <= 0.1:
        raise ValueError("grid_step must lie in (0, 0.1]")
    lam1, lam2 = rates.design
    cols = [0, 1, 3, 4] if conventional else [0, 1, 2, 3, 4]
    dim = len(cols)

    def energy(X):
        F = np.zeros((X.shape[0], 5))
        F[:, cols] = X
        return p1_energy(F, gains, lam1, lam2, conventional)

    grid = _simplex_grid(dim, int(round(1.0 / grid_step)))
    e = energy(grid)
    best = grid[int(np.argmin(e))]
    best_e = float(np.min(e))

    offsets = np.array(list(itertools.product(range(-2, 3), repeat=dim - 1)), dtype=float)
    offsets = np.hstack([offsets, -offsets.sum(axis=1, keepdims=True)])
    step = grid_step
    for _ in range(rounds):
        step /= 2.0
        for _ in range(200):
            cand = best + step * offsets
            cand = cand[np.all(cand >= -1e-15, axis=1)]
            cand = np.clip(cand, 0.0, None)
            ce = energy(cand)
            k = int(np.argmin(ce))
            if ce[k] < best_e - 1e-15 * max(1.0, abs(best_e)):
                best, best_e = cand[k], float(ce[k])
            else:
                break

    f = np.zeros(5)
    f[cols] = best
    _, x3 = p1_energy(f, gains, lam1, lam2, conventional, return_split=True)
    x3 = float(x3[0])
    if conventional:
        carried = np.array([lam1, lam2, 0.0, lam2, lam1])
    else:
        carried = np.array([lam1, lam2, x3, max(lam2 - x3, 0.0), max(lam1 - x3, 0.0)])
    R = np.where(f > 0, carried / np.where(f > 0, f, 1.0), 0.0)
    with np.errstate(over="ignore"):
        P = np.expm1(R * LN2) / gains.as_array()
    return Allocation(f, R, P, {"energy": best_e})
