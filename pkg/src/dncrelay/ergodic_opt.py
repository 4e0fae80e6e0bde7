"""Long-term energy minimization over fading channels.

Each mode follows a water-filling power law in its instantaneous gain,
``P(g) = [beta_i log2(e) - 1/g]^+``, so everything about a mode is a
function of its multiplier ``beta_i``: the average rate ``Rbar_i(beta_i)``
and average power ``Pbar_i(beta_i)``. Stationarity in the fractions reads
``beta_i Rbar_i - Pbar_i = gamma`` with one shared ``gamma``; the left side
is increasing in ``beta_i`` (its derivative is ``Rbar_i``), so for a given
``gamma`` every mode has a unique ``beta_i``. ``gamma`` is then bisected
until the fractions ``L_i / Rbar_i`` fill the slot.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .model import (
    LOG2E,
    Allocation,
    ArrivalRates,
    ChannelDistribution,
    ChannelGains,
    ModeDistributions,
    PointMass,
    Rayleigh,
    service_pmf,
)
from .static_opt import InfeasibleError, solve_conventional, solve_static

__all__ = [
    "QuadratureError",
    "ErgodicSolution",
    "waterfill_power",
    "waterfill_rate",
    "avg_rate",
    "avg_power",
    "mode_response",
    "solve_ergodic",
    "rate_level_distribution",
    "balance_residual",
    "static_average_energy",
]

LN2 = math.log(2.0)
QUAD_RTOL = 1e-10
GAMMA_CAP = 1e12


class QuadratureError(ArithmeticError):
    """Adaptive quadrature did not reach the requested tolerance."""


def waterfill_power(g, beta):
    """Instantaneous power of a mode with multiplier ``beta`` at gain ``g``."""
    g = np.asarray(g, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.maximum(beta * LOG2E - 1.0 / g, 0.0)
    return float(out) if out.ndim == 0 else out


def waterfill_rate(g, beta):
    """Instantaneous rate ``log2(beta log2(e) g)`` above threshold, else 0."""
    g = np.asarray(g, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.maximum(np.log2(beta * LOG2E * g), 0.0)
    return float(out) if out.ndim == 0 else out


def _quad(fn, a, b, points=None, what="integral"):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(fn, a, b, epsabs=0.0, epsrel=QUAD_RTOL, limit=500, points=points)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(f"{what} on [{a:g}, {b:g}] did not converge: {exc}") from exc
    return val


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def _piecewise(beta, dist, which: str) -> float:
    """Gauss-Legendre per cell between the density's knots, above the threshold."""
    c = beta * LOG2E
    lo = 1.0 / c
    knots = np.asarray(dist.knots, dtype=float)
    edges = knots[knots > lo]
    if edges.size == 0:
        return 0.0
    edges = np.concatenate([[max(lo, knots[0])], edges])
    a, b = edges[:-1], edges[1:]
    g = 0.5 * (b - a)[:, None] * _GL_NODES[None, :] + 0.5 * (a + b)[:, None]
    law = np.log2(c * g) if which == "rate" else c - 1.0 / g
    return float(np.sum(0.5 * (b - a) * ((law * dist.pdf(g)) @ _GL_WEIGHTS)))


def _direct(beta, dist: ChannelDistribution, which: str) -> float:
    c = beta * LOG2E
    lo = 1.0 / c
    if getattr(dist, "knots", None) is not None:
        # piecewise-polynomial densities (tabulated laws and their minima)
        return _piecewise(beta, dist, which)
    hi = dist.upper(1e-16)
    if hi <= lo:
        return 0.0
    # integrate in t = ln g; the threshold may sit decades below the mean
    if which == "rate":
        fn = lambda t: (t + math.log(c)) / LN2 * float(dist.pdf(math.exp(t))) * math.exp(t)  # noqa: E731
    else:
        fn = lambda t: (c * math.exp(t) - 1.0) * float(dist.pdf(math.exp(t)))  # noqa: E731
    t_lo, t_hi = math.log(lo), math.log(hi)
    knee = math.log(dist.mean)
    pts = [knee] if t_lo < knee < t_hi else None
    return _quad(fn, t_lo, t_hi, points=pts, what=f"direct average {which}")


def _substituted(beta, dist: Rayleigh, which: str) -> float:
    # g -> c g moves the threshold to 1; then g = e^t removes the 1/g scales
    c = beta * LOG2E
    a = 1.0 / (c * dist.mean_gain)
    t_hi = math.log(60.0 / a) if 60.0 / a > 1.0 else 1.0
    knee = math.log(1.0 / a)
    pts = [knee] if 0.0 < knee < t_hi else None
    if which == "rate":
        fn = lambda t: math.exp(-a * math.exp(t)) / LN2  # noqa: E731
    else:
        fn = lambda t: c * math.exp(-t - a * math.exp(t))  # noqa: E731
    return _quad(fn, 0.0, t_hi, points=pts, what=f"substituted average {which}")


def _closed(beta, dist: Rayleigh, which: str) -> float:
    a = 1.0 / (beta * LOG2E * dist.mean_gain)
    if which == "rate":
        return float(special.exp1(a)) / LN2
    # c E2(a) = c e^-a - E1(a) / gbar
    return float(beta * LOG2E * special.expn(2, a))


def _average(beta, dist, which, method):
    if not beta > 0:
        return 0.0
    if isinstance(dist, PointMass):
        if which == "rate":
            return waterfill_rate(dist.gain, beta)
        return waterfill_power(dist.gain, beta)
    if method == "auto":
        method = "closed" if isinstance(dist, Rayleigh) else "direct"
    if method == "direct":
        return _direct(beta, dist, which)
    if not isinstance(dist, Rayleigh):
        raise ValueError(f"method {method!r} needs a Rayleigh distribution")
    if method == "closed":
        return _closed(beta, dist, which)
    if method == "substituted":
        return _substituted(beta, dist, which)
    raise ValueError(f"unknown method {method!r}")


def avg_rate(beta: float, dist: ChannelDistribution, method: str = "auto") -> float:
    """Average water-filling rate of a mode with multiplier ``beta``.

    ``method`` selects the evaluation route: ``direct`` integrates the rate
    law against the density, ``substituted`` integrates the Rayleigh
    integration-by-parts form, ``closed`` evaluates that form through the
    exponential integral. ``auto`` picks ``closed`` for Rayleigh laws and
    ``direct`` otherwise.
    """
    return _average(beta, dist, "rate", method)


def avg_power(beta: float, dist: ChannelDistribution, method: str = "auto") -> float:
    """Average water-filling power; same routes as :func:`avg_rate`."""
    return _average(beta, dist, "power", method)


def _balance(beta, dist, method="auto"):
    return beta * avg_rate(beta, dist, method) - avg_power(beta, dist, method)


def _scan_is_monotone(dist, method="auto", lo=1e-3, hi=1e3, points=11) -> bool:
    betas = np.geomspace(lo, hi, points) / dist.mean
    vals = np.array([_balance(b, dist, method) for b in betas])
    # flat at zero while the threshold lies beyond the support, then strictly rising
    d = np.diff(vals)
    return bool(np.all(d >= 0) and np.all(d[vals[1:] > 0] > 0))


def mode_response(gamma: float, dist: ChannelDistribution, method: str = "auto", scan: bool = False):
    """Multiplier, average rate and average power of a mode at ``gamma``.

    Solves ``beta Rbar(beta) - Pbar(beta) = gamma``. With ``scan`` the root
    is bracketed on a geometric grid instead of by doubling, which does not
    rely on the balance being monotone.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0:
        return 0.0, 0.0, 0.0
    fn = lambda b: _balance(b, dist, method) - gamma  # noqa: E731
    if scan:
        grid = np.geomspace(1e-12, 1e12, 241) / dist.mean
        vals = np.array([fn(b) for b in grid])
        k = int(np.argmax(vals >= 0))
        if vals[k] < 0:
            raise InfeasibleError(f"no multiplier reaches gamma={gamma:g}")
        lo, hi = (grid[k - 1], grid[k]) if k > 0 else (0.0, grid[0])
    else:
        lo, hi = 0.0, 1.0 / dist.mean
        while fn(hi) < 0:
            lo, hi = hi, 2.0 * hi
            if hi > 1e300:
                raise InfeasibleError(f"no multiplier reaches gamma={gamma:g}")
    beta = optimize.brentq(fn, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return beta, avg_rate(beta, dist, method), avg_power(beta, dist, method)


@dataclass
class ErgodicSolution:
    fractions: np.ndarray
    betas: np.ndarray
    gamma: float
    avg_rates: np.ndarray
    avg_powers: np.ndarray
    loads: np.ndarray
    dists: ModeDistributions
    rates: ArrivalRates
    conventional: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def active_modes(self) -> tuple:
        return tuple(i + 1 for i in range(5) if self.loads[i] > 0)

    @property
    def total_energy(self) -> float:
        return float(np.dot(self.fractions, self.avg_powers))

    @property
    def allocation(self) -> Allocation:
        return Allocation(
            self.fractions, self.avg_rates, self.avg_powers, {"betas": self.betas, "gamma": self.gamma}
        )

    @property
    def kkt_residuals(self) -> dict:
        """``beta_i Rbar_i - Pbar_i - gamma`` for every active mode."""
        return {
            m: float(self.betas[m - 1] * self.avg_rates[m - 1] - self.avg_powers[m - 1] - self.gamma)
            for m in self.active_modes
        }

    def rate_policy(self, mode: int):
        """Instantaneous rate law ``g -> R*(g)`` of ``mode``."""
        beta = self.betas[mode - 1]
        return lambda g: waterfill_rate(g, beta)

    def power_policy(self, mode: int):
        beta = self.betas[mode - 1]
        return lambda g: waterfill_power(g, beta)

    def to_dict(self, max_packets: int = 16, quantization: str = "dither") -> dict:
        levels = {}
        for m in self.active_modes:
            levels[str(m)] = rate_level_distribution(
                self.betas[m - 1], self.dists[m], max_packets, quantization
            ).tolist()
        return {
            "kind": "ergodic",
            "conventional": self.conventional,
            "distributions": self.dists.to_dict(),
            "arrivals": self.rates.to_dict(),
            "loads": self.loads.tolist(),
            "active_modes": list(self.active_modes),
            "fractions": self.fractions.tolist(),
            "betas": self.betas.tolist(),
            "gamma": self.gamma,
            "avg_rates": self.avg_rates.tolist(),
            "avg_powers": self.avg_powers.tolist(),
            "total_energy": self.total_energy,
            "kkt_residuals": {str(k): v for k, v in self.kkt_residuals.items()},
            "rate_levels": {"quantization": quantization, "max_packets": max_packets, "pmf": levels},
            "thresholds": {str(m): 1.0 / (self.betas[m - 1] * LOG2E) for m in self.active_modes},
        }


def solve_ergodic(
    dists: ModeDistributions,
    rates: ArrivalRates,
    conventional: bool = False,
    method: str = "auto",
) -> ErgodicSolution:
    """Minimum long-term energy allocation for fading links.

    Designs for ``rates.design``; with ``conventional`` mode 3 is disabled.
    """
    loads = rates.loads(conventional)
    active = [i for i in range(5) if loads[i] > 0]
    mode_dists = {i: dists[i + 1] for i in active}
    if not active:
        f = np.array([1 / 3, 1 / 3, 1 / 3, 0.0, 0.0])
        z = np.zeros(5)
        return ErgodicSolution(f, z, 0.0, z, z.copy(), loads, dists, rates, conventional)

    scan = {i: not _scan_is_monotone(mode_dists[i], method) for i in active}

    def excess(log_gamma):
        gamma = math.exp(log_gamma)
        total = 0.0
        for i in active:
            _, rbar, _ = mode_response(gamma, mode_dists[i], method, scan[i])
            total += loads[i] / rbar if rbar > 0 else math.inf
        return total - 1.0

    lo = hi = 0.0
    if excess(0.0) > 0:
        while excess(hi) > 0:
            lo, hi = hi, hi + 1.0
            if hi > math.log(GAMMA_CAP):
                raise InfeasibleError(f"loads {loads.tolist()} need more than one slot at gamma={GAMMA_CAP:g}")
    else:
        while excess(lo) <= 0:
            lo, hi = lo - 2.0, lo
            if lo < -700:
                raise InfeasibleError("loads too small to bracket gamma")
    log_gamma = optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    gamma = math.exp(log_gamma)

    betas, rbar, pbar, f = (np.zeros(5) for _ in range(4))
    for i in active:
        betas[i], rbar[i], pbar[i] = mode_response(gamma, mode_dists[i], method, scan[i])
        f[i] = loads[i] / rbar[i]
    diag = {"scan_fallback": [i + 1 for i in active if scan[i]]}
    return ErgodicSolution(f, betas, gamma, rbar, pbar, loads, dists, rates, conventional, diag)


def _level_masses(beta, dist, n_max):
    """Gain-axis masses for the rate levels: ``m_n`` and ``u_n`` for n < n_max.

    ``m_n`` is the probability that ``floor(R*(g)) == n`` for ``n >= 1``
    (``m_0`` includes the no-transmission region) and ``u_n`` the integral
    of ``frac(R*(g))`` over that level set.
    """
    c = beta * LOG2E
    edges = np.exp2(np.arange(n_max + 1)) / c
    cdf = dist.cdf(edges)
    m = np.diff(cdf)
    m[0] += cdf[0]
    if isinstance(dist, Rayleigh):
        gb = dist.mean_gain
        e1 = special.exp1(edges / gb)
        u = -np.exp(-edges[1:] / gb) + (e1[:-1] - e1[1:]) / LN2
    else:
        u = np.array(
            [
                _quad(lambda g, n=n: (math.log2(c * g) - n) * float(dist.pdf(g)), edges[n], edges[n + 1])
                if dist.sf(edges[n]) > 1e-300
                else 0.0
                for n in range(n_max)
            ]
        )
    return m, np.maximum(u, 0.0), float(dist.sf(edges[-1]))


def rate_level_distribution(
    beta: float, dist: ChannelDistribution, max_packets: int, quantization: str = "dither"
) -> np.ndarray:
    """Probability that a mode serves ``n`` packets in a slot, ``n < max_packets``.

    Packets per slot come from the instantaneous water-filling rate,
    ``floor(R*(g))`` for ``floor`` or the mean-preserving randomized
    rounding for ``dither``. Mass at ``max_packets - 1`` and above is lumped
    into the last bin.
    """
    if max_packets < 1:
        raise ValueError("max_packets must be >= 1")
    if not beta > 0:
        out = np.zeros(max_packets)
        out[0] = 1.0
        return out
    if isinstance(dist, PointMass):
        out = np.zeros(max_packets)
        for n, p in service_pmf(waterfill_rate(dist.gain, beta), quantization).items():
            out[min(n, max_packets - 1)] += p
        return out
    c = beta * LOG2E
    n_max = max_packets + 1
    while dist.sf(2.0**n_max / c) > 1e-17 and n_max < 1100:
        n_max += 1
    m, u, tail = _level_masses(beta, dist, n_max)
    if quantization == "floor":
        p = m.copy()
    elif quantization == "dither":
        p = m - u
        p[1:] += u[:-1]
        tail += u[-1]
    else:
        raise ValueError(f"unknown quantization {quantization!r}")
    out = np.zeros(max_packets)
    out[: max_packets - 1] = p[: max_packets - 1]
    out[-1] = p[max_packets - 1 :].sum() + tail
    out = np.maximum(out, 0.0)
    return out / out.sum()


def balance_residual(beta: float, gamma: float, dist: Rayleigh) -> float:
    """Residual of the Rayleigh rate/power balance at ``(beta, gamma)``.

    Evaluates ``int_1^inf (c/g^2 - c/g) exp(-g/(c gbar)) dg + gamma`` by
    quadrature (in ``t = ln g``), independently of the solver's route.
    """
    c = beta * LOG2E
    a = 1.0 / (c * dist.mean_gain)
    t_hi = math.log(60.0 / a) if 60.0 / a > 1.0 else 1.0
    knee = math.log(1.0 / a)
    pts = [knee] if 0.0 < knee < t_hi else None
    val = _quad(lambda t: c * (math.exp(-t) - 1.0) * math.exp(-a * math.exp(t)), 0.0, t_hi, pts, "balance")
    return val + gamma


def static_average_energy(
    dists: ModeDistributions,
    rates: ArrivalRates,
    draws: int = 200,
    seed: int = 0,
    conventional: bool = False,
):
    """Mean energy of re-solving the static problem for each channel draw.

    Returns ``(mean, per_draw)``. Draws whose loads cannot be carried at any
    power are reported as ``inf``.
    """
    rng = np.random.default_rng(seed)
    links = dists.sample_links(rng, draws)
    solver = solve_conventional if conventional else solve_static
    out = np.empty(draws)
    for k, (g1r, g2r, gr1, gr2) in enumerate(links):
        try:
            out[k] = solver(ChannelGains(g1r, g2r, gr1, gr2), rates).total_energy
        except InfeasibleError:
            out[k] = math.inf
    return float(out.mean()), out
