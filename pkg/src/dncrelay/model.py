"""Domain types for the three-node two-way relay network.

Five transmission modes share each slot:

    1: S1 -> R        2: S2 -> R        3: R -> {S1, S2} (network coded)
    4: R -> S1        5: R -> S2

Arrays indexed by mode are length 5 with mode ``i`` at index ``i - 1``.
Noise power is normalized to one, so a gain ``g`` is already an SNR per
unit of transmit power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

__all__ = [
    "MODES",
    "ChannelGains",
    "ArrivalRates",
    "Allocation",
    "ChannelDistribution",
    "Rayleigh",
    "PointMass",
    "Tabulated",
    "MinOf",
    "ModeDistributions",
    "power_for_rate",
    "virtual_rates",
    "mode_loads",
    "service_pmf",
    "QUANTIZATIONS",
]

MODES = (1, 2, 3, 4, 5)
LOG2E = 1.0 / math.log(2.0)


def power_for_rate(rate, gain):
    """Transmit power needed to carry ``rate`` bits/channel use over ``gain``.

    Inverts ``rate = log2(1 + power * gain)``. Works elementwise on arrays.
    """
    gain = np.asarray(gain, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(gain <= 0):
        raise ValueError("channel gain must be positive")
    if np.any(rate < 0):
        raise ValueError("rate must be nonnegative")
    out = np.expm1(rate * math.log(2.0)) / gain
    return float(out) if out.ndim == 0 else out


def virtual_rates(lam1: float, lam2: float) -> tuple[float, float, float]:
    """Loads carried by modes 3, 4 and 5 for source rates ``(lam1, lam2)``.

    Mode 3 carries the common part, the forwarding mode of the heavier flow
    carries the surplus and the other forwarding mode is unused.
    """
    if lam1 < 0 or lam2 < 0:
        raise ValueError("arrival rates must be nonnegative")
    return min(lam1, lam2), max(lam2 - lam1, 0.0), max(lam1 - lam2, 0.0)


def mode_loads(lam1: float, lam2: float, conventional: bool = False) -> np.ndarray:
    """Per-mode traffic each mode must carry (``f_i * R_i``).

    With ``conventional=True`` network coding is disabled: mode 3 is unused
    and the relay forwards each flow in full on modes 4 and 5.
    """
    if conventional:
        return np.array([lam1, lam2, 0.0, lam2, lam1], dtype=float)
    l3, l4, l5 = virtual_rates(lam1, lam2)
    return np.array([lam1, lam2, l3, l4, l5], dtype=float)


@dataclass(frozen=True)
class ChannelGains:
    """Static link power gains; ``g3`` is the weaker of the two downlinks."""

    g1: float
    g2: float
    g4: float
    g5: float

    def __post_init__(self):
        for name in ("g1", "g2", "g4", "g5"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")

    @classmethod
    def from_links(cls, g1r, g2r, gr1, gr2, snr_gap: float = 1.0) -> "ChannelGains":
        """Build from link gains, folding an SNR gap into effective gains."""
        if snr_gap <= 0:
            raise ValueError("snr_gap must be positive")
        return cls(g1r / snr_gap, g2r / snr_gap, gr1 / snr_gap, gr2 / snr_gap)

    @classmethod
    def uniform(cls, g: float = 1.0) -> "ChannelGains":
        return cls(g, g, g, g)

    @property
    def g3(self) -> float:
        return min(self.g4, self.g5)

    def as_array(self) -> np.ndarray:
        return np.array([self.g1, self.g2, self.g3, self.g4, self.g5], dtype=float)

    def __getitem__(self, mode: int) -> float:
        return float(self.as_array()[mode - 1])

    def to_dict(self) -> dict:
        return {"g1r": self.g1, "g2r": self.g2, "gr1": self.g4, "gr2": self.g5}


@dataclass(frozen=True)
class ArrivalRates:
    """Poisson packet rates at S1 and S2 plus the design back-off ``eps``."""

    lam1: float
    lam2: float
    eps: float = 0.0

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("arrival rates must be nonnegative")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    @property
    def design(self) -> tuple[float, float]:
        """Rates the allocation is designed for, inflated by ``1 + eps``."""
        k = 1.0 + self.eps
        return self.lam1 * k, self.lam2 * k

    def loads(self, conventional: bool = False) -> np.ndarray:
        return mode_loads(*self.design, conventional=conventional)

    def to_dict(self) -> dict:
        return {"lambda1": self.lam1, "lambda2": self.lam2, "eps": self.eps}


@dataclass
class Allocation:
    """Time fractions, rates and powers per mode.

    For fading solutions ``rates`` and ``powers`` hold the channel-averaged
    values.
    """

    fractions: np.ndarray
    rates: np.ndarray
    powers: np.ndarray
    multipliers: dict = field(default_factory=dict)

    @property
    def total_energy(self) -> float:
        return float(np.dot(self.fractions, self.powers))

    @property
    def active_modes(self) -> tuple[int, ...]:
        return tuple(int(i) + 1 for i in np.flatnonzero(self.fractions > 0))

    def to_dict(self) -> dict:
        return {
            "fractions": self.fractions.tolist(),
            "rates": self.rates.tolist(),
            "powers": self.powers.tolist(),
            "multipliers": {k: _jsonable(v) for k, v in self.multipliers.items()},
            "total_energy": self.total_energy,
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# --------------------------------------------------------------------------
# Fading gain distributions
# --------------------------------------------------------------------------


class ChannelDistribution:
    """Marginal law of one mode's power gain.

    Subclasses provide ``pdf``, ``sf`` and ``sample``. ``upper(tol)`` bounds
    the support for numerical integration so that the tail mass beyond it is
    below ``tol``.
    """

    kind = "generic"

    def pdf(self, g):
        raise NotImplementedError

    def sf(self, g):
        raise NotImplementedError

    def cdf(self, g):
        return 1.0 - self.sf(g)

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def upper(self, tol: float = 1e-12) -> float:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        hi = self.upper()
        val, _ = integrate.quad(lambda g: g * self.pdf(g), 0.0, hi, limit=200)
        return val

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Rayleigh(ChannelDistribution):
    """Rayleigh-faded link: exponentially distributed power gain."""

    mean_gain: float
    kind = "rayleigh"

    def __post_init__(self):
        if not self.mean_gain > 0:
            raise ValueError("mean gain must be positive")

    def pdf(self, g):
        g = np.asarray(g, dtype=float)
        return np.where(g >= 0, np.exp(-g / self.mean_gain) / self.mean_gain, 0.0)

    def sf(self, g):
        g = np.asarray(g, dtype=float)
        return np.where(g >= 0, np.exp(-np.maximum(g, 0.0) / self.mean_gain), 1.0)

    def sample(self, rng, size=None):
        return rng.exponential(self.mean_gain, size=size)

    def upper(self, tol: float = 1e-12) -> float:
        return self.mean_gain * math.log(1.0 / tol)

    @property
    def mean(self) -> float:
        return self.mean_gain

    def to_dict(self) -> dict:
        return {"kind": "rayleigh", "mean": self.mean_gain}


@dataclass(frozen=True)
class PointMass(ChannelDistribution):
    """Deterministic gain; reduces the fading problem to the static one."""

    gain: float
    kind = "point"

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")

    def pdf(self, g):
        raise TypeError("a point mass has no density")

    def sf(self, g):
        return np.where(np.asarray(g, dtype=float) < self.gain, 1.0, 0.0)

    def sample(self, rng, size=None):
        return np.full(size, self.gain) if size is not None else self.gain

    def upper(self, tol: float = 1e-12) -> float:
        return self.gain

    @property
    def mean(self) -> float:
        return self.gain

    def to_dict(self) -> dict:
        return {"kind": "point", "gain": self.gain}


class Tabulated(ChannelDistribution):
    """Piecewise-linear density on a grid, renormalized to unit mass."""

    kind = "tabulated"

    def __init__(self, grid, density):
        grid = np.asarray(grid, dtype=float)
        density = np.asarray(density, dtype=float)
        if grid.ndim != 1 or grid.shape != density.shape or grid.size < 2:
            raise ValueError("grid and density must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(grid) <= 0) or grid[0] < 0:
            raise ValueError("grid must be nonnegative and strictly increasing")
        if np.any(density < 0):
            raise ValueError("density must be nonnegative")
        seg = 0.5 * (density[1:] + density[:-1]) * np.diff(grid)
        total = seg.sum()
        if not total > 0:
            raise ValueError("density has zero mass")
        self.grid = grid
        self.density = density / total
        self._cdf = np.concatenate([[0.0], np.cumsum(seg / total)])

    def pdf(self, g):
        return np.interp(g, self.grid, self.density, left=0.0, right=0.0)

    def cdf(self, g):
        g = np.asarray(g, dtype=float)
        k = np.clip(np.searchsorted(self.grid, g, side="right") - 1, 0, self.grid.size - 2)
        x0 = self.grid[k]
        d0 = self.density[k]
        slope = (self.density[k + 1] - d0) / (self.grid[k + 1] - x0)
        t = np.clip(g, self.grid[0], self.grid[-1]) - x0
        val = self._cdf[k] + d0 * t + 0.5 * slope * t * t
        return np.clip(np.where(g < self.grid[0], 0.0, val), 0.0, 1.0)

    def sf(self, g):
        return 1.0 - self.cdf(g)

    def sample(self, rng, size=None):
        # fine inversion grid; the density is piecewise linear so this is exact to O(h^2)
        xs = np.linspace(self.grid[0], self.grid[-1], 20 * self.grid.size)
        u = rng.random(size)
        return np.interp(u, self.cdf(xs), xs)

    def upper(self, tol: float = 1e-12) -> float:
        return float(self.grid[-1])

    @property
    def knots(self):
        return self.grid

    @property
    def mean(self) -> float:
        a, b = self.grid[:-1], self.grid[1:]
        pa, pb = self.density[:-1], self.density[1:]
        return float(np.sum((b - a) / 6.0 * (a * (2 * pa + pb) + b * (pa + 2 * pb))))

    def to_dict(self) -> dict:
        return {"kind": "tabulated", "grid": self.grid.tolist(), "density": self.density.tolist()}


class MinOf(ChannelDistribution):
    """Law of ``min(a, b)`` for independent gains ``a`` and ``b``."""

    kind = "min"

    def __init__(self, a: ChannelDistribution, b: ChannelDistribution):
        self.a, self.b = a, b

    def pdf(self, g):
        return self.a.pdf(g) * self.b.sf(g) + self.b.pdf(g) * self.a.sf(g)

    def sf(self, g):
        return self.a.sf(g) * self.b.sf(g)

    def sample(self, rng, size=None):
        return np.minimum(self.a.sample(rng, size), self.b.sample(rng, size))

    def upper(self, tol: float = 1e-12) -> float:
        return min(self.a.upper(tol), self.b.upper(tol))

    @property
    def knots(self):
        ka, kb = getattr(self.a, "knots", None), getattr(self.b, "knots", None)
        if ka is None or kb is None:
            return None
        k = np.union1d(ka, kb)
        return k[k <= self.upper()]

    def to_dict(self) -> dict:
        return {"kind": "min", "of": [self.a.to_dict(), self.b.to_dict()]}


def min_gain(a: ChannelDistribution, b: ChannelDistribution) -> ChannelDistribution:
    """Distribution of the weaker of two independent gains."""
    if isinstance(a, Rayleigh) and isinstance(b, Rayleigh):
        # exponential rates add
        return Rayleigh(a.mean_gain * b.mean_gain / (a.mean_gain + b.mean_gain))
    if isinstance(a, PointMass) and isinstance(b, PointMass):
        return PointMass(min(a.gain, b.gain))
    return MinOf(a, b)


def distribution_from_dict(d: dict) -> ChannelDistribution:
    kind = d.get("kind", "rayleigh")
    if kind == "rayleigh":
        return Rayleigh(float(d["mean"]))
    if kind == "point":
        return PointMass(float(d["gain"]))
    if kind == "tabulated":
        return Tabulated(d["grid"], d["density"])
    if kind == "min":
        a, b = (distribution_from_dict(x) for x in d["of"])
        return min_gain(a, b)
    raise ValueError(f"unknown distribution kind {kind!r}")


@dataclass(frozen=True)
class ModeDistributions:
    """Per-mode gain laws built from the four independent link laws."""

    link1r: ChannelDistribution
    link2r: ChannelDistribution
    linkr1: ChannelDistribution
    linkr2: ChannelDistribution

    @classmethod
    def rayleigh(cls, g1r, g2r, gr1, gr2) -> "ModeDistributions":
        return cls(Rayleigh(g1r), Rayleigh(g2r), Rayleigh(gr1), Rayleigh(gr2))

    @classmethod
    def static(cls, gains: ChannelGains) -> "ModeDistributions":
        return cls(PointMass(gains.g1), PointMass(gains.g2), PointMass(gains.g4), PointMass(gains.g5))

    def __getitem__(self, mode: int) -> ChannelDistribution:
        if mode == 1:
            return self.link1r
        if mode == 2:
            return self.link2r
        if mode == 3:
            return min_gain(self.linkr1, self.linkr2)
        if mode == 4:
            return self.linkr1
        if mode == 5:
            return self.linkr2
        raise KeyError(mode)

    def sample_links(self, rng, size=None) -> np.ndarray:
        """Draw ``(g1r, g2r, gr1, gr2)``; shape ``(size, 4)`` or ``(4,)``."""
        cols = [d.sample(rng, size) for d in (self.link1r, self.link2r, self.linkr1, self.linkr2)]
        return np.stack(cols, axis=-1)

    def to_dict(self) -> dict:
        return {
            "g1r": self.link1r.to_dict(),
            "g2r": self.link2r.to_dict(),
            "gr1": self.linkr1.to_dict(),
            "gr2": self.linkr2.to_dict(),
        }


QUANTIZATIONS = ("dither", "floor")


def service_pmf(rate: float, quantization: str = "dither") -> dict[int, float]:
    """Packets served per slot by a mode running at ``rate``.

    ``floor`` serves ``floor(rate)`` packets. ``dither`` serves
    ``floor(rate) + 1`` with probability ``frac(rate)`` so the mean service
    equals ``rate`` exactly.
    """
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    if quantization == "floor":
        return {int(math.floor(rate + 1e-9)): 1.0}
    if quantization != "dither":
        raise ValueError(f"unknown quantization {quantization!r}")
    base = math.floor(rate)
    frac = rate - base
    if frac < 1e-12:
        return {int(base): 1.0}
    if frac > 1 - 1e-12:
        return {int(base) + 1: 1.0}
    return {int(base): 1.0 - frac, int(base) + 1: frac}
