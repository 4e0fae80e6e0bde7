"""Scenario files and solution (de)serialization.

A scenario is a small JSON document::

    {
      "name": "unit",
      "channel": "static",                 # or "rayleigh"
      "gains": {"g1r": 1, "g2r": 1, "gr1": 1, "gr2": 1},
      "links": null,                       # optional per-link laws for fading
      "snr_gap": 1.0,
      "arrivals": {"lambda1": 1.5, "lambda2": 1.0, "eps": 0.0},
      "conventional": false,
      "quantization": "dither",
      "trunc": 64,
      "slots": 1000000,
      "seed": 0
    }

For ``"channel": "rayleigh"`` the ``gains`` block holds mean gains. A
``links`` block (keys ``g1r``, ``g2r``, ``gr1``, ``gr2``, each a
distribution dict such as ``{"kind": "tabulated", "grid": [...],
"density": [...]}``) overrides it for other fading laws.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ergodic_opt import ErgodicSolution, solve_ergodic
from .model import (
    QUANTIZATIONS,
    Allocation,
    ArrivalRates,
    ChannelGains,
    ModeDistributions,
    distribution_from_dict,
)
from .static_opt import StaticSolution, solve_conventional, solve_static

__all__ = ["Scenario", "solution_from_dict", "load_json", "dump_json"]

LINKS = ("g1r", "g2r", "gr1", "gr2")


def _unit_gains():
    return {k: 1.0 for k in LINKS}


def _default_arrivals():
    return {"lambda1": 1.5, "lambda2": 1.0, "eps": 0.0}


@dataclass
class Scenario:
    name: str = "scenario"
    channel: str = "static"
    gains: dict = field(default_factory=_unit_gains)
    links: dict | None = None
    snr_gap: float = 1.0
    arrivals: dict = field(default_factory=_default_arrivals)
    conventional: bool = False
    quantization: str = "dither"
    trunc: int = 64
    slots: int = 10**6
    seed: int = 0

    def __post_init__(self):
        if self.channel not in ("static", "rayleigh"):
            raise ValueError(f"channel must be 'static' or 'rayleigh', got {self.channel!r}")
        if self.quantization not in QUANTIZATIONS:
            raise ValueError(f"quantization must be one of {QUANTIZATIONS}")
        missing = [k for k in LINKS if k not in self.gains]
        if missing and self.links is None:
            raise ValueError(f"gains block is missing {missing}")
        for k in ("lambda1", "lambda2"):
            if k not in self.arrivals:
                raise ValueError(f"arrivals block is missing {k!r}")
        self.rates  # validates values

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(load_json(path))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "Scenario":
        """Copy with top-level fields or ``lambda1``/``lambda2``/``eps`` replaced."""
        arr = dict(self.arrivals)
        for k in ("lambda1", "lambda2", "eps"):
            if k in changes:
                arr[k] = changes.pop(k)
        return replace(self, arrivals=arr, **changes)

    @property
    def rates(self) -> ArrivalRates:
        a = self.arrivals
        return ArrivalRates(float(a["lambda1"]), float(a["lambda2"]), float(a.get("eps", 0.0)))

    @property
    def channel_gains(self) -> ChannelGains:
        g = self.gains
        return ChannelGains.from_links(g["g1r"], g["g2r"], g["gr1"], g["gr2"], self.snr_gap)

    @property
    def distributions(self) -> ModeDistributions:
        if self.links is not None:
            return ModeDistributions(*(distribution_from_dict(self.links[k]) for k in LINKS))
        g = self.channel_gains
        return ModeDistributions.rayleigh(g.g1, g.g2, g.g4, g.g5)

    @property
    def fading(self) -> bool:
        return self.channel == "rayleigh"

    def solve(self, conventional: bool | None = None):
        conventional = self.conventional if conventional is None else conventional
        if self.fading:
            return solve_ergodic(self.distributions, self.rates, conventional=conventional)
        solver = solve_conventional if conventional else solve_static
        return solver(self.channel_gains, self.rates)


def _modes_dist_from_dict(d: dict) -> ModeDistributions:
    return ModeDistributions(*(distribution_from_dict(d[k]) for k in LINKS))


def solution_from_dict(d: dict):
    """Rebuild a solution from its ``to_dict`` form."""
    kind = d.get("kind")
    arr = d["arrivals"]
    rates = ArrivalRates(arr["lambda1"], arr["lambda2"], arr.get("eps", 0.0))
    if kind == "static":
        g = d["gains"]
        gains = ChannelGains(g["g1r"], g["g2r"], g["gr1"], g["gr2"])
        alloc = Allocation(
            np.asarray(d["fractions"], float),
            np.asarray(d["rates"], float),
            np.asarray(d["powers"], float),
            {"beta": d["beta"]},
        )
        return StaticSolution(
            alloc,
            {int(k): v for k, v in d.get("kkt_residuals", {}).items()},
            tuple(d["active_modes"]),
            float(d["beta"]),
            np.asarray(d["loads"], float),
            gains,
            rates,
            bool(d.get("conventional", False)),
        )
    if kind == "ergodic":
        return ErgodicSolution(
            np.asarray(d["fractions"], float),
            np.asarray(d["betas"], float),
            float(d["gamma"]),
            np.asarray(d["avg_rates"], float),
            np.asarray(d["avg_powers"], float),
            np.asarray(d["loads"], float),
            _modes_dist_from_dict(d["distributions"]),
            rates,
            bool(d.get("conventional", False)),
        )
    raise ValueError(f"unknown solution kind {kind!r}")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
