"""Slot-level Monte-Carlo simulation of the random scheduling protocol.

Per slot the relay draws a mode with probability ``f_i``. Sources and relay
then transmit according to their backlogs, after which new packets arrive.
Queues are unbounded integers. Randomness comes from independent substreams
(mode choice, arrivals at each source, rate dithering, channel draws) of one
seeded generator, so changing one purpose never shifts another.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ergodic_opt import ErgodicSolution, waterfill_power, waterfill_rate
from .markov import arrival_pmf
from .model import QUANTIZATIONS, ArrivalRates
from .static_opt import StaticSolution

__all__ = ["SimConfig", "SimReport", "UnstableError", "run_eersp", "STREAMS"]

STREAMS = ("mode", "arrivals1", "arrivals2", "dither", "channel")
CHUNK = 1 << 16
TRACE_EVERY = 1000


class UnstableError(RuntimeError):
    """A queue crossed the guard; ``report`` holds the partial run."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class SimConfig:
    solution: StaticSolution | ErgodicSolution
    rates: ArrivalRates | None = None
    slots: int = 10**6
    seed: int = 0
    quantization: str = "dither"
    fallback_gain: str = "coded"
    guard: int = 10**6
    slot: float = 1.0
    trace_every: int = TRACE_EVERY

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("slot count must be at least 1")
        if self.quantization not in QUANTIZATIONS:
            raise ValueError(f"quantization must be one of {QUANTIZATIONS}")
        if self.fallback_gain not in ("receiver", "coded"):
            raise ValueError("fallback_gain must be 'receiver' or 'coded'")
        f = np.asarray(self.solution.fractions, dtype=float)
        if abs(f.sum() - 1.0) > 1e-9 or np.any(f < 0):
            raise ValueError("mode fractions must be a probability vector")
        if self.rates is None:
            self.rates = self.solution.rates

    @property
    def fading(self) -> bool:
        return isinstance(self.solution, ErgodicSolution)


@dataclass
class SimReport:
    slots: int
    mean_q1: float
    mean_q2: float
    mean_r1: float
    mean_r2: float
    energy_per_slot: float
    selections: list
    idle: list
    max_queues: list
    arrivals: list
    delivered: list
    final_queues: list
    seed: int
    completed: bool = True
    trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean_queues(self) -> dict:
        return {"Q1": self.mean_q1, "Q2": self.mean_q2, "Qr1": self.mean_r1, "Qr2": self.mean_r2}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        return d

    TRACE_COLUMNS = ("slot", "Q1", "Q2", "Qr1", "Qr2", "energy")


def _inverse_cdf(u, pmf):
    return np.searchsorted(np.cumsum(pmf)[:-1], u, side="right")


def _dither(rate, u, quantization):
    base = np.floor(rate + 1e-9)
    if quantization == "floor":
        return base.astype(np.int64)
    frac = np.clip(rate - base, 0.0, 1.0)
    return (base + (u < frac)).astype(np.int64)


class _Draws:
    """Chunked per-slot random inputs, one generator per purpose."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        children = np.random.SeedSequence(cfg.seed).spawn(len(STREAMS))
        self.gen = {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}
        self.cum_f = np.cumsum(np.asarray(cfg.solution.fractions, dtype=float))
        self.a1 = arrival_pmf(cfg.rates.lam1, cfg.slot)
        self.a2 = arrival_pmf(cfg.rates.lam2, cfg.slot)
        sol = cfg.solution
        if cfg.fading:
            self.betas = np.asarray(sol.betas, dtype=float)
        else:
            self.rates = np.asarray(sol.allocation.rates, dtype=float)
            self.powers = np.asarray(sol.allocation.powers, dtype=float)
            self.gains = sol.gains.as_array()

    def chunk(self, n):
        g = self.gen
        mode = np.minimum(np.searchsorted(self.cum_f, g["mode"].random(n), side="right"), 4)
        a1 = _inverse_cdf(g["arrivals1"].random(n), self.a1)
        a2 = _inverse_cdf(g["arrivals2"].random(n), self.a2)
        u = g["dither"].random(n)
        if self.cfg.fading:
            links = self.cfg.solution.dists.sample_links(g["channel"], n)
            g1, g2, g4, g5 = links.T
            gain = np.choose(mode, [g1, g2, np.minimum(g4, g5), g4, g5])
            beta = self.betas[mode]
            rate = np.where(beta > 0, waterfill_rate(gain, beta), 0.0)
            full = np.where(beta > 0, waterfill_power(gain, beta), 0.0)
        else:
            gain = self.gains[mode]
            rate = self.rates[mode]
            full = self.powers[mode]
            g4 = np.full(n, self.gains[3])
            g5 = np.full(n, self.gains[4])
        cap = _dither(rate, u, self.cfg.quantization)
        return mode, a1, a2, cap, gain, full, g4, g5


def run_eersp(config: SimConfig) -> SimReport:
    """Simulate ``config.slots`` slots and return time averages and counters.

    Queue lengths are recorded at slot ends, after arrivals. Raises
    ``UnstableError`` when any queue exceeds ``config.guard``.
    """
    cfg = config
    draws = _Draws(cfg)
    coded_fallback = cfg.fallback_gain == "coded"
    pow2 = [math.expm1(k * math.log(2.0)) for k in range(64)]

    def partial(q):
        return pow2[q] if q < 64 else math.expm1(q * math.log(2.0))

    q1 = q2 = r1 = r2 = 0
    s_q1 = s_q2 = s_r1 = s_r2 = 0
    energy = 0.0
    sel = [0] * 5
    idle = [0] * 5
    mx = [0, 0, 0, 0]
    arr = [0, 0]
    dlv = [0, 0]
    trace = []
    blk = [0, 0, 0, 0]
    blk_e = 0.0
    t = 0
    done = 0
    unstable = None
    while done < cfg.slots and unstable is None:
        n = min(CHUNK, cfg.slots - done)
        mode, a1, a2, cap, gain, full, g4, g5 = (x.tolist() for x in draws.chunk(n))
        for k in range(n):
            m = mode[k]
            s = cap[k]
            e = 0.0
            sel[m] += 1
            if m == 0:
                if q1:
                    e = full[k] if q1 >= s else partial(q1) / gain[k]
                    u = q1 if q1 < s else s
                    q1 -= u
                    r2 += u
                else:
                    idle[0] += 1
            elif m == 1:
                if q2:
                    e = full[k] if q2 >= s else partial(q2) / gain[k]
                    u = q2 if q2 < s else s
                    q2 -= u
                    r1 += u
                else:
                    idle[1] += 1
            elif m == 2:
                if r1 or r2:
                    top = r1 if r1 > r2 else r2
                    if top >= s:
                        e = full[k]
                    else:
                        e = partial(top) / gain[k]
                    if not coded_fallback and not (r1 and r2):
                        # one-way forwarding on the receiver's own link
                        e *= gain[k] / (g5[k] if r2 else g4[k])
                    u = r1 if r1 < s else s
                    r1 -= u
                    dlv[1] += u
                    u = r2 if r2 < s else s
                    r2 -= u
                    dlv[0] += u
                else:
                    idle[2] += 1
            elif m == 3:
                if r1:
                    e = full[k] if r1 >= s else partial(r1) / gain[k]
                    u = r1 if r1 < s else s
                    r1 -= u
                    dlv[1] += u
                else:
                    idle[3] += 1
            else:
                if r2:
                    e = full[k] if r2 >= s else partial(r2) / gain[k]
                    u = r2 if r2 < s else s
                    r2 -= u
                    dlv[0] += u
                else:
                    idle[4] += 1
            q1 += a1[k]
            q2 += a2[k]
            arr[0] += a1[k]
            arr[1] += a2[k]
            energy += e
            blk_e += e
            s_q1 += q1
            s_q2 += q2
            s_r1 += r1
            s_r2 += r2
            blk[0] += q1
            blk[1] += q2
            blk[2] += r1
            blk[3] += r2
            if q1 > mx[0]:
                mx[0] = q1
            if q2 > mx[1]:
                mx[1] = q2
            if r1 > mx[2]:
                mx[2] = r1
            if r2 > mx[3]:
                mx[3] = r2
            t += 1
            if t % cfg.trace_every == 0:
                w = cfg.trace_every
                trace.append((t, blk[0] / w, blk[1] / w, blk[2] / w, blk[3] / w, blk_e / w))
                blk = [0, 0, 0, 0]
                blk_e = 0.0
            if q1 > cfg.guard or q2 > cfg.guard or r1 > cfg.guard or r2 > cfg.guard:
                unstable = t
                break
        done += n
    report = SimReport(
        slots=t,
        mean_q1=s_q1 / t,
        mean_q2=s_q2 / t,
        mean_r1=s_r1 / t,
        mean_r2=s_r2 / t,
        energy_per_slot=energy / t,
        selections=sel,
        idle=idle,
        max_queues=mx,
        arrivals=arr,
        delivered=dlv,
        final_queues=[q1, q2, r1, r2],
        seed=cfg.seed,
        completed=unstable is None,
        trace=np.array(trace, dtype=float).reshape(-1, 6),
    )
    if unstable is not None:
        raise UnstableError(f"queue exceeded guard {cfg.guard} at slot {unstable}", report)
    return report
