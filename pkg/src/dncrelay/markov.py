"""Queue analysis of the random scheduling protocol.

Each slot the relay picks mode ``i`` with probability ``f_i``. The pair
(source queue, relay queue holding that source's packets) then evolves as a
two-dimensional Markov chain: ``(Q1, Qr2)`` is fed by mode 1 and drained by
modes 3 and 5, ``(Q2, Qr1)`` is fed by mode 2 and drained by modes 3 and 4.
State ``(i, j)`` is flattened to ``i * width + j`` with ``width = Nr + 1``.
Transitions leaving the truncation box are folded onto its boundary.

Within a slot, service acts on the backlog at the start of the slot and new
arrivals join afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse, stats
from scipy.sparse import csgraph
from scipy.sparse import linalg as splinalg

from .ergodic_opt import ErgodicSolution, rate_level_distribution
from .model import ArrivalRates, service_pmf
from .static_opt import StaticSolution

__all__ = [
    "ReducibleChainError",
    "QueueChain",
    "QueueMetrics",
    "arrival_pmf",
    "pmf_array",
    "build_static_chain",
    "build_fading_chain",
    "chain_from_pmfs",
    "stationary",
    "mean_queue_lengths",
    "analyze_pair",
    "actual_energy",
    "PAIRS",
]

log = logging.getLogger(__name__)

# (source mode, drain modes, idle modes) per queue pair, modes 1-based
PAIRS = {
    1: (1, (3, 5), (2, 4)),
    2: (2, (3, 4), (1, 5)),
}
ARRIVAL_TAIL = 1e-12
BOUNDARY_WARN = 1e-3
LEVEL_TAIL = 1e-15


class ReducibleChainError(ValueError):
    """The chain has more than one closed class; no unique stationary law."""


def arrival_pmf(lam: float, slot: float = 1.0, tail: float = ARRIVAL_TAIL) -> np.ndarray:
    """Poisson arrivals per slot, cut where the remaining mass drops below ``tail``.

    The cut-off mass is folded into the last entry so the vector sums to 1.
    """
    mu = lam * slot
    if mu < 0:
        raise ValueError("arrival rate must be nonnegative")
    if mu == 0:
        return np.array([1.0])
    last = int(stats.poisson.isf(tail, mu)) + 1
    a = stats.poisson.pmf(np.arange(last + 1), mu)
    a[-1] += stats.poisson.sf(last, mu)
    return a / a.sum()


def pmf_array(pmf) -> np.ndarray:
    """Dense array form of a ``{count: prob}`` mapping (arrays pass through)."""
    if isinstance(pmf, dict):
        out = np.zeros(max(pmf) + 1)
        for n, p in pmf.items():
            out[n] += p
        return out
    return np.asarray(pmf, dtype=float)


@dataclass
class QueueChain:
    P: sparse.csr_matrix
    n_source: int
    n_relay: int
    fractions: np.ndarray
    arrivals: np.ndarray
    source_service: np.ndarray
    drain_services: dict
    pair: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.n_relay + 1

    @property
    def n_states(self) -> int:
        return (self.n_source + 1) * self.width

    def index(self, i: int, j: int) -> int:
        return i * self.width + j


@dataclass
class QueueMetrics:
    pi: np.ndarray
    shape: tuple
    mean_source: float
    mean_relay: float
    boundary_mass: float
    residual: float
    method: str
    warnings: list = field(default_factory=list)

    @property
    def grid(self) -> np.ndarray:
        return self.pi.reshape(self.shape)

    @property
    def source_marginal(self) -> np.ndarray:
        return self.grid.sum(axis=1)

    @property
    def relay_marginal(self) -> np.ndarray:
        return self.grid.sum(axis=0)

    def to_dict(self) -> dict:
        return {
            "mean_source": self.mean_source,
            "mean_relay": self.mean_relay,
            "boundary_mass": self.boundary_mass,
            "residual": self.residual,
            "method": self.method,
            "truncation": [self.shape[0] - 1, self.shape[1] - 1],
            "source_marginal": self.source_marginal.tolist(),
            "relay_marginal": self.relay_marginal.tolist(),
            "warnings": list(self.warnings),
        }


class _Assembler:
    """Accumulates ``weight * a[i - base]`` entries into a sparse matrix."""

    def __init__(self, n_source, n_relay, arrivals):
        self.ns, self.nr = n_source, n_relay
        self.w = n_relay + 1
        self.a = arrivals
        self.rows, self.cols, self.vals = [], [], []

    def add(self, m, k, base, j, weight):
        m, k, base, j, weight = np.broadcast_arrays(m, k, base, j, weight)
        keep = weight > 0
        if not np.any(keep):
            return
        m, k, base, j, weight = m[keep], k[keep], base[keep], j[keep], weight[keep]
        J = np.arange(self.a.size)
        i = np.minimum(base[:, None] + J[None, :], self.ns)
        jj = np.minimum(j, self.nr)[:, None]
        self.rows.append(np.repeat(m * self.w + k, J.size))
        self.cols.append((i * self.w + jj).ravel())
        self.vals.append((weight[:, None] * self.a[None, :]).ravel())

    def matrix(self):
        n = (self.ns + 1) * self.w
        P = sparse.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=(n, n)
        )
        return P.tocsr()


def _grid(n_source, n_relay):
    m, k = np.meshgrid(np.arange(n_source + 1), np.arange(n_relay + 1), indexing="ij")
    return m.ravel(), k.ravel()


def _trunc(trunc):
    if isinstance(trunc, int):
        return trunc, trunc
    return int(trunc[0]), int(trunc[1])


def _class_chain(f_src, src_pmf, drains, f_idle, arrivals, n_source, n_relay):
    """Chain assembled per transition class with deterministic service counts.

    ``drains`` is a list of ``(probability, pmf)`` for the relay-draining
    modes. A random service count is handled by mixing deterministic
    counts.
    """
    A = _Assembler(n_source, n_relay, arrivals)
    M, K = _grid(n_source, n_relay)
    # class I: source sends up to s packets to the relay
    for s, w in enumerate(src_pmf):
        u = np.minimum(M, s)
        A.add(M, K, M - u, K + u, f_src * w)
    # classes II and IV: relay drains up to s packets
    for f_d, pmf in drains:
        for s, w in enumerate(pmf):
            A.add(M, K, M, np.maximum(K - s, 0), f_d * w)
    # class III: relay queue untouched
    A.add(M, K, M, K, f_idle)
    return A.matrix()


def _combined_chain(f_src, c, f3, r, f5, q, f_idle, arrivals, n_source, n_relay):
    """Chain assembled from the combined one-step law with random service.

    ``c``, ``r``, ``q`` are the packet-count pmfs of the feeding mode and the
    two draining modes, ``f_idle`` the total probability of modes that touch
    neither queue.
    """
    A = _Assembler(n_source, n_relay, arrivals)
    M, K = _grid(n_source, n_relay)
    c0 = c[0] if c.size else 1.0
    r0 = r[0] if r.size else 1.0
    q0 = q[0] if q.size else 1.0

    def tail(p, start):
        # P[count >= start] elementwise over start
        cum = np.concatenate([[0.0], np.cumsum(p)])
        return np.clip(1.0 - cum[np.minimum(start, p.size)], 0.0, 1.0)

    origin = (M == 0) & (K == 0)
    A.add(M[origin], K[origin], 0, 0, 1.0)

    sel = (M > 0) & (K == 0)
    A.add(M[sel], K[sel], M[sel], 0, 1.0 - f_src + f_src * c0)

    sel = K > 0
    Ms, Ks = M[sel], K[sel]
    for n in range(1, max(r.size, q.size)):
        part = Ks > n
        w = f3 * (r[n] if n < r.size else 0.0) + f5 * (q[n] if n < q.size else 0.0)
        A.add(Ms[part], Ks[part], Ms[part], Ks[part] - n, w)
    A.add(Ms, Ks, Ms, 0, f3 * tail(r, Ks) + f5 * tail(q, Ks))

    idle = f_idle + f3 * r0 + f5 * q0
    z = Ms == 0
    A.add(Ms[z], Ks[z], 0, Ks[z], idle + f_src)
    A.add(Ms[~z], Ks[~z], Ms[~z], Ks[~z], idle + f_src * c0)

    sel = M > 0
    Ms, Ks = M[sel], K[sel]
    for n in range(1, c.size):
        part = Ms > n
        A.add(Ms[part], Ks[part], Ms[part] - n, Ks[part] + n, f_src * c[n])
    A.add(Ms, Ks, 0, Ks + Ms, f_src * tail(c, Ms))
    return A.matrix()


def _pair_setup(fractions, pair):
    src, drains, idle = PAIRS[pair]
    f = np.asarray(fractions, dtype=float)
    return f[src - 1], [(m, f[m - 1]) for m in drains], float(sum(f[m - 1] for m in idle))


def _static_pmfs(solution: StaticSolution, quantization: str):
    return {m: pmf_array(service_pmf(float(solution.allocation.rates[m - 1]), quantization)) for m in range(1, 6)}


def chain_from_pmfs(fractions, pmfs, lam, trunc, pair=1, combined=False, slot=1.0) -> QueueChain:
    """Build a pair chain from mode fractions and per-mode service pmfs.

    ``combined`` selects the combined-law assembly instead of the per-class
    one; both describe the same chain.
    """
    n_source, n_relay = _trunc(trunc)
    f_src, drains, f_idle = _pair_setup(fractions, pair)
    src_mode = PAIRS[pair][0]
    a = arrival_pmf(lam, slot)
    src_pmf = pmf_array(pmfs[src_mode])
    drain_pmfs = {m: pmf_array(pmfs[m]) for m, _ in drains}
    if combined:
        (m3, f3), (m5, f5) = drains
        P = _combined_chain(f_src, src_pmf, f3, drain_pmfs[m3], f5, drain_pmfs[m5], f_idle, a, n_source, n_relay)
    else:
        P = _class_chain(f_src, src_pmf, [(fd, drain_pmfs[m]) for m, fd in drains], f_idle, a, n_source, n_relay)
    return QueueChain(
        P, n_source, n_relay, np.asarray(fractions, float), a, src_pmf, drain_pmfs, pair, {"lam": lam}
    )


def build_static_chain(
    solution: StaticSolution,
    rates: ArrivalRates | None = None,
    trunc=64,
    pair: int = 1,
    quantization: str = "dither",
    slot: float = 1.0,
) -> QueueChain:
    """Chain of queue pair ``pair`` under a static allocation.

    Arrivals use the actual rates (``rates`` or the solution's own), while
    service counts follow the designed per-mode rates.
    """
    rates = rates or solution.rates
    lam = rates.lam1 if pair == 1 else rates.lam2
    pmfs = _static_pmfs(solution, quantization)
    chain = chain_from_pmfs(solution.fractions, pmfs, lam, trunc, pair, combined=False, slot=slot)
    chain.meta.update(kind="static", quantization=quantization)
    return chain


def _trim(pmf, tail=LEVEL_TAIL):
    pmf = np.asarray(pmf, dtype=float)
    rest = np.cumsum(pmf[::-1])[::-1]
    keep = max(int(np.searchsorted(-rest, -tail, side="right")), 1)
    if keep >= pmf.size:
        return pmf
    out = pmf[:keep].copy()
    out[-1] += rest[keep]
    return out


def build_fading_chain(
    solution: ErgodicSolution,
    rates: ArrivalRates | None = None,
    trunc=64,
    pair: int = 1,
    quantization: str = "dither",
    slot: float = 1.0,
) -> QueueChain:
    """Chain of queue pair ``pair`` under a fading (water-filling) allocation.

    Per-slot service counts follow the rate-level distributions of the
    feeding and draining modes. Counts at or above the truncation depth are
    equivalent to emptying the queue, so they are lumped there. Counts whose
    combined tail mass is below ``LEVEL_TAIL`` are lumped into the last
    retained count to keep the matrix sparse.
    """
    rates = rates or solution.rates
    lam = rates.lam1 if pair == 1 else rates.lam2
    n_source, n_relay = _trunc(trunc)
    depth = max(n_source, n_relay) + 1
    pmfs = {}
    for m in range(1, 6):
        if solution.fractions[m - 1] > 0 and solution.betas[m - 1] > 0:
            pmfs[m] = _trim(rate_level_distribution(solution.betas[m - 1], solution.dists[m], depth, quantization))
        else:
            pmfs[m] = np.array([1.0])
    chain = chain_from_pmfs(solution.fractions, pmfs, lam, (n_source, n_relay), pair, combined=True, slot=slot)
    chain.meta.update(kind="fading", quantization=quantization)
    return chain


def _closed_classes(P) -> tuple[int, int]:
    """Number of closed communicating classes and one state in the first."""
    n_comp, labels = csgraph.connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaves = (labels[coo.row] != labels[coo.col]) & (coo.data > 0)
    open_ = np.zeros(n_comp, dtype=bool)
    open_[labels[coo.row[leaves]]] = True
    closed = np.flatnonzero(~open_)
    return int(closed.size), int(np.flatnonzero(labels == closed[0])[0])


def _residual(pi, P) -> float:
    return float(np.abs(P.T @ pi - pi).sum())


def _power_iteration(P, tol=1e-10, max_iter=10**6):
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    PT = P.T.tocsr()
    for it in range(max_iter):
        nxt = PT @ pi
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() <= tol and (it % 10 == 0 and _residual(nxt, P) <= tol):
            return nxt
        pi = nxt
    raise ArithmeticError(f"power iteration did not reach {tol:g} in {max_iter} steps")


def stationary_vector(P, method: str = "direct") -> np.ndarray:
    """Stationary row vector of a row-stochastic matrix.

    ``direct`` fixes one recurrent state at 1, solves the remaining balance
    equations sparsely and normalizes; ``inverse`` evaluates ``1 (I - P + ones)^-1`` on a
    dense matrix (small chains only), ``power`` iterates ``pi P``. The
    direct route falls back to power iteration if the solve is unusable.
    """
    P = sparse.csr_matrix(P)
    n = P.shape[0]
    n_closed, pivot = _closed_classes(P)
    if n_closed != 1:
        raise ReducibleChainError("chain has more than one closed class")
    if method == "inverse":
        if n > 400:
            raise ValueError("inverse method is limited to 400 states")
        D = P.toarray()
        return np.ones(n) @ linalg.inv(np.eye(n) - D + np.ones((n, n)))
    if method == "power":
        return _power_iteration(P)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    # pin a recurrent state to 1 and solve the remaining balance equations
    A = (P.T - sparse.identity(n, format="csr")).tocsc()
    rest = np.delete(np.arange(n), pivot)
    pi = np.zeros(n)
    pi[pivot] = 1.0
    if n > 1:
        with np.errstate(all="ignore"):
            sub = A[rest][:, rest].tocsc()
            pi[rest] = splinalg.spsolve(sub, -A[rest][:, [pivot]].toarray().ravel(), permc_spec="MMD_AT_PLUS_A")
        pi /= pi.sum()
    if not np.all(np.isfinite(pi)) or _residual(pi, P) > 1e-8 or pi.min() < -1e-10:
        log.warning("direct stationary solve unusable; falling back to power iteration")
        return _power_iteration(P)
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def stationary(chain: QueueChain, method: str = "direct") -> QueueMetrics:
    """Stationary law of a pair chain with queue-length summaries."""
    pi = stationary_vector(chain.P, method)
    shape = (chain.n_source + 1, chain.n_relay + 1)
    grid = pi.reshape(shape)
    edge = grid[max(shape[0] - 2, 0) :, :].sum() + grid[: max(shape[0] - 2, 0), max(shape[1] - 2, 0) :].sum()
    metrics = QueueMetrics(
        pi, shape, 0.0, 0.0, float(edge), _residual(pi, chain.P), method
    )
    metrics.mean_source, metrics.mean_relay = mean_queue_lengths(metrics, chain)
    if edge > BOUNDARY_WARN:
        metrics.warnings.append(
            f"boundary mass {edge:.3g} exceeds {BOUNDARY_WARN:g}; truncation {shape[0] - 1}x{shape[1] - 1} too small"
        )
    return metrics


def mean_queue_lengths(metrics: QueueMetrics, chain: QueueChain | None = None) -> tuple[float, float]:
    """Mean source and relay queue lengths under ``metrics.pi``."""
    grid = metrics.grid
    i = np.arange(grid.shape[0])
    j = np.arange(grid.shape[1])
    return float(i @ grid.sum(axis=1)), float(j @ grid.sum(axis=0))


def analyze_pair(
    solution,
    rates: ArrivalRates | None = None,
    pair: int = 1,
    trunc=64,
    quantization: str = "dither",
    auto: bool = True,
    target: float = 1e-6,
    max_trunc: int = 128,
):
    """Build and solve a pair chain, doubling the truncation as needed.

    Stops once the boundary mass is below ``target`` or the truncation
    reaches ``max_trunc``. Returns ``(chain, metrics)``.
    """
    build = build_fading_chain if isinstance(solution, ErgodicSolution) else build_static_chain
    n_source, n_relay = _trunc(trunc)
    while True:
        chain = build(solution, rates, (n_source, n_relay), pair, quantization)
        metrics = stationary(chain)
        if not auto or metrics.boundary_mass < target or max(n_source, n_relay) >= max_trunc:
            return chain, metrics
        n_source, n_relay = min(2 * n_source, max_trunc), min(2 * n_relay, max_trunc)


def _mode_energy(counts: np.ndarray, pmf: np.ndarray, full_power: float, gain: float) -> np.ndarray:
    """Expected energy of a slot in which the mode faces each backlog in ``counts``.

    Serving ``s`` packets from backlog ``x``: nothing if ``x == 0``, the
    design power when ``x >= s`` and ``(2**x - 1) / g`` otherwise.
    """
    counts = np.asarray(counts)
    s = np.arange(pmf.size)
    partial = np.expm1(counts * math.log(2.0)) / gain
    full = counts[:, None] >= s[None, :]
    e = np.where(full, full_power, partial[:, None]) @ pmf
    return np.where(counts == 0, 0.0, e)


def actual_energy(
    metrics1: QueueMetrics,
    metrics2: QueueMetrics,
    solution: StaticSolution,
    quantization: str = "dither",
) -> dict:
    """Long-run energy per slot of the protocol under a static allocation.

    ``metrics1`` is the law of ``(Q1, Qr2)`` and ``metrics2`` that of
    ``(Q2, Qr1)``. The coded broadcast is charged on the larger of the two
    relay backlogs, taking the relay queues as independent.
    """
    f = solution.fractions
    P = solution.allocation.powers
    g = solution.gains.as_array()
    pmfs = _static_pmfs(solution, quantization)
    q1, r2 = metrics1.source_marginal, metrics1.relay_marginal
    q2, r1 = metrics2.source_marginal, metrics2.relay_marginal

    def expect(marg, mode):
        e = _mode_energy(np.arange(marg.size), pmfs[mode], P[mode - 1], g[mode - 1])
        return float(marg @ e)

    per_mode = np.zeros(5)
    per_mode[0] = expect(q1, 1)
    per_mode[1] = expect(q2, 2)
    per_mode[3] = expect(r1, 4)
    per_mode[4] = expect(r2, 5)
    # max of independent relay backlogs
    c1 = np.cumsum(r1)
    c2 = np.cumsum(r2)
    n = max(c1.size, c2.size)
    c1 = np.concatenate([c1, np.ones(n - c1.size)])
    c2 = np.concatenate([c2, np.ones(n - c2.size)])
    cmax = c1 * c2
    pmax = np.diff(np.concatenate([[0.0], cmax]))
    per_mode[2] = expect(pmax, 3)
    total = float(f @ per_mode)
    return {
        "total": total,
        "per_mode": per_mode.tolist(),
        "design": solution.total_energy,
    }
