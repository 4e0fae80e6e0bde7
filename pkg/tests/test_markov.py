import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse

from dncrelay.ergodic_opt import solve_ergodic
from dncrelay.markov import (
    QueueMetrics,
    ReducibleChainError,
    actual_energy,
    analyze_pair,
    arrival_pmf,
    build_fading_chain,
    build_static_chain,
    chain_from_pmfs,
    mean_queue_lengths,
    pmf_array,
    stationary,
    stationary_vector,
)
from dncrelay.model import ArrivalRates, ChannelGains, ModeDistributions, service_pmf
from dncrelay.static_opt import solve_static

UNIT = ChannelGains.uniform(1.0)


def metrics_at(shape, cells):
    pi = np.zeros(shape)
    for (i, j), p in cells.items():
        pi[i, j] = p
    return QueueMetrics(pi.ravel(), shape, 0.0, 0.0, 0.0, 0.0, "given")


def static_pmfs(sol, quantization="dither"):
    return {m: pmf_array(service_pmf(float(sol.allocation.rates[m - 1]), quantization)) for m in range(1, 6)}


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 4.0])
def test_arrival_pmf_folds_tail(lam):
    a = arrival_pmf(lam)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(a >= 0)
    assert a @ np.arange(a.size) == pytest.approx(lam, abs=1e-9)


def test_arrival_pmf_rejects_negative():
    with pytest.raises(ValueError):
        arrival_pmf(-0.1)


@given(
    st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5),
    st.lists(st.floats(0.0, 6.0), min_size=5, max_size=5),
    st.floats(0.0, 2.0),
    st.integers(1, 2),
    st.booleans(),
)
def test_rows_are_stochastic(weights, rates, lam, pair, combined):
    f = np.array(weights) / sum(weights)
    pmfs = {m: pmf_array(service_pmf(rates[m - 1])) for m in range(1, 6)}
    chain = chain_from_pmfs(f, pmfs, lam, (7, 9), pair, combined=combined)
    rows = np.asarray(chain.P.sum(axis=1)).ravel()
    np.testing.assert_allclose(rows, 1.0, atol=1e-12)
    assert chain.P.shape == (8 * 10, 8 * 10)


def test_no_arrivals_empties_everything():
    f = np.array([0.3, 0.2, 0.2, 0.1, 0.2])
    pmfs = {m: np.array([0.0, 1.0]) for m in range(1, 6)}
    chain = chain_from_pmfs(f, pmfs, 0.0, 6, pair=1)
    m = stationary(chain)
    assert m.grid[0, 0] == pytest.approx(1.0)
    assert mean_queue_lengths(m) == pytest.approx((0.0, 0.0), abs=1e-12)


def test_source_only_chain_first_branch():
    # only mode 1, one packet per slot: from (0, k) the relay queue stays put
    f = np.array([1.0, 0, 0, 0, 0])
    pmfs = {m: np.array([0.0, 1.0]) for m in range(1, 6)}
    lam = 0.4
    chain = chain_from_pmfs(f, pmfs, lam, (6, 6), pair=1)
    a = arrival_pmf(lam)
    k = 3
    row = chain.P.getrow(chain.index(0, k)).toarray().ravel()
    for i in range(3):
        assert row[chain.index(i, k)] == pytest.approx(a[i], abs=1e-15)
    # from (m, k) with m >= 1 one packet moves to the relay
    row = chain.P.getrow(chain.index(2, k)).toarray().ravel()
    assert row[chain.index(1, k + 1)] == pytest.approx(a[0], abs=1e-15)


@pytest.mark.parametrize("quantization", ["dither", "floor"])
@pytest.mark.parametrize("pair", [1, 2])
def test_combined_law_reduces_to_class_law(quantization, pair):
    for lam1, lam2 in [(0.5, 1.0), (1.2, 0.4), (0.8, 0.8)]:
        rates = ArrivalRates(lam1, lam2, 0.3)
        sol = solve_static(ChannelGains(1.0, 2.0, 1.5, 0.7), rates)
        pmfs = static_pmfs(sol, quantization)
        lam = lam1 if pair == 1 else lam2
        a = chain_from_pmfs(sol.fractions, pmfs, lam, (12, 15), pair, combined=False).P
        b = chain_from_pmfs(sol.fractions, pmfs, lam, (12, 15), pair, combined=True).P
        assert abs(a - b).max() <= 1e-12


def test_fading_builder_with_point_masses_tracks_static():
    gains = ChannelGains(1.0, 2.0, 1.0, 2.0)
    rates = ArrivalRates(0.5, 1.0, 0.5)
    st_ = solve_static(gains, rates)
    erg = solve_ergodic(ModeDistributions.static(gains), rates)
    a = build_static_chain(st_, rates, 10, 1).P
    b = build_fading_chain(erg, rates, 10, 1).P
    # the two solvers agree to ~1e-10 on the rates, hence on the dither weights
    assert abs(a - b).max() <= 1e-8


def test_zero_service_relay_piles_up():
    f = np.array([0.4, 0.2, 0.2, 0.1, 0.1])
    pmfs = {1: np.array([0.0, 1.0]), 2: np.array([1.0]), 3: np.array([1.0]), 4: np.array([1.0]), 5: np.array([1.0])}
    means = []
    for n in (8, 16):
        m = stationary(chain_from_pmfs(f, pmfs, 0.3, n, 1, combined=True))
        means.append(m.mean_relay)
        assert m.mean_relay > n - 1
        assert m.warnings
    assert means[1] > means[0]


def test_two_state_chain():
    pi = stationary_vector(np.array([[0.5, 0.5], [0.5, 0.5]]))
    np.testing.assert_allclose(pi, [0.5, 0.5], atol=1e-15)


def test_identity_chain_is_reducible():
    with pytest.raises(ReducibleChainError):
        stationary_vector(sparse.identity(5, format="csr"))


@pytest.mark.parametrize("seed", range(5))
def test_random_chain_methods_agree(seed):
    rng = np.random.default_rng(seed)
    P = rng.random((50, 50)) * (rng.random((50, 50)) < 0.2)
    P += np.eye(50, k=1) + np.eye(50, k=-49)  # a cycle keeps it irreducible
    P /= P.sum(axis=1, keepdims=True)
    d = stationary_vector(P, "direct")
    np.testing.assert_allclose(stationary_vector(P, "inverse"), d, atol=1e-8)
    np.testing.assert_allclose(stationary_vector(P, "power"), d, atol=1e-8)
    assert np.abs(d @ P - d).sum() <= 1e-8


def test_inverse_method_limited_to_small_chains():
    P = sparse.random(401, 401, density=0.01, random_state=0, format="csr") + sparse.eye(401, k=1) + sparse.eye(401, k=-400)
    P = sparse.diags(1 / np.asarray(P.sum(axis=1)).ravel()) @ P
    with pytest.raises(ValueError):
        stationary_vector(P, "inverse")
    with pytest.raises(ValueError):
        stationary_vector(P, "newton")


def test_mean_queue_lengths_examples():
    assert mean_queue_lengths(metrics_at((3, 3), {(0, 0): 1.0})) == (0.0, 0.0)
    assert mean_queue_lengths(metrics_at((3, 3), {(1, 0): 0.5, (0, 2): 0.5})) == pytest.approx((0.5, 1.0))


def test_stationary_metrics_invariants():
    rates = ArrivalRates(0.5, 1.0, 0.5)
    sol = solve_static(UNIT, rates)
    for pair in (1, 2):
        chain = build_static_chain(sol, rates, 30, pair)
        m = stationary(chain)
        assert m.pi.min() >= 0
        assert m.pi.sum() == pytest.approx(1.0, abs=1e-10)
        assert m.residual <= 1e-8
        assert m.to_dict()["truncation"] == [30, 30]


def test_small_truncation_warns():
    rates = ArrivalRates(0.5, 1.0, 0.1)
    m = stationary(build_static_chain(solve_static(UNIT, rates), rates, 4, 1))
    assert m.boundary_mass > 1e-3
    assert m.warnings


def test_auto_truncation_doubles():
    rates = ArrivalRates(0.5, 1.0, 0.3)
    chain, m = analyze_pair(solve_static(UNIT, rates), rates, 1, trunc=8, target=1e-6)
    assert chain.n_source > 8
    assert m.boundary_mass < 1e-6


def test_actual_energy_all_empty_is_zero():
    sol = solve_static(UNIT, ArrivalRates(0.5, 1.0, 0.5))
    empty = metrics_at((10, 10), {(0, 0): 1.0})
    assert actual_energy(empty, empty, sol)["total"] == 0.0


@pytest.mark.parametrize("quantization", ["dither", "floor"])
def test_actual_energy_saturated_equals_design(quantization):
    sol = solve_static(UNIT, ArrivalRates(0.5, 1.0, 0.0))
    full = metrics_at((10, 10), {(9, 9): 1.0})
    e = actual_energy(full, full, sol, quantization)
    assert e["total"] == pytest.approx(sol.total_energy, rel=1e-12)
    assert e["design"] == sol.total_energy


def test_actual_energy_below_design():
    rates = ArrivalRates(0.5, 1.0, 0.5)
    sol = solve_static(ChannelGains(1.0, 2.0, 1.0, 2.0), rates)
    _, m1 = analyze_pair(sol, rates, 1, trunc=32, auto=False)
    _, m2 = analyze_pair(sol, rates, 2, trunc=32, auto=False)
    e = actual_energy(m1, m2, sol)
    assert 0 < e["total"] < e["design"]
    assert len(e["per_mode"]) == 5


def test_fading_chain_rows_and_levels():
    rates = ArrivalRates(0.5, 1.0, 0.5)
    sol = solve_ergodic(ModeDistributions.rayleigh(1.0, 1.0, 1.0, 1.0), rates)
    for pair in (1, 2):
        chain = build_fading_chain(sol, rates, 12, pair)
        np.testing.assert_allclose(np.asarray(chain.P.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert chain.meta["kind"] == "fading"
        assert chain.source_service.sum() == pytest.approx(1.0)


def test_critical_load_does_not_converge():
    # with no back-off the source queue is critically loaded: its mean tracks the truncation
    rates = ArrivalRates(0.5, 1.0, 0.0)
    sol = solve_static(UNIT, rates)
    _, small = analyze_pair(sol, rates, 1, trunc=16, auto=False)
    _, big = analyze_pair(sol, rates, 1, trunc=32, auto=False)
    assert big.mean_source > 1.8 * small.mean_source
    assert big.boundary_mass > 1e-2
    backed_off = ArrivalRates(0.5, 1.0, 0.5)
    _, m = analyze_pair(solve_static(UNIT, backed_off), backed_off, 1, trunc=64, auto=False)
    assert m.boundary_mass < 1e-4
