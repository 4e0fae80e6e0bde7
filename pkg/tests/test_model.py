import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dncrelay.model import (
    ArrivalRates,
    ChannelGains,
    MinOf,
    ModeDistributions,
    PointMass,
    Rayleigh,
    Tabulated,
    distribution_from_dict,
    min_gain,
    mode_loads,
    power_for_rate,
    service_pmf,
    virtual_rates,
)

pos = st.floats(0.05, 10.0)
rate = st.floats(0.0, 12.0)


@pytest.mark.parametrize("r, g, expected", [(0.0, 1.0, 0.0), (1.0, 1.0, 1.0), (2.0, 0.5, 6.0)])
def test_power_for_rate_examples(r, g, expected):
    assert power_for_rate(r, g) == pytest.approx(expected, abs=1e-12)


def test_power_for_rate_rejects_nonpositive_gain():
    with pytest.raises(ValueError):
        power_for_rate(1.0, 0.0)


@given(rate, rate, pos)
def test_power_increasing_in_rate(r1, r2, g):
    lo, hi = sorted((r1, r2))
    if hi - lo > 1e-9:
        assert power_for_rate(hi, g) > power_for_rate(lo, g)


@given(rate, rate, pos)
def test_power_convex_in_rate(r1, r2, g):
    mid = power_for_rate(0.5 * (r1 + r2), g)
    chord = 0.5 * (power_for_rate(r1, g) + power_for_rate(r2, g))
    assert mid <= chord * (1 + 1e-12) + 1e-12


@given(st.floats(0.01, 12.0), pos, pos)
def test_power_decreasing_in_gain(r, g1, g2):
    lo, hi = sorted((g1, g2))
    if hi - lo > 1e-9:
        assert power_for_rate(r, hi) < power_for_rate(r, lo)


@pytest.mark.parametrize(
    "l1, l2, expected", [((1, 1), None, (1, 0, 0)), ((0.5, 1), None, (0.5, 0.5, 0)), ((2, 0.5), None, (0.5, 0, 1.5))]
)
def test_virtual_rates_examples(l1, l2, expected):
    assert virtual_rates(*l1) == pytest.approx(expected)


@given(st.floats(0, 5), st.floats(0, 5))
def test_virtual_rates_swap_symmetry(a, b):
    l3, l4, l5 = virtual_rates(a, b)
    m3, m4, m5 = virtual_rates(b, a)
    assert (l3, l4, l5) == pytest.approx((m3, m5, m4))


def test_mode_loads():
    assert mode_loads(1.5, 1.0).tolist() == pytest.approx([1.5, 1.0, 1.0, 0.0, 0.5])
    assert mode_loads(1.5, 1.0, conventional=True).tolist() == pytest.approx([1.5, 1.0, 0.0, 1.0, 1.5])


def test_channel_gains():
    g = ChannelGains.from_links(2.0, 4.0, 1.0, 3.0, snr_gap=2.0)
    assert (g.g1, g.g2, g.g4, g.g5) == (1.0, 2.0, 0.5, 1.5)
    assert g.g3 == 0.5
    assert g[3] == 0.5
    assert g.as_array().tolist() == [1.0, 2.0, 0.5, 0.5, 1.5]
    assert g.to_dict() == {"g1r": 1.0, "g2r": 2.0, "gr1": 0.5, "gr2": 1.5}
    with pytest.raises(ValueError):
        ChannelGains(1.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ChannelGains.from_links(1, 1, 1, 1, snr_gap=0)


def test_arrival_rates():
    r = ArrivalRates(0.5, 1.0, eps=0.5)
    assert r.design == pytest.approx((0.75, 1.5))
    assert r.loads().tolist() == pytest.approx([0.75, 1.5, 0.75, 0.75, 0.0])
    with pytest.raises(ValueError):
        ArrivalRates(-1.0, 1.0)
    with pytest.raises(ValueError):
        ArrivalRates(1.0, 1.0, eps=-0.1)


def test_rayleigh_law():
    d = Rayleigh(2.0)
    assert d.mean == 2.0
    assert d.sf(2.0) == pytest.approx(math.exp(-1))
    assert d.cdf(0.0) == 0.0
    x = d.sample(np.random.default_rng(0), 200_000)
    assert x.mean() == pytest.approx(2.0, rel=0.01)
    assert d.sf(d.upper(1e-12)) <= 1e-12 * 1.0001


def test_min_of_rayleigh_is_rayleigh():
    m = min_gain(Rayleigh(1.0), Rayleigh(1.0))
    assert isinstance(m, Rayleigh)
    assert m.mean_gain == pytest.approx(0.5)
    mixed = min_gain(Rayleigh(1.0), PointMass(0.7))
    assert isinstance(mixed, MinOf)
    assert mixed.sf(0.5) == pytest.approx(math.exp(-0.5))
    assert mixed.sf(0.8) == 0.0


def test_tabulated_normalizes():
    grid = np.linspace(0, 20, 2001)
    t = Tabulated(grid, 3 * np.exp(-grid))
    assert t.cdf(20.0) == pytest.approx(1.0)
    assert t.sf(1.0) == pytest.approx(math.exp(-1), rel=1e-3)
    assert t.mean == pytest.approx(1.0, rel=1e-3)


def test_distribution_dict_roundtrip():
    for d in (Rayleigh(1.5), PointMass(2.0), MinOf(Rayleigh(1.0), PointMass(3.0))):
        back = distribution_from_dict(d.to_dict())
        assert back.sf(1.0) == pytest.approx(d.sf(1.0))
    with pytest.raises(ValueError):
        distribution_from_dict({"kind": "weibull"})


def test_mode_distributions():
    md = ModeDistributions.rayleigh(1.0, 2.0, 1.0, 3.0)
    assert md[3].mean == pytest.approx(0.75)
    assert md[5].mean == 3.0
    links = md.sample_links(np.random.default_rng(1), 10)
    assert links.shape == (10, 4)
    s = ModeDistributions.static(ChannelGains(1, 2, 3, 4))
    assert isinstance(s[3], PointMass) and s[3].gain == 3
    with pytest.raises(KeyError):
        md[6]


@given(st.floats(0.0, 20.0))
def test_service_pmf_dither_keeps_mean(r):
    pmf = service_pmf(r, "dither")
    assert sum(pmf.values()) == pytest.approx(1.0)
    assert sum(n * p for n, p in pmf.items()) == pytest.approx(r, abs=1e-8)


def test_service_pmf_floor():
    assert service_pmf(2.75, "floor") == {2: 1.0}
    assert service_pmf(3.0, "floor") == {3: 1.0}
    with pytest.raises(ValueError):
        service_pmf(1.0, "round")
