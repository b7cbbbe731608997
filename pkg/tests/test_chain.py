import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from conftest import sinusoid_pair
from resonance_lab.action import EnergyProfile
from resonance_lab.chain import (
    ChainError,
    ChainSpec,
    chain_predicted_rate,
    compare_resonance,
    first_transition_density,
    phase_rate,
    rate,
    simulate_chain,
    window_measure,
)
from resonance_lab.resonance import predicted_rate


def flat(level, basin="-"):
    return EnergyProfile(np.full(16, float(level)), basin)


def flat_spec(level=1.0, epsilon=0.5, mu=0.9):
    return ChainSpec(flat(level), flat(level, "+"), 0.5, epsilon, mu)


@pytest.fixture(scope="module")
def spec(profiles):
    return ChainSpec(*profiles, phase_lag=0.5, epsilon=0.25, mu=0.9)


def test_rate_constant_profile():
    s = flat_spec()
    assert rate(s, "-", 3.0) == pytest.approx(math.exp(-2.0))
    with pytest.raises(ChainError):
        rate(s, "-", -1.0)


@given(st.floats(0.0, 50.0))
def test_rate_is_periodic(t):
    em, ep = sinusoid_pair(M=64)
    s = ChainSpec(em, ep, 0.5, 0.25, 0.9)
    T = s.time_scale
    assert rate(s, "+", t) == pytest.approx(rate(s, "+", t + T), rel=1e-9)


def test_fastest_channel_at_profile_minimum(spec):
    em = spec.e_minus
    u = (em.argmin() - spec.start("-")) % 1.0
    assert rate(spec, "-", u * spec.time_scale) == pytest.approx(math.exp(-em.inf / spec.epsilon), rel=1e-9)


def test_phase_lock_is_checked(profiles):
    with pytest.raises(ChainError):
        ChainSpec(*profiles, phase_lag=0.2, epsilon=0.25, mu=0.9)
    with pytest.raises(ChainError):
        ChainSpec(*profiles, phase_lag=0.5, epsilon=0.0, mu=0.9)


def test_constant_rate_is_exponential():
    s = flat_spec()
    lam = math.exp(-1.0 / s.epsilon)
    d = first_transition_density(s, "-", periods=3.0)
    t = d.t
    np.testing.assert_allclose(d.density, lam * np.exp(-lam * t), rtol=1e-9)
    horizon = 10 / lam / s.time_scale
    d = first_transition_density(s, "-", periods=horizon + 0.01, mass_cap=1 - 1e-12)
    assert d.window_mass(0.0, horizon) >= 1 - math.exp(-10) - 1e-12


def test_coarse_grid_is_rejected(spec):
    with pytest.raises(ChainError):
        first_transition_density(spec, "-", nodes_per_period=1000)


def test_density_invariants(spec):
    d = first_transition_density(spec, "+")
    assert np.all(d.density >= 0)
    assert np.all(np.diff(d.cumulative) >= 0)
    assert 0 < d.mass <= 1


@pytest.mark.parametrize("eps, mu", [(0.25, 0.9), (0.2, 0.7), (0.15, 0.95)])
def test_mass_identity(profiles, eps, mu):
    s = ChainSpec(*profiles, phase_lag=0.5, epsilon=eps, mu=mu)
    d = first_transition_density(s, "-", periods=1.0)
    H = 0.8
    # integrate piece by piece between interpolation knots, where the integrand is smooth
    knots = np.arange(-1, 2 * s.e_minus.size) / s.e_minus.size - d.start
    edges = np.concatenate([[0.0], knots[(knots > 0) & (knots < H)], [H]])
    integral = sum(quad(lambda u: float(phase_rate(s, "-", u)), a, b, epsabs=0, epsrel=1e-13)[0]
                   for a, b in zip(edges[:-1], edges[1:]))
    assert abs(d.window_mass(0.0, H) - (1 - math.exp(-integral))) <= 1e-8


def test_window_extremes(spec):
    zero = window_measure(spec, 0.0)
    assert zero.value == 0.0 and zero.miss == pytest.approx(1.0)
    wide = window_measure(spec, 2.5)
    d = first_transition_density(spec, "-", periods=wide.minus.window[1] + 0.05)
    assert wide.minus.probability == pytest.approx(1 - math.exp(-d.hazard_at(wide.minus.window[1])), abs=1e-12)
    assert wide.value > 0.98


def test_phase_lag_symmetry(spec):
    wm = window_measure(spec, 0.1)
    assert wm.minus.probability == pytest.approx(wm.plus.probability, abs=1e-8)
    assert wm.value <= min(wm.minus.probability, wm.plus.probability)
    assert wm.minus.miss == pytest.approx(1 - wm.minus.probability, abs=1e-12)


def test_chain_prediction_equals_diffusion_prediction(spec, profiles):
    for mu in (0.6, 0.75, 0.9):
        s = spec.with_(mu=mu)
        assert chain_predicted_rate(s, 0.1) == pytest.approx(predicted_rate(*profiles, mu, 0.1), abs=1e-12)


def test_constant_rate_simulation_mean():
    s = flat_spec()
    lam = math.exp(-1.0 / s.epsilon)
    n = 10_000
    sample = simulate_chain(s, "-", 3, n, horizon=1e6)
    assert sample.censored == 0
    se = sample.times.std(ddof=1) / math.sqrt(n)
    assert abs(sample.times.mean() - 1 / lam) < 4 * se


def test_simulation_matches_quadrature(spec):
    sample = simulate_chain(spec, "-", 7, 100_000)
    w = window_measure(spec, 0.1).minus
    T = spec.time_scale
    p, se = sample.window_fraction(w.window[0] * T, w.window[1] * T)
    assert abs(p - w.probability) < 3 * math.hypot(se, math.sqrt(w.probability * (1 - w.probability) / 1e5))


@settings(max_examples=5)
@given(st.integers(0, 2**64 - 1))
def test_simulation_reproducible(seed):
    em, ep = sinusoid_pair(M=64)
    s = ChainSpec(em, ep, 0.5, 0.25, 0.9)
    a = simulate_chain(s, "+", seed, 50)
    b = simulate_chain(s, "+", seed, 50)
    assert np.array_equal(a.times, b.times) and a.censored == b.censored


def test_censoring(spec):
    sample = simulate_chain(spec, "-", 1, 200, horizon=1.0)
    assert sample.censored + len(sample.times) == 200
    assert sample.censored > 150
    with pytest.raises(ChainError):
        simulate_chain(spec, "-", 1, 0)


def test_compare_chain_with_profiles_on_interval(profiles):
    mus = np.linspace(0.5, 1.0, 23)[1:-1]
    report = compare_resonance(*profiles, 0.5, mus, 0.1, [0.002, 0.0015, 0.001])
    assert report["argmin_index"]["chain"] == report["argmin_index"]["predicted"]
    assert report["status"] == "PASS"


def test_compare_single_mu_is_trivial_pass(profiles):
    report = compare_resonance(*profiles, 0.5, [0.9], 0.1, [0.25, 0.2, 0.15], {0.9: -0.1})
    assert report["status"] == "PASS"


def test_compare_missing_inputs(profiles):
    with pytest.raises(ChainError):
        compare_resonance(*profiles, 0.5, [], 0.1, [0.25, 0.2, 0.15])
    with pytest.raises(ChainError):
        compare_resonance(*profiles, 0.5, [0.8, 0.9], 0.1, [0.25, 0.2, 0.15], {0.9: -0.1})
