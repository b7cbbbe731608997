import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resonance_lab.landscape import DriftField
from resonance_lab.sde import (
    NumericalInstabilityError,
    SimConfig,
    StopReason,
    check_step_size,
    estimate_escape_probability,
    path_stream,
    run_paths,
    simulate_until,
)

ou = DriftField(1, lambda s, x: -np.asarray(x, dtype=float))


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(epsilon=-0.1, mu=1.0)
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1, mu=1.0, path_count=0)
    with pytest.raises(ValueError):
        SimConfig(epsilon=0.1, mu=1.0, dt=0.0)
    assert SimConfig(epsilon=0.25, mu=0.9).time_scale == pytest.approx(math.exp(3.6))
    assert SimConfig(epsilon=0.0, mu=0.9).time_scale == math.inf


def test_deterministic_flow_stays_in_left_well(bench1):
    cfg = SimConfig(epsilon=0.0, mu=1.0, horizon=20.0, path_count=1)
    out = simulate_until(bench1, cfg, np.array([-0.5]), 0.0, np.array([1.0]), 0.2)
    assert out.stop_reason is StopReason.HORIZON
    assert out.stop_time == pytest.approx(20.0)
    assert out.final_point[0] == pytest.approx(-1.0, abs=1e-6)


def test_start_inside_target_hits_immediately(bench1):
    cfg = SimConfig(epsilon=0.3, mu=1.0, horizon=5.0, path_count=4)
    out = simulate_until(bench1, cfg, np.array([0.95]), 0.0, np.array([1.0]), 0.2)
    assert out.stop_reason is StopReason.HIT_TARGET
    assert out.stop_time == 0.0


def test_ornstein_uhlenbeck_variance():
    eps, n = 0.3, 10_000
    cfg = SimConfig(epsilon=eps, mu=1.0, dt=1e-3, horizon=1.0, r_abort=100.0, path_count=n, master_seed=11)
    batch = run_paths(ou, cfg, np.array([0.0]))
    assert batch.count(StopReason.HORIZON) == n
    x = batch.finals[:, 0]
    exact = eps * (1 - math.exp(-2.0)) / 2
    se = exact * math.sqrt(2.0 / (n - 1))
    assert abs(x.var(ddof=1) - exact) < 4 * se


def test_hit_times_and_points_are_consistent(bench1):
    cfg = SimConfig(epsilon=0.4, mu=1.0, dt=1e-3, horizon=30.0, path_count=64, master_seed=5)
    batch = run_paths(bench1, cfg, np.array([-1.0]), target=np.array([1.0]), rho=0.2)
    hit = batch.reasons == StopReason.HIT_TARGET
    assert hit.any()
    assert np.all(batch.times <= cfg.horizon)
    assert np.all(np.abs(batch.finals[hit, 0] - 1.0) <= 0.2)
    assert np.all(batch.times[~hit] == cfg.horizon)


def test_escape_through_sphere_is_interpolated():
    drift = DriftField(1, lambda s, x: np.ones_like(np.asarray(x, dtype=float)))
    cfg = SimConfig(epsilon=0.0, mu=1.0, dt=0.3, horizon=10.0, r_abort=1.0, path_count=1)
    batch = run_paths(drift, cfg, np.array([0.0]))
    assert StopReason(batch.reasons[0]) is StopReason.ESCAPED_R
    assert batch.times[0] == pytest.approx(1.0)


def test_non_finite_state_raises():
    # log of a negative state after one step
    bad = DriftField(1, lambda s, x: np.log(np.asarray(x, dtype=float)))
    cfg = SimConfig(epsilon=0.0, mu=1.0, dt=1.0, horizon=10.0, path_count=2)
    with np.errstate(invalid="ignore"), pytest.raises(NumericalInstabilityError):
        run_paths(bad, cfg, np.array([0.5]))


def test_stiffness_guard(bench1):
    check_step_size(bench1, 1e-3)
    with pytest.raises(ValueError):
        check_step_size(bench1, 0.05)


def test_streams_are_distinct_and_reproducible():
    a = path_stream(7, 0).standard_normal(8)
    assert np.array_equal(a, path_stream(7, 0).standard_normal(8))
    assert not np.array_equal(a, path_stream(7, 1).standard_normal(8))
    assert not np.array_equal(a, path_stream(8, 0).standard_normal(8))
    assert not np.array_equal(a, path_stream(7, 0, domain=1).standard_normal(8))


@settings(max_examples=5)
@given(st.integers(0, 2**64 - 1), st.integers(2, 4))
def test_tallies_independent_of_worker_count(bench1, seed, workers):
    cfg = SimConfig(epsilon=0.5, mu=1.0, dt=2e-3, horizon=4.0, path_count=12, master_seed=seed)
    one = run_paths(bench1, cfg, np.array([-1.0]), target=np.array([1.0]), rho=0.3)
    many = run_paths(bench1, cfg, np.array([-1.0]), target=np.array([1.0]), rho=0.3, workers=workers)
    for f in ("path_ids", "reasons", "times", "finals"):
        assert np.array_equal(getattr(one, f), getattr(many, f))


def test_escape_probability_edge_cases(bench1):
    cfg = SimConfig(epsilon=0.3, mu=1.0, path_count=10)
    est = estimate_escape_probability(bench1, cfg, np.array([-1.0]), R=4.0, deadline=0.0)
    assert est.probability == 0.0 and est.hits == 0
    with pytest.raises(ValueError):
        estimate_escape_probability(bench1, cfg, np.array([-3.0]), R=4.0, deadline=1.0)


def test_escape_probability_monotone_in_radius():
    # a weakly confining field where escapes are common
    weak = DriftField(1, lambda s, x: -0.1 * np.asarray(x, dtype=float))
    cfg = SimConfig(epsilon=1.0, mu=1.0, dt=1e-2, horizon=10.0, path_count=400, master_seed=2)
    p = [estimate_escape_probability(weak, cfg, np.array([0.0]), R, deadline=10.0).probability for R in (2, 3, 4)]
    assert p[0] > 0
    assert p[0] >= p[1] >= p[2]
