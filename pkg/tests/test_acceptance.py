"""Acceptance criteria 1-11, one test each.

Every test prints a ``CRITERION n: PASS|FAIL`` line and records it for the
terminal summary, then asserts. Tolerances and budgets are the stated ones.
"""
import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import sinusoid_pair
from resonance_lab.action import EnergyProfile, energy_profile, quasi_potential, well_depth
from resonance_lab.chain import ChainSpec, chain_rate_fit, phase_rate, first_transition_density, window_measure
from resonance_lab.landscape import Basin
from resonance_lab.resonance import (
    BOUNDARY,
    estimate_window_measure,
    find_resonance_point,
    fit_rate,
    resonance_interval,
    transition_times,
)
from resonance_lab.sde import SimConfig, estimate_escape_probability

RESULTS = {}
# budget for criteria stated as instantaneous
INSTANT = 60
WORKERS = min(8, os.cpu_count() or 1)


@contextmanager
def criterion(n, budget):
    """Time the body; the body stores ``(ok, detail)`` in the yielded dict."""
    box = {"ok": False, "detail": "did not finish"}
    t0 = time.perf_counter()
    try:
        yield box
    except Exception as exc:
        box["ok"], box["detail"] = False, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        elapsed = time.perf_counter() - t0
        ok = box["ok"] and elapsed <= budget
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({box['detail']}; {elapsed:.1f}s of {budget:.0f}s)"
        RESULTS[n] = line
        print(line)
        box["verdict"] = ok


def check(box):
    assert box["verdict"], RESULTS


@pytest.fixture(scope="module")
def sinusoid_profiles():
    return sinusoid_pair()


def test_criterion_01_energy_profile_oracle(bench1):
    with criterion(1, 300) as box:
        em = energy_profile(bench1, "-", M=16)
        twice = np.array([2 * well_depth(bench1, s, "-") for s in em.phases])
        err = np.abs(em.values - twice) / twice
        box["ok"] = bool(err.max() <= 0.03) and not any("NOT_CONVERGED" in f for f in em.flags)
        box["detail"] = f"max rel error {err.max():.2e}"
    check(box)


def test_criterion_02_two_dimensional_reduction(bench1, bench2):
    with criterion(2, 120) as box:
        v1 = quasi_potential(bench1, 0.0, [-1.0], [0.0]).value
        v2 = quasi_potential(bench2, 0.0, [-1.0, 0.0], [0.0, 0.0]).value
        rel = abs(v2 - v1) / v1
        box["ok"] = rel <= 0.03
        box["detail"] = f"d=1 {v1:.5f}, d=2 {v2:.5f}, rel {rel:.2e}"
    check(box)


def test_criterion_03_transition_times(sinusoid_profiles):
    with criterion(3, INSTANT) as box:
        em = sinusoid_profiles[0]
        errs = []
        for mu in (0.75, 0.9, 1.0 - 1e-9):
            a, _ = transition_times(em, mu)
            errs.append(abs(a - math.acos(2 * (mu - 1)) / (2 * math.pi)))
        box["ok"] = max(errs) <= em.step
        box["detail"] = f"max |a - closed form| {max(errs):.2e}, grid step {em.step:.2e}"
    check(box)


def test_criterion_04_resonance_interval(bench1):
    with criterion(4, INSTANT) as box:
        M = 256
        em = EnergyProfile.from_function(lambda s: [2 * well_depth(bench1, t, "-") for t in s], M=M, basin="-")
        ep = EnergyProfile.from_function(lambda s: [2 * well_depth(bench1, t, "+") for t in s], M=M, basin="+")
        interval = resonance_interval(em, ep)
        # one phase-grid step moves the profile by at most this much
        tol = max(np.abs(np.diff(np.append(p.values, p.values[0]))).max() for p in (em, ep))
        box["ok"] = abs(interval.lower - 0.5) <= tol and abs(interval.upper - 1.0) <= tol
        box["detail"] = f"I_R = ({interval.lower:.6f}, {interval.upper:.6f}), tol {tol:.2e}"
    check(box)


def test_criterion_05_resonance_point(sinusoid_profiles):
    with criterion(5, INSTANT) as box:
        rp = find_resonance_point(*sinusoid_profiles, hs=(0.2, 0.1, 0.05))
        errs = [abs(r["mu_R"] - (1 - 0.5 * math.sin(math.pi * r["h"]))) / (1 - 0.5 * math.sin(math.pi * r["h"]))
                for r in rp.table]
        box["ok"] = max(errs) <= 0.01 and rp.extrapolated_flag == BOUNDARY
        box["detail"] = f"max rel error {max(errs):.2e}, h->0 flag {rp.extrapolated_flag or 'none'}"
    check(box)


def mass_oracle(spec, start, H):
    """``1 - exp(-int_0^H rate)`` by adaptive quadrature split at interpolation knots."""
    knots = np.arange(-1, 2 * spec.e_minus.size) / spec.e_minus.size - start
    edges = np.concatenate([[0.0], knots[(knots > 0) & (knots < H)], [H]])
    integral = sum(quad(lambda u: float(phase_rate(spec, "-", u)), a, b, epsabs=0, epsrel=1e-13)[0]
                   for a, b in zip(edges[:-1], edges[1:]))
    return 1 - math.exp(-integral)


def test_criterion_06_chain_mass_identity(sinusoid_profiles):
    cases = [(ChainSpec(*sinusoid_profiles, phase_lag=0.5, epsilon=eps, mu=mu), H)
             for eps, mu, H in ((0.25, 0.9, 0.8), (0.2, 0.7, 0.5), (0.15, 0.95, 0.35))]
    masses = []
    with criterion(6, INSTANT) as box:
        for spec, H in cases:
            d = first_transition_density(spec, "-", periods=1.0)
            masses.append((d.window_mass(0.0, H), d.start))
        # the oracle runs inside the budget too, so the budget is conservative
        worst = max(abs(m - mass_oracle(spec, start, H)) for (spec, H), (m, start) in zip(cases, masses))
        box["ok"] = worst <= 1e-8
        box["detail"] = f"max abs deviation {worst:.2e}"
    check(box)


def test_criterion_07_chain_rate_asymptotics(sinusoid_profiles):
    with criterion(7, 60) as box:
        spec = ChainSpec(*sinusoid_profiles, phase_lag=0.5, epsilon=0.25, mu=0.9)
        fit = chain_rate_fit(spec, 0.1, [0.25, 0.2, 0.15, 0.12])
        box["ok"] = fit.relative_error <= 0.15
        box["detail"] = f"slope {fit.slope:.4f} vs predicted {fit.predicted:.4f}, rel {fit.relative_error:.2f}"
    check(box)


@pytest.mark.slow
def test_criterion_08_diffusion_vs_chain(bench1, sinusoid_profiles):
    with criterion(8, 1800) as box:
        eps, mu, h, rho = 0.25, 0.9, 0.1, 0.2
        cfg = SimConfig(epsilon=eps, mu=mu, path_count=2000, master_seed=1)
        cfg = cfg.with_(horizon=3 * cfg.time_scale)
        wm = estimate_window_measure(bench1, cfg, *sinusoid_profiles, h, rho, workers=WORKERS)
        n = window_measure(ChainSpec(*sinusoid_profiles, phase_lag=0.5, epsilon=eps, mu=mu), h).value
        # the chain value is a quadrature, so only the diffusion carries sampling error
        gap = abs(wm.m_hat - n)
        box["ok"] = gap <= 4 * wm.stderr
        box["detail"] = f"M_hat {wm.m_hat:.4f} +- {wm.stderr:.4f} vs N {n:.4f}, gap {gap / wm.stderr:.1f} SE"
    check(box)


@pytest.mark.slow
def test_criterion_09_diffusion_rate_slope(bench1, sinusoid_profiles):
    with criterion(9, 3600) as box:
        cfg = SimConfig(epsilon=0.3, mu=0.9, path_count=2000, master_seed=1)
        fit, _ = fit_rate(bench1, cfg, *sinusoid_profiles, 0.1, 0.2, [0.3, 0.25, 0.2], workers=WORKERS)
        box["ok"] = fit.relative_error <= 0.25
        box["detail"] = f"slope {fit.slope:.4f} vs predicted {fit.predicted:.4f}, rel {fit.relative_error:.2f}"
    check(box)


@pytest.mark.slow
def test_criterion_10_boundedness(bench1):
    with criterion(10, 300) as box:
        cfg = SimConfig(epsilon=0.3, mu=1.0, path_count=1000, master_seed=1)
        start = bench1.geometry.equilibrium(Basin.MINUS)
        p = [estimate_escape_probability(bench1, cfg, start, R, deadline=100.0, workers=WORKERS).probability
             for R in (3.0, 4.0, 5.0)]
        box["ok"] = p[0] >= p[1] >= p[2] and p[2] == 0.0
        box["detail"] = f"escape fractions at R=3,4,5: {p}"
    check(box)


PROPERTY_TESTS = [
    "tests/test_action.py::test_action_nonnegative",
    "tests/test_action.py::test_cost_triangle_inequality",
    "tests/test_action.py::test_lipschitz_bound",
    "tests/test_resonance.py::test_nested_windows_and_min_over_basins",
    "tests/test_resonance.py::test_transition_time_non_increasing",
    "tests/test_sde.py::test_tallies_independent_of_worker_count",
    "tests/test_chain.py::test_simulation_reproducible",
]


@pytest.mark.slow
def test_criterion_11_property_suite():
    root = Path(__file__).resolve().parent.parent
    with criterion(11, 300) as box:
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                              cwd=root, capture_output=True, text=True)
        tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
        box["ok"] = proc.returncode == 0
        box["detail"] = tail
    check(box)
