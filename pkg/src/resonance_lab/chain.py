"""Reduced two-state Markov chain with exit rates ``exp(-e_i(t / T) / eps)``.

State ``i`` is left at rate ``exp(-e_i(t / T) / eps)``, so the chain's exit
energy from a state is the diffusion's exit energy from the matching basin.
Natural time is measured from the state's start phase (see
:mod:`resonance_lab.resonance`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, quad

from .action import EnergyProfile
from .landscape import Basin
from .resonance import fit_log_miss, predicted_rate, start_phase, transition_times
from .sde import CHAIN_STREAM, binomial_stderr, path_stream


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class ChainSpec:
    """Profiles, phase lag and scales of the reduced chain.

    ``phase_lag`` follows ``e_minus(t) = e_plus(t + phase_lag)``; the check
    is done on the profile grid up to ``lock_tol`` relative to the profile
    amplitude.
    """

    e_minus: EnergyProfile
    e_plus: EnergyProfile
    phase_lag: float
    epsilon: float
    mu: float
    lock_tol: float = 1e-2

    def __post_init__(self):
        if self.epsilon <= 0 or self.mu <= 0:
            raise ChainError("epsilon and mu must be positive")
        s = self.e_minus.phases
        gap = np.max(np.abs(self.e_minus(s) - self.e_plus(s + self.phase_lag)))
        scale = max(float(np.ptp(self.e_minus.values)), 1e-12)
        if gap > self.lock_tol * scale:
            raise ChainError(f"profiles are not phase locked with lag {self.phase_lag} (gap {gap:.3g})")

    @property
    def time_scale(self) -> float:
        try:
            return math.exp(self.mu / self.epsilon)
        except OverflowError:
            return math.inf

    def profile(self, state) -> EnergyProfile:
        return self.e_minus if Basin.parse(state) is Basin.MINUS else self.e_plus

    def start(self, state) -> float:
        return start_phase(self.profile(state))

    def with_(self, **changes) -> "ChainSpec":
        kw = dict(e_minus=self.e_minus, e_plus=self.e_plus, phase_lag=self.phase_lag, epsilon=self.epsilon,
                  mu=self.mu, lock_tol=self.lock_tol)
        kw.update(changes)
        return ChainSpec(**kw)


def rate(spec: ChainSpec, state, t, start: Optional[float] = None):
    """Exit rate of ``state`` at natural time ``t`` after its start phase."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ChainError("time must be non-negative")
    s0 = spec.start(state) if start is None else start
    return np.exp(-spec.profile(state)(s0 + t / spec.time_scale) / spec.epsilon)


def phase_rate(spec: ChainSpec, state, u, start: Optional[float] = None):
    """Rate per unit phase, ``T * rate(u T) = exp((mu - e(s0 + u)) / eps)``.

    Free of the overflow in ``T`` that natural time suffers at small ``eps``.
    """
    s0 = spec.start(state) if start is None else start
    return np.exp((spec.mu - spec.profile(state)(s0 + np.asarray(u, dtype=float))) / spec.epsilon)


@dataclass
class TransitionDensity:
    """``p(t) = r(t) exp(-int_0^t r)``, tabulated against the phase offset ``u = t / T``."""

    state: Basin
    u: np.ndarray
    phase_rate: np.ndarray  # T * r(u T)
    hazard: np.ndarray  # int_0^t r, equal to int_0^u phase_rate
    spec: ChainSpec
    start: float

    @property
    def t(self) -> np.ndarray:
        return self.u * self.spec.time_scale

    @property
    def density(self) -> np.ndarray:
        """Density in natural time."""
        return self.phase_density / self.spec.time_scale

    @property
    def phase_density(self) -> np.ndarray:
        return self.phase_rate * np.exp(-self.hazard)

    @property
    def cumulative(self) -> np.ndarray:
        return -np.expm1(-self.hazard)

    @property
    def mass(self) -> float:
        return float(self.cumulative[-1])

    def hazard_at(self, u: float) -> float:
        """Cumulative rate up to phase offset ``u``: table value at the node below plus adaptive quadrature."""
        if u <= 0:
            return 0.0
        if u > self.u[-1] * (1 + 1e-12):
            raise ChainError("phase beyond the tabulated horizon")
        k = min(int(np.searchsorted(self.u, u, side="right") - 1), len(self.u) - 1)
        extra, _ = quad(lambda v: float(phase_rate(self.spec, self.state, v, self.start)), self.u[k], u,
                        epsabs=0.0, epsrel=1e-13)
        return float(self.hazard[k] + extra)

    def window_mass(self, u1: float, u2: float) -> float:
        """Probability of the first transition in the phase-offset window ``[u1, u2]``."""
        if u2 < u1:
            raise ChainError("window end precedes its start")
        return math.exp(-self.hazard_at(u1)) - math.exp(-self.hazard_at(u2))

    def miss_probability(self, u1: float, u2: float) -> float:
        """``1 - window_mass`` computed without cancellation."""
        return -math.expm1(-self.hazard_at(u1)) + math.exp(-self.hazard_at(u2))


def first_transition_density(
    spec: ChainSpec,
    state,
    nodes_per_period: int = 100_000,
    periods: float = 3.0,
    mass_cap: float = 1 - 1e-6,
    start: Optional[float] = None,
) -> TransitionDensity:
    """Tabulate the first-transition density of ``state`` by cumulative Simpson quadrature.

    The grid covers ``periods`` periods and is cut once the mass exceeds
    ``mass_cap`` (never before the end of the first period).
    """
    if nodes_per_period < 10_000:
        raise ChainError(f"{nodes_per_period} nodes per period do not resolve the rate (needs step <= T/1e4)")
    state = Basin.parse(state)
    s0 = spec.start(state) if start is None else start
    n = int(math.ceil(periods * nodes_per_period))
    u = np.linspace(0.0, n / nodes_per_period, n + 1)
    r = phase_rate(spec, state, u, s0)
    hazard = np.maximum.accumulate(cumulative_simpson(r, x=u, initial=0.0))
    cap = -math.log1p(-mass_cap)
    beyond = np.flatnonzero(hazard >= cap)
    if beyond.size:
        cut = max(int(beyond[0]), nodes_per_period)
        u, r, hazard = u[: cut + 1], r[: cut + 1], hazard[: cut + 1]
    return TransitionDensity(state, u, r, hazard, spec, s0)


@dataclass(frozen=True)
class ChainWindow:
    state: Basin
    mu: float
    h: float
    a: float
    window: tuple  # phase offsets from the start; multiply by T for natural time
    probability: float
    miss: float  # 1 - probability, accurate when probability is near 1


@dataclass(frozen=True)
class ChainWindowMeasure:
    minus: ChainWindow
    plus: ChainWindow

    @property
    def value(self) -> float:
        return min(self.minus.probability, self.plus.probability)

    @property
    def miss(self) -> float:
        return max(self.minus.miss, self.plus.miss)


def state_window(spec: ChainSpec, state, h: float, density: Optional[TransitionDensity] = None) -> ChainWindow:
    state = Basin.parse(state)
    p = spec.profile(state)
    s0 = spec.start(state)
    a, _ = transition_times(p, spec.mu, s0)
    if not 0 <= h:
        raise ChainError("h must be non-negative")
    u1, u2 = max(a - h, 0.0), a + h
    if density is None:
        density = first_transition_density(spec, state, periods=max(1.0, u2 + 0.05))
    prob = density.window_mass(u1, u2)
    miss = density.miss_probability(u1, u2)
    return ChainWindow(state, spec.mu, h, a, (u1, u2), prob, miss)


def window_measure(spec: ChainSpec, h: float) -> ChainWindowMeasure:
    """``min_i P_i(first transition in [(a^i - h) T, (a^i + h) T])``."""
    return ChainWindowMeasure(state_window(spec, Basin.MINUS, h), state_window(spec, Basin.PLUS, h))


def chain_predicted_rate(spec: ChainSpec, h: float) -> float:
    """``max_i {mu - e_minus(a^i - h)}`` with state ``+`` mapped through the phase lag."""
    out = []
    for state in (Basin.MINUS, Basin.PLUS):
        s0 = spec.start(state)
        a, _ = transition_times(spec.profile(state), spec.mu, s0)
        shift = 0.0 if state is Basin.MINUS else spec.phase_lag
        # e_plus(u) = e_minus(u - phase_lag)
        out.append(spec.mu - float(spec.e_minus(s0 + a - h - shift)))
    return max(out)


def chain_rate_fit(spec: ChainSpec, h: float, epsilons: Sequence[float]):
    """Fit of ``log(1 - N)`` against ``1 / eps`` from the quadrature window measure.

    Quadrature values carry no sampling noise, so the fit is unweighted.
    """
    measures = [window_measure(spec.with_(epsilon=float(eps)), h) for eps in epsilons]
    return fit_log_miss(epsilons, [m.value for m in measures], predicted=chain_predicted_rate(spec, h),
                        miss=[m.miss for m in measures])


@dataclass
class ChainSample:
    state: Basin
    times: np.ndarray  # sorted transition times of uncensored paths
    censored: int
    n_paths: int
    horizon: float

    def window_fraction(self, t1: float, t2: float):
        hits = int(np.sum((self.times >= t1) & (self.times <= t2)))
        p = hits / self.n_paths
        return p, binomial_stderr(p, self.n_paths)


def simulate_chain(
    spec: ChainSpec,
    state,
    master_seed: int,
    n_paths: int,
    horizon: Optional[float] = None,
    block: int = 32,
) -> ChainSample:
    """First transition times by thinning against the maximal rate ``exp(-inf e_i / eps)``.

    Each path draws from its own counter-based stream, so results depend only
    on ``(master_seed, path index)``.
    """
    if n_paths < 1:
        raise ChainError("n_paths must be at least 1")
    state = Basin.parse(state)
    T = spec.time_scale
    horizon = 3.0 * T if horizon is None else float(horizon)
    profile = spec.profile(state)
    s0 = spec.start(state)
    lam = math.exp(-profile.inf / spec.epsilon) * (1 + 1e-9)
    offset = 0 if state is Basin.MINUS else n_paths
    gens = [path_stream(master_seed, i + offset, CHAIN_STREAM) for i in range(n_paths)]
    times = np.full(n_paths, np.inf)
    clock = np.zeros(n_paths)
    live = np.arange(n_paths)
    while live.size:
        u = np.stack([gens[i].random((block, 2)) for i in live])
        cand = clock[live, None] + np.cumsum(-np.log1p(-u[:, :, 0]) / lam, axis=1)
        accept = u[:, :, 1] * lam < np.exp(-profile(s0 + cand / T) / spec.epsilon)
        accept &= cand <= horizon
        got = accept.any(axis=1)
        first = np.argmax(accept, axis=1)
        times[live[got]] = cand[got, first[got]]
        clock[live] = cand[:, -1]
        live = live[~got & (cand[:, -1] <= horizon)]
    done = np.isfinite(times)
    return ChainSample(state, np.sort(times[done]), int((~done).sum()), n_paths, horizon)


def compare_resonance(
    p_minus: EnergyProfile,
    p_plus: EnergyProfile,
    phase_lag: float,
    mu_grid: Sequence[float],
    h: float,
    chain_epsilons: Sequence[float],
    diffusion_rates: Optional[Mapping[float, float]] = None,
) -> dict:
    """Per-mu predicted, chain and (optionally) diffusion rates with their argmins.

    PASS when the argmins agree within one grid step.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    if mu_grid.size == 0:
        raise ChainError("empty mu grid")
    rows = []
    for mu in mu_grid:
        spec = ChainSpec(p_minus, p_plus, phase_lag, float(chain_epsilons[0]), float(mu))
        row = {
            "mu": float(mu),
            "predicted": predicted_rate(p_minus, p_plus, float(mu), h),
            "chain": chain_rate_fit(spec, h, chain_epsilons).slope,
        }
        if diffusion_rates is not None:
            if float(mu) not in diffusion_rates:
                raise ChainError(f"missing diffusion rate for mu={mu}")
            row["diffusion"] = float(diffusion_rates[float(mu)])
        rows.append(row)
    keys = ["predicted", "chain"] + (["diffusion"] if diffusion_rates is not None else [])
    argmins = {k: int(np.argmin([r[k] for r in rows])) for k in keys}
    spread = max(argmins.values()) - min(argmins.values())
    return {
        "h": float(h),
        "chain_epsilons": [float(e) for e in chain_epsilons],
        "rows": rows,
        "argmin_index": argmins,
        "argmin_mu": {k: float(mu_grid[v]) for k, v in argmins.items()},
        "status": "PASS" if spread <= 1 else "FAIL",
    }
