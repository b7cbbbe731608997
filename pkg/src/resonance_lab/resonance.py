"""Transition times, resonance interval, window probabilities and resonance points.

Conventions
-----------
``e_i`` is the energy needed to leave basin ``i``.  Paths for basin ``i`` are
started at the first global maximum ``s_i`` of ``e_i`` (for the lower well
of the benchmark this is phase 0), and transition times are measured from
there: ``a_mu^i = inf{t >= 0 : e_i(s_i + t) <= mu}``.  Starting at the maximum
is the "start a little later" device that keeps ``mu < e_i(start)`` for
every ``mu`` below the top of the profile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .action import EnergyProfile
from .landscape import Basin, DriftField, classify_attraction
from .sde import SimConfig, StopReason, binomial_stderr, run_paths

BOUNDARY = "BOUNDARY"


class ResonanceError(ValueError):
    pass


def start_phase(profile: EnergyProfile) -> float:
    """First global maximum of the profile in [0, 1)."""
    return profile.argmax()


def _first_crossing(profile, mu, start, strict):
    """First t in [0, 1) with e(start + t) <= mu (or < mu when strict)."""
    n = 8 * profile.size
    t = np.arange(n + 1) / n
    v = profile(start + t)
    cond = v < mu if strict else v <= mu
    if not cond.any():
        raise ResonanceError(f"profile never falls to mu={mu}")
    j = int(np.argmax(cond))
    if j == 0:
        return 0.0
    lo, hi = t[j - 1], t[j]
    fn = lambda u: float(profile(start + u)) - mu
    if fn(hi) == 0.0 and not strict:
        return float(hi)
    return float(brentq(fn, lo, hi, xtol=1e-14, rtol=1e-14))


def transition_times(profile: EnergyProfile, mu: float, start: Optional[float] = None, strict: bool = True):
    """``(a_mu, alpha_mu)`` measured from ``start`` (default: the profile maximum).

    With ``strict`` the precondition ``inf e < mu < e(start)`` is enforced;
    otherwise ``mu >= e(start)`` returns ``(0, 0)``.
    """
    start = start_phase(profile) if start is None else float(start)
    e0 = float(profile(start))
    if mu >= e0:
        if strict:
            raise ResonanceError(
                f"mu={mu} is not below e(start)={e0:.6g}; start the process later (at a phase where e > mu)"
            )
        return 0.0, 0.0
    if mu <= profile.inf:
        raise ResonanceError(f"mu={mu} is not above the profile minimum {profile.inf:.6g}")
    return _first_crossing(profile, mu, start, strict=False), _first_crossing(profile, mu, start, strict=True)


@dataclass(frozen=True)
class WindowSpec:
    """Phase window ``[a - h, a + h]`` after the start phase of ``basin``."""

    mu: float
    h: float
    basin: Basin
    a: float
    start: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "basin", Basin.parse(self.basin))
        if not 0.0 < self.h < self.a:
            raise ResonanceError(f"window needs 0 < h < a_mu (h={self.h}, a_mu={self.a:.6g})")

    def natural_window(self, time_scale: float):
        return (self.a - self.h) * time_scale, (self.a + self.h) * time_scale

    @classmethod
    def build(cls, profile: EnergyProfile, mu: float, h: float, start: Optional[float] = None) -> "WindowSpec":
        start = start_phase(profile) if start is None else float(start)
        a, _ = transition_times(profile, mu, start)
        return cls(mu, h, profile.basin, a, start)


def basin_rate(profile: EnergyProfile, mu: float, h: float, start: Optional[float] = None) -> float:
    """``mu - e_i(a_mu^i - h)`` for one basin, phases counted from its start."""
    start = start_phase(profile) if start is None else float(start)
    a, _ = transition_times(profile, mu, start)
    return mu - float(profile(start + a - h))


def predicted_rate(p_minus: EnergyProfile, p_plus: EnergyProfile, mu: float, h: float) -> float:
    """``max_i {mu - e_i(a_mu^i - h)}``, the limiting rate of ``eps log(1 - M)``."""
    return max(basin_rate(p_minus, mu, h), basin_rate(p_plus, mu, h))


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def __contains__(self, mu) -> bool:
        return self.lower < mu < self.upper


def resonance_interval(p_minus: EnergyProfile, p_plus: EnergyProfile) -> Optional[Interval]:
    """``] max_i inf e_i, inf max_i e_i [``, or ``None`` when empty."""
    if p_minus.size != p_plus.size:
        raise ResonanceError("profiles must share the phase grid")
    lower = max(p_minus.inf, p_plus.inf)
    pointwise = np.maximum(p_minus.values, p_plus.values)
    j = int(np.argmin(pointwise))
    h = p_minus.step
    res = minimize_scalar(
        lambda t: max(float(p_minus(t)), float(p_plus(t))),
        bounds=(j * h - h, j * h + h),
        method="bounded",
        options={"xatol": 1e-12},
    )
    upper = min(float(res.fun), float(pointwise[j]))
    scale = max(abs(lower), abs(upper), 1.0)
    if lower >= upper - 1e-9 * scale:
        return None
    return Interval(lower, upper)


# ---------------------------------------------------------------------------
# Monte Carlo window probabilities


@dataclass(frozen=True)
class WindowEstimate:
    spec: WindowSpec
    epsilon: float
    rho: float
    path_count: int
    hits: int
    escapes: int
    early: int  # transitions before the window opens

    @property
    def m_hat(self) -> float:
        return self.hits / self.path_count

    @property
    def stderr(self) -> float:
        return binomial_stderr(self.m_hat, self.path_count)


@dataclass(frozen=True)
class WindowMeasure:
    """Both basins' estimates; the measure is their minimum."""

    minus: WindowEstimate
    plus: WindowEstimate

    @property
    def worst(self) -> WindowEstimate:
        return self.minus if self.minus.m_hat <= self.plus.m_hat else self.plus

    @property
    def m_hat(self) -> float:
        return self.worst.m_hat

    @property
    def stderr(self) -> float:
        return self.worst.stderr

    @property
    def path_count(self) -> int:
        return self.worst.path_count


def check_target_balls(field: DriftField, rho: float, phase: float = 0.0, n_samples: int = 16) -> None:
    """Require ``B_rho(x_i)`` to lie in basin ``i`` (boundary samples are classified)."""
    g = field.geometry
    rng = np.random.default_rng(12345)
    for basin in (Basin.MINUS, Basin.PLUS):
        centre = g.equilibrium(basin)
        v = rng.standard_normal((n_samples, field.dim))
        v = rho * v / np.linalg.norm(v, axis=1, keepdims=True)
        for p in centre + v:
            if classify_attraction(field, phase, p) is not basin:
                raise ResonanceError(f"B_rho(x_{basin.value}) with rho={rho} is not inside its basin")


def estimate_window_probability(
    field: DriftField,
    cfg: SimConfig,
    spec: WindowSpec,
    rho: float,
    workers: int = 1,
    check_balls: bool = True,
) -> WindowEstimate:
    """Fraction of paths from ``x_i`` whose first entry into ``B_rho(x_-i)`` falls in the window.

    Paths that leave ``B_{r_abort}(0)`` count as misses.
    """
    if cfg.path_count < 1:
        raise ResonanceError("path_count must be positive")
    if check_balls:
        check_target_balls(field, rho, spec.start)
    g = field.geometry
    floor = max(np.linalg.norm(g.x_minus), np.linalg.norm(g.x_plus), field.r0 or 0.0)
    if cfg.r_abort <= floor:
        raise ResonanceError(f"r_abort={cfg.r_abort} must exceed max(|x_-|, |x_+|, R0) = {floor}")
    T = cfg.time_scale
    lo, hi = spec.natural_window(T)
    if cfg.horizon < hi:
        raise ResonanceError(f"horizon {cfg.horizon:.6g} is shorter than the window end {hi:.6g}")
    offset = 0 if spec.basin is Basin.MINUS else cfg.path_count
    batch = run_paths(
        field,
        cfg,
        g.equilibrium(spec.basin),
        target=g.equilibrium(spec.basin.other),
        rho=rho,
        start_time=spec.start * T,
        stop_time=hi,
        workers=workers,
        path_ids=np.arange(cfg.path_count) + offset,
    )
    hit = batch.reasons == StopReason.HIT_TARGET
    inside = hit & (batch.times >= lo) & (batch.times <= hi)
    return WindowEstimate(
        spec,
        cfg.epsilon,
        rho,
        cfg.path_count,
        int(inside.sum()),
        batch.count(StopReason.ESCAPED_R),
        int((hit & (batch.times < lo)).sum()),
    )


def estimate_window_measure(
    field: DriftField,
    cfg: SimConfig,
    p_minus: EnergyProfile,
    p_plus: EnergyProfile,
    h: float,
    rho: float,
    workers: int = 1,
) -> WindowMeasure:
    check_target_balls(field, rho)
    est = [
        estimate_window_probability(field, cfg, WindowSpec.build(p, cfg.mu, h), rho, workers, check_balls=False)
        for p in (p_minus, p_plus)
    ]
    return WindowMeasure(*est)


# ---------------------------------------------------------------------------
# rate fits


@dataclass
class RateFit:
    epsilons: np.ndarray
    m_hat: np.ndarray
    usable: np.ndarray
    slope: float  # fitted rate: log(1 - M) ~ slope / eps + intercept
    intercept: float
    residual: float
    predicted: Optional[float] = None
    stderr: Optional[np.ndarray] = None

    @property
    def scaled(self) -> np.ndarray:
        """``eps * log(1 - M)`` per ladder point (nan where unusable)."""
        with np.errstate(divide="ignore"):
            out = self.epsilons * np.log1p(-self.m_hat)
        return np.where(self.usable, out, np.nan)

    @property
    def relative_error(self) -> Optional[float]:
        if self.predicted is None:
            return None
        return abs(self.slope - self.predicted) / abs(self.predicted)


def fit_log_miss(epsilons, m_hat, trials=None, predicted=None, miss=None) -> RateFit:
    """Weighted least squares of ``log(1 - M)`` against ``1 / eps``.

    With ``trials`` the weights are inverse delta-method standard errors of
    ``log(1 - M_hat)``; without, all points weigh the same. ``miss`` supplies
    ``1 - M`` directly when it is known more accurately than ``M``.
    """
    eps = np.asarray(epsilons, dtype=float)
    m = np.asarray(m_hat, dtype=float)
    q = 1.0 - m if miss is None else np.asarray(miss, dtype=float)
    if np.any(np.diff(eps) >= 0):
        raise ResonanceError("epsilon ladder must be strictly decreasing")
    usable = q > 0.0
    if usable.sum() < 3:
        raise ResonanceError("fewer than three ladder points with M_hat < 1")
    x = 1.0 / eps[usable]
    y = np.log1p(-m[usable]) if miss is None else np.log(q[usable])
    sig = None
    if trials is not None:
        n = np.broadcast_to(np.asarray(trials, dtype=float), eps.shape)[usable]
        # continuity-corrected proportion keeps the weights finite at 0 hits
        p = (m[usable] * n + 0.5) / (n + 1.0)
        sig = np.sqrt(p / ((1 - p) * n))
        w = 1.0 / sig
    else:
        w = np.ones_like(x)
    (slope, intercept), res, *_ = np.polyfit(x, y, 1, w=w, full=True)
    residual = float(res[0]) if len(res) else 0.0
    full_sig = None
    if sig is not None:
        full_sig = np.full(eps.shape, np.nan)
        full_sig[usable] = sig
    return RateFit(eps, m, usable, float(slope), float(intercept), residual, predicted, full_sig)


def fit_rate(
    field: DriftField,
    cfg: SimConfig,
    p_minus: EnergyProfile,
    p_plus: EnergyProfile,
    h: float,
    rho: float,
    epsilons: Sequence[float],
    workers: int = 1,
) -> tuple:
    """Diffusion window measure across an epsilon ladder and its fitted rate.

    Returns ``(RateFit, [WindowMeasure per epsilon])``.
    """
    measures = []
    for eps in epsilons:
        c = cfg.with_(epsilon=float(eps))
        horizon = max(c.horizon, 1.5 * c.time_scale)
        measures.append(estimate_window_measure(field, c.with_(horizon=horizon), p_minus, p_plus, h, rho, workers))
    fit = fit_log_miss(
        epsilons,
        [m.m_hat for m in measures],
        [m.path_count for m in measures],
        predicted=predicted_rate(p_minus, p_plus, cfg.mu, h),
    )
    return fit, measures


# ---------------------------------------------------------------------------
# resonance point


@dataclass
class ResonancePoint:
    interval: Interval
    hs: np.ndarray
    mu_r: np.ndarray  # minimiser per h
    objective: np.ndarray  # objective value at the minimiser
    flags: list  # per h: "" or BOUNDARY
    extrapolated: float
    extrapolated_flag: str
    inflection: Optional[tuple] = None  # (s, e_minus(s)) from the curvature sign change
    grids: dict = field(default_factory=dict)

    @property
    def table(self) -> list:
        return [
            {"h": float(h), "mu_R": float(m), "rate": float(o), "flag": f}
            for h, m, o, f in zip(self.hs, self.mu_r, self.objective, self.flags)
        ]


def _objective(p_minus, p_plus, mu, h):
    try:
        return predicted_rate(p_minus, p_plus, mu, h)
    except ResonanceError:
        return math.nan


def inflection_point(profile: EnergyProfile) -> Optional[tuple]:
    """Point of maximal decrease: where the second difference turns from negative to positive
    on the branch from the global maximum down to the global minimum.

    Returns ``(s, e(s))`` or ``None`` when the sign change is missing or not unique.
    """
    M = profile.size
    v = profile.values
    i_max = int(np.argmax(v))
    i_min = int(np.argmin(v))
    length = (i_min - i_max) % M
    idx = (i_max + np.arange(length + 1)) % M
    d2 = (v[(idx + 1) % M] - 2 * v[idx] + v[(idx - 1) % M]) * M * M
    inner = d2[1:-1]
    changes = np.flatnonzero((inner[:-1] < 0) & (inner[1:] >= 0))
    if len(changes) != 1:
        return None
    k = changes[0] + 1
    y0, y1 = d2[k], d2[k + 1]
    frac = y0 / (y0 - y1)
    s = ((i_max + k + frac) / M) % 1.0
    return s, float(profile(s))


def second_order_conditions(profile: EnergyProfile, a: float, h: float, start: float = 0.0) -> dict:
    """Curvature of ``mu -> mu - e(a_mu - h)`` at a stationary point, by central differences.

    With ``a_mu' = 1 / e'(a)`` the second derivative is
    ``(e'(a - h) e''(a) - e''(a - h) e'(a)) / e'(a)^3``.  ``ok`` means a strict
    minimum on the decreasing branch: ``e' < 0`` at both ends, ``a - h`` before
    and ``a`` after the inflection (``e''(a - h) < 0 < e''(a)``).
    """
    d = profile.step
    e = lambda t: float(profile(start + t))
    d1 = lambda t: (e(t + d) - e(t - d)) / (2 * d)
    d2 = lambda t: (e(t + d) - 2 * e(t) + e(t - d)) / d**2
    curvature = (d1(a - h) * d2(a) - d2(a - h) * d1(a)) / d1(a) ** 3
    return {
        "de": d1(a),
        "de_at_a_minus_h": d1(a - h),
        "d2e_at_a": d2(a),
        "d2e_at_a_minus_h": d2(a - h),
        "curvature": curvature,
        "ok": d1(a) < 0 and d1(a - h) < 0 and d2(a) > 0 > d2(a - h) and curvature > 0,
    }


def find_resonance_point(
    p_minus: EnergyProfile,
    p_plus: EnergyProfile,
    hs: Sequence[float] = (0.2, 0.15, 0.1, 0.05),
    n_grid: int = 401,
    boundary_tol: float = 0.02,
) -> ResonancePoint:
    """Minimise ``mu -> max_i {mu - e_i(a_mu^i - h)}`` over ``I_R`` per ``h`` and extrapolate to ``h = 0``.

    A minimiser at the edge of the admissible grid is flagged BOUNDARY, as is
    an extrapolated value within ``boundary_tol`` (fraction of the interval
    width) of an endpoint of ``I_R``.
    """
    interval = resonance_interval(p_minus, p_plus)
    if interval is None:
        raise ResonanceError("resonance interval is empty")
    if not (p_minus.monotone_between_extremes() and p_plus.monotone_between_extremes()):
        raise ResonanceError("profiles are not strictly monotone between their extremes")
    hs = np.asarray(sorted(hs, reverse=True), dtype=float)
    mus = np.linspace(interval.lower, interval.upper, n_grid + 2)[1:-1]
    mu_r, obj, flags, grids = [], [], [], {}
    for h in hs:
        vals = np.array([_objective(p_minus, p_plus, m, h) for m in mus])
        ok = np.isfinite(vals)
        if not ok.any():
            raise ResonanceError(f"no admissible mu for h={h}")
        grids[float(h)] = vals
        valid = np.flatnonzero(ok)
        k = int(valid[np.argmin(vals[valid])])
        if k == valid[0] or k == valid[-1] or not (ok[k - 1] and ok[k + 1]):
            mu_r.append(float(mus[k]))
            obj.append(float(vals[k]))
            flags.append(BOUNDARY)
            continue
        res = minimize_scalar(
            lambda m: _objective(p_minus, p_plus, m, h),
            bracket=(mus[k - 1], mus[k], mus[k + 1]),
            method="golden",
            options={"xtol": 1e-10},
        )
        if np.isfinite(res.fun) and res.fun <= vals[k]:
            mu_r.append(float(res.x))
            obj.append(float(res.fun))
        else:
            mu_r.append(float(mus[k]))
            obj.append(float(vals[k]))
        flags.append("")
    mu_r = np.array(mu_r)
    if len(hs) >= 2:
        (h1, m1), (h2, m2) = (hs[-1], mu_r[-1]), (hs[-2], mu_r[-2])
        extrap = m1 - h1 * (m2 - m1) / (h2 - h1)
    else:
        extrap = float(mu_r[-1])
    tol = boundary_tol * interval.width
    ext_flag = BOUNDARY if (extrap >= interval.upper - tol or extrap <= interval.lower + tol) else ""
    return ResonancePoint(
        interval, hs, mu_r, np.array(obj), flags, float(extrap), ext_flag, inflection_point(p_minus), grids
    )
