"""Euler-Maruyama engine for ``dX = b(t / T, X) dt + sqrt(eps) dW`` with ``T = exp(mu / eps)``.

Every path owns a Philox stream keyed by ``(master_seed, path_id)``, so tallies
are bit-identical no matter how the paths are split across workers.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .landscape import DriftField

# counter word 3 separates the draw sequences of different simulators
SDE_STREAM = 0
CHAIN_STREAM = 1

NOISE_CHUNK = 512


class NumericalInstabilityError(RuntimeError):
    """State became non-finite; the step size is too large for the field."""


def path_stream(master_seed: int, path_id: int, domain: int = SDE_STREAM) -> np.random.Generator:
    """Independent generator for one path.

    The Philox key is the pair ``(master_seed, path_id)`` itself, so distinct
    paths are distinct keys and their streams cannot overlap.
    """
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, path_id], dtype=np.uint64)
    counter = np.array([0, 0, 0, domain], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    mu: float
    dt: float = 1e-3
    horizon: float = 1e4
    r_abort: float = 10.0
    master_seed: int = 0
    path_count: int = 1000

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if self.path_count < 1:
            raise ValueError("path_count must be at least 1")
        if self.r_abort <= 0:
            raise ValueError("r_abort must be positive")

    @property
    def time_scale(self) -> float:
        if self.epsilon == 0:
            return math.inf
        try:
            return math.exp(self.mu / self.epsilon)
        except OverflowError:
            return math.inf

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


class StopReason(enum.IntEnum):
    HIT_TARGET = 0
    ESCAPED_R = 1
    HORIZON = 2


@dataclass(frozen=True)
class PathOutcome:
    stop_reason: StopReason
    stop_time: float
    phase_at_stop: float
    final_point: np.ndarray


@dataclass
class OutcomeBatch:
    """Per-path outcomes, ordered by path id."""

    path_ids: np.ndarray
    reasons: np.ndarray
    times: np.ndarray
    finals: np.ndarray

    def __len__(self):
        return len(self.path_ids)

    def count(self, reason: StopReason) -> int:
        return int(np.sum(self.reasons == reason))

    def outcome(self, i: int, time_scale: float, start_time: float = 0.0) -> PathOutcome:
        t = float(self.times[i])
        return PathOutcome(StopReason(int(self.reasons[i])), t, (start_time + t) / time_scale, self.finals[i].copy())

    @classmethod
    def concat(cls, parts: Sequence["OutcomeBatch"]) -> "OutcomeBatch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("path_ids", "reasons", "times", "finals")))


def lipschitz_near_equilibria(field: DriftField, n_phases: int = 32) -> float:
    g = field.geometry
    s = np.linspace(0.0, 1.0, n_phases, endpoint=False)
    return max(float(np.linalg.norm(field.jacobian(si, x), 2)) for si in s for x in (g.x_minus, g.x_plus))


def check_step_size(field: DriftField, dt: float) -> None:
    if field.geometry is None:
        return
    lip = lipschitz_near_equilibria(field)
    if dt > 0.1 / lip:
        raise ValueError(f"dt={dt} exceeds the stiffness guard 0.1/L = {0.1 / lip:.3g}")


def _ball_entry_fraction(x0, x1, centre, radius):
    """Smallest theta in [0, 1] with |x0 + theta (x1 - x0) - centre| = radius (entering)."""
    # work in units of the radius so huge states cannot overflow the quadratic
    w = (x0 - centre) / radius
    dx = (x1 - x0) / radius
    a = np.sum(dx * dx, axis=-1)
    b = 2 * np.sum(w * dx, axis=-1)
    c = np.sum(w * w, axis=-1) - 1.0
    disc = np.maximum(b * b - 4 * a * c, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = (-b - np.sqrt(disc)) / (2 * a)
    return np.clip(np.nan_to_num(theta, nan=1.0), 0.0, 1.0)


def _sphere_exit_fraction(x0, x1, radius):
    w = x0 / radius
    dx = (x1 - x0) / radius
    a = np.sum(dx * dx, axis=-1)
    b = 2 * np.sum(w * dx, axis=-1)
    c = np.sum(w * w, axis=-1) - 1.0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        disc = np.maximum(b * b - 4 * a * c, 0.0)
        theta = (-b + np.sqrt(disc)) / (2 * a)
    return np.clip(np.nan_to_num(theta, nan=1.0), 0.0, 1.0)


def _run_block(field, cfg, start, start_time, target, rho, stop_time, path_ids):
    d = field.dim
    n = len(path_ids)
    T = cfg.time_scale
    x = np.tile(np.asarray(start, dtype=float).reshape(1, d), (n, 1))
    reasons = np.full(n, StopReason.HORIZON, dtype=np.int8)
    times = np.full(n, float(stop_time))
    finals = x.copy()
    live = np.arange(n)
    if target is not None:
        target = np.asarray(target, dtype=float).reshape(d)
        inside = np.linalg.norm(x - target, axis=1) <= rho
        reasons[inside] = StopReason.HIT_TARGET
        times[inside] = 0.0
        live = live[~inside]
    gens = {int(i): path_stream(cfg.master_seed, int(path_ids[i])) for i in live}
    xl = x[live]
    nsteps = int(math.ceil(stop_time / cfg.dt - 1e-12)) if stop_time > 0 else 0
    k = 0
    while live.size and k < nsteps:
        m = min(NOISE_CHUNK, nsteps - k)
        noise = np.stack([gens[int(i)].standard_normal((m, d)) for i in live])
        for j in range(m):
            t = (k + j) * cfg.dt
            h = min(cfg.dt, stop_time - t)
            phase = (start_time + t) / T
            xn = xl + field(phase, xl) * h + math.sqrt(cfg.epsilon * h) * noise[:, j]
            if not np.all(np.isfinite(xn)):
                raise NumericalInstabilityError(f"non-finite state at t={t:.6g}; reduce dt")
            done = np.zeros(live.size, dtype=bool)
            if target is not None:
                hit = np.linalg.norm(xn - target, axis=1) <= rho
                if hit.any():
                    theta = _ball_entry_fraction(xl[hit], xn[hit], target, rho)
                    ids = live[hit]
                    reasons[ids] = StopReason.HIT_TARGET
                    times[ids] = t + theta * h
                    finals[ids] = xn[hit]
                    done |= hit
            esc = (np.linalg.norm(xn, axis=1) >= cfg.r_abort) & ~done
            if esc.any():
                theta = _sphere_exit_fraction(xl[esc], xn[esc], cfg.r_abort)
                ids = live[esc]
                reasons[ids] = StopReason.ESCAPED_R
                times[ids] = t + theta * h
                finals[ids] = xn[esc]
                done |= esc
            if done.any():
                keep = ~done
                for i in live[done]:
                    gens.pop(int(i))
                live, xn, noise = live[keep], xn[keep], noise[keep]
            xl = xn
            if not live.size:
                break
        k += m
    finals[live] = xl
    return OutcomeBatch(np.asarray(path_ids), reasons, times, finals)


def _run_block_star(args):
    return _run_block(*args)


def run_paths(
    field: DriftField,
    cfg: SimConfig,
    start,
    target=None,
    rho: float = 0.0,
    start_time: float = 0.0,
    stop_time: Optional[float] = None,
    workers: int = 1,
    path_ids=None,
) -> OutcomeBatch:
    """Simulate ``cfg.path_count`` paths from ``start`` at natural time ``start_time``.

    Each path stops on entering ``B_rho(target)``, on leaving ``B_{r_abort}(0)``
    or at ``stop_time`` (default ``cfg.horizon``), measured from the start.
    """
    stop_time = cfg.horizon if stop_time is None else float(stop_time)
    if stop_time > cfg.horizon:
        raise ValueError("stop_time exceeds the configured horizon")
    if target is not None and rho <= 0:
        raise ValueError("target radius must be positive")
    check_step_size(field, cfg.dt)
    ids = np.arange(cfg.path_count) if path_ids is None else np.asarray(path_ids)
    workers = max(1, min(int(workers), len(ids)))
    blocks = np.array_split(ids, workers)
    jobs = [(field, cfg, start, start_time, target, rho, stop_time, b) for b in blocks]
    if workers == 1:
        parts = [_run_block(*jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block_star, jobs))
    return OutcomeBatch.concat(parts)


def simulate_until(
    field: DriftField,
    cfg: SimConfig,
    start,
    start_time: float,
    target,
    rho: float,
    path_id: int = 0,
) -> PathOutcome:
    """Single path; see :func:`run_paths`."""
    batch = run_paths(field, cfg, start, target, rho, start_time=start_time, path_ids=[path_id])
    return batch.outcome(0, cfg.time_scale, start_time)


@dataclass(frozen=True)
class EscapeEstimate:
    probability: float
    stderr: float
    hits: int
    trials: int
    radius: float
    deadline: float


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def estimate_escape_probability(
    field: DriftField, cfg: SimConfig, start, R: float, deadline: float, workers: int = 1
) -> EscapeEstimate:
    """Fraction of paths leaving ``B_R(0)`` before ``deadline``."""
    start = np.atleast_1d(np.asarray(start, dtype=float))
    if np.linalg.norm(start) > R / 2:
        raise ValueError("start must satisfy |start| <= R/2")
    n = cfg.path_count
    if deadline <= 0:
        return EscapeEstimate(0.0, 0.0, 0, n, R, deadline)
    run_cfg = cfg.with_(r_abort=R, horizon=max(cfg.horizon, deadline))
    batch = run_paths(field, run_cfg, start, stop_time=deadline, workers=workers)
    hits = batch.count(StopReason.ESCAPED_R)
    p = hits / n
    return EscapeEstimate(p, binomial_stderr(p, n), hits, n, R, deadline)
