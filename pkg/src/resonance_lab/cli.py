"""Command-line entry point: ``resonance-lab <subcommand> --config cfg.json``.

Exit codes: 0 success, 2 invalid configuration or failed validation,
3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .action import NOT_CONVERGED, EnergyProfile, energy_profile, quasi_potential, well_depth
from .chain import ChainError, ChainSpec, chain_rate_fit, compare_resonance, first_transition_density, window_measure
from .config import ConfigError, ExperimentConfig, load_config, resolve_seed
from .landscape import (
    CosineDepth,
    DivergenceError,
    LandscapeError,
    equilibrium_defect,
    gradient_defect,
    inward_drift_margin,
    make_benchmark,
    periodicity_defect,
)
from .resonance import (
    ResonanceError,
    estimate_window_measure,
    find_resonance_point,
    fit_rate,
    predicted_rate,
    resonance_interval,
    transition_times,
)
from .sde import NumericalInstabilityError, SimConfig, StopReason, run_paths

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


class NonConvergence(RuntimeError):
    pass


class ValidationFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# output


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


class Emitter:
    """Writes deterministic CSV tables and JSON summaries into one directory."""

    def __init__(self, cfg: ExperimentConfig, seed: int, directory: str, command: str):
        self.cfg = cfg
        self.dir = directory
        self.meta = {"command": command, "config_hash": cfg.digest(), "seed": seed, "version": __version__}
        self.written = []
        os.makedirs(directory, exist_ok=True)

    def table(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        if "csv" not in self.cfg.output.formats:
            return
        path = os.path.join(self.dir, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            for key in ("command", "config_hash", "seed", "version"):
                fh.write(f"# {key}={self.meta[key]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self.written.append(path)

    def summary(self, name: str, body: dict) -> None:
        if "json" not in self.cfg.output.formats:
            return
        path = os.path.join(self.dir, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(_jsonable({"meta": self.meta, **body}), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.written.append(path)


def read_profiles(path: str) -> tuple:
    """Load ``(e_minus, e_plus)`` from a profile CSV (``#`` lines are skipped)."""
    with open(path) as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    if not rows or not {"s", "e_minus", "e_plus"} <= set(rows[0]):
        raise ConfigError("action.profile", f"{path} lacks the s, e_minus, e_plus columns")
    rows.sort(key=lambda r: float(r["s"]))
    em = [float(r["e_minus"]) for r in rows]
    ep = [float(r["e_plus"]) for r in rows]
    return EnergyProfile(em, "-"), EnergyProfile(ep, "+")


# ---------------------------------------------------------------------------
# building blocks


def build_field(cfg: ExperimentConfig):
    land = cfg.landscape
    return make_benchmark(land.dimension, CosineDepth(land.depth_mean, land.depth_amplitude), land.phase_lag)


def chain_lag(cfg: ExperimentConfig) -> float:
    # field: e_plus(t) = e_minus(t + phase_lag); chain: e_minus(t) = e_plus(t + lag)
    return (1.0 - cfg.landscape.phase_lag) % 1.0


def build_profiles(cfg: ExperimentConfig, field, workers: int) -> tuple:
    act = cfg.action
    if act.profile == "action":
        out = tuple(
            energy_profile(field, b, M=act.grid_size, t_max=act.t_max, gtol=act.gtol, max_iter=act.max_iter,
                           workers=workers)
            for b in ("-", "+")
        )
    elif act.profile == "well_depth":
        phases = np.arange(act.grid_size) / act.grid_size
        out = tuple(EnergyProfile([2.0 * well_depth(field, s, b) for s in phases], b) for b in ("-", "+"))
    else:
        out = read_profiles(act.profile)
    return out


def _not_converged(profiles) -> bool:
    return any(NOT_CONVERGED in f for p in profiles for f in p.flags)


def sim_config(cfg: ExperimentConfig, seed: int, epsilon: float, mu: float) -> SimConfig:
    T = math.exp(mu / epsilon)
    return SimConfig(epsilon, mu, dt=cfg.sim.dt, horizon=cfg.sim.horizon_multiplier * T, r_abort=cfg.sim.r_abort,
                     master_seed=seed, path_count=cfg.sim.path_count)


# ---------------------------------------------------------------------------
# subcommands


def cmd_energy(cfg, out: Emitter, workers: int):
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    phases = em.phases
    out.table("profile", ["s", "e_minus", "e_plus", "flags"],
              [(s, a, b, "|".join(x for x in (fa, fb) if x)) for s, a, b, fa, fb in
               zip(phases, em.values, ep.values, em.flags, ep.flags)])
    out.summary("energy", {"grid_size": em.size, "inf": [em.inf, ep.inf], "sup": [em.sup, ep.sup]})
    if _not_converged((em, ep)):
        raise NonConvergence("energy profile minimisation did not converge at every phase")


def cmd_qp(cfg, out: Emitter, workers: int):
    cfg.require("action.qp_x", "action.qp_y")
    field = build_field(cfg)
    x = np.atleast_1d(np.asarray(cfg.action.qp_x, dtype=float))
    y = np.atleast_1d(np.asarray(cfg.action.qp_y, dtype=float))
    if x.shape != (field.dim,) or y.shape != (field.dim,):
        raise ConfigError("action.qp_x", f"points must have dimension {field.dim}")
    res = quasi_potential(field, cfg.action.qp_phase, x, y, t_max=cfg.action.t_max, gtol=cfg.action.gtol,
                          max_iter=cfg.action.max_iter)
    out.summary("qp", {"phase": cfg.action.qp_phase, "x": x, "y": y, "value": res.value, "horizon": res.horizon,
                       "ladder": res.ladder, "flags": res.flags})
    if not res.converged:
        raise NonConvergence("quasi-potential minimisation did not converge")


def cmd_simulate(cfg, out: Emitter, workers: int, seed: int):
    cfg.require("sim.epsilon", "sim.mu", "sim.rho")
    field = build_field(cfg)
    eps, mu = cfg.ladder("epsilon")[0], cfg.ladder("mu")[0]
    sc = sim_config(cfg, seed, eps, mu)
    g = field.geometry
    batch = run_paths(field, sc, g.x_minus, target=g.x_plus, rho=cfg.sim.rho, workers=workers)
    T = sc.time_scale
    header = ["path_id", "stop_reason", "stop_time", "phase_at_stop"] + [f"x{k}" for k in range(field.dim)]
    rows = [(int(i), StopReason(int(r)).name, t, t / T, *f)
            for i, r, t, f in zip(batch.path_ids, batch.reasons, batch.times, batch.finals)]
    out.table("paths", header, rows)
    out.summary("simulate", {"epsilon": eps, "mu": mu, "time_scale": T,
                             "counts": {r.name: batch.count(r) for r in StopReason}})


def cmd_window(cfg, out: Emitter, workers: int, seed: int):
    cfg.require("sim.epsilon", "sim.mu", "sim.h", "sim.rho")
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    rows, summary = [], []
    for eps in cfg.ladder("epsilon"):
        for mu in cfg.ladder("mu"):
            for h in cfg.ladder("h"):
                wm = estimate_window_measure(field, sim_config(cfg, seed, eps, mu), em, ep, h, cfg.sim.rho, workers)
                for est in (wm.minus, wm.plus):
                    rows.append((eps, mu, h, est.spec.basin.value, est.hits, est.path_count, est.m_hat, est.stderr))
                summary.append({"epsilon": eps, "mu": mu, "h": h, "M_hat": wm.m_hat, "stderr": wm.stderr})
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    out.table("window", ["epsilon", "mu", "h", "basin", "hits", "trials", "M_hat", "stderr"], rows)
    out.summary("window", {"measures": summary})


def cmd_rate(cfg, out: Emitter, workers: int, seed: int):
    cfg.require("sim.epsilon", "sim.mu", "sim.h", "sim.rho")
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    eps = sorted(cfg.ladder("epsilon"), reverse=True)
    rows = []
    for mu in cfg.ladder("mu"):
        for h in cfg.ladder("h"):
            fit, _ = fit_rate(field, sim_config(cfg, seed, eps[0], mu), em, ep, h, cfg.sim.rho, eps, workers)
            rows.append((mu, h, fit.slope, fit.intercept, fit.predicted, fit.relative_error))
    out.table("rate", ["mu", "h", "slope", "intercept", "predicted", "relative_error"], sorted(rows))
    out.summary("rate", {"epsilons": eps, "fits": [dict(zip(["mu", "h", "slope", "intercept", "predicted",
                                                              "relative_error"], r)) for r in sorted(rows)]})


def cmd_resonance(cfg, out: Emitter, workers: int):
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    hs = cfg.ladder("h") if "h" in cfg.present.get("sim", ()) else [0.2, 0.15, 0.1, 0.05]
    rp = find_resonance_point(em, ep, hs=hs)
    out.table("resonance", ["h", "mu_R", "rate", "flag"], [(r["h"], r["mu_R"], r["rate"], r["flag"]) for r in rp.table])
    out.summary("resonance", {"interval": [rp.interval.lower, rp.interval.upper], "table": rp.table,
                              "extrapolated": rp.extrapolated, "extrapolated_flag": rp.extrapolated_flag,
                              "inflection": rp.inflection})


def cmd_chain(cfg, out: Emitter, workers: int):
    cfg.require("sim.epsilon", "sim.mu", "sim.h")
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    lag = chain_lag(cfg)
    eps_ladder, mus, hs = cfg.ladder("epsilon"), cfg.ladder("mu"), cfg.ladder("h")
    spec0 = ChainSpec(em, ep, lag, eps_ladder[0], mus[0])
    dens_rows = []
    for state in ("-", "+"):
        d = first_transition_density(spec0, state, nodes_per_period=10_000)
        stride = max(1, len(d.t) // 2000)
        dens_rows += [(state, t, p, c) for t, p, c in zip(d.t[::stride], d.density[::stride], d.cumulative[::stride])]
    out.table("chain_density", ["state", "t", "p", "cumulative"], dens_rows)
    meas = []
    for eps in eps_ladder:
        for mu in mus:
            for h in hs:
                wm = window_measure(spec0.with_(epsilon=eps, mu=mu), h)
                meas.append((eps, mu, h, wm.minus.probability, wm.plus.probability, wm.value))
    out.table("chain_window", ["epsilon", "mu", "h", "N_minus", "N_plus", "N"], sorted(meas))
    fits = []
    given = cfg.present.get("sim", ())
    ladder = sorted(cfg.ladder("chain_epsilon") if "chain_epsilon" in given else eps_ladder, reverse=True)
    if len(ladder) >= 3:
        for mu in mus:
            for h in hs:
                f = chain_rate_fit(spec0.with_(mu=mu), h, ladder)
                fits.append({"mu": mu, "h": h, "slope": f.slope, "predicted": f.predicted,
                             "relative_error": f.relative_error})
    out.summary("chain", {"phase_lag": lag, "fit_epsilons": ladder, "fits": fits})


def cmd_compare(cfg, out: Emitter, workers: int, seed: int):
    cfg.require("sim.epsilon", "sim.mu", "sim.h", "sim.rho", "sim.chain_epsilon")
    field = build_field(cfg)
    em, ep = build_profiles(cfg, field, workers)
    eps = sorted(cfg.ladder("epsilon"), reverse=True)
    h = cfg.ladder("h")[0]
    mus = sorted(cfg.ladder("mu"))
    diffusion = {}
    for mu in mus:
        fit, _ = fit_rate(field, sim_config(cfg, seed, eps[0], mu), em, ep, h, cfg.sim.rho, eps, workers)
        diffusion[mu] = fit.slope
    report = compare_resonance(em, ep, chain_lag(cfg), mus, h, sorted(cfg.ladder("chain_epsilon"), reverse=True),
                               diffusion)
    out.table("compare", ["mu", "predicted", "chain", "diffusion"],
              [(r["mu"], r["predicted"], r["chain"], r["diffusion"]) for r in report["rows"]])
    out.summary("compare", {"diffusion_epsilons": eps, **report})


def cmd_validate(cfg, out: Emitter, workers: int, seed: int):
    field = build_field(cfg)
    rng = np.random.default_rng(seed)
    checks = {
        "inward_drift_margin": (inward_drift_margin(field, 4000, rng), "< 0"),
        "periodicity_defect": (periodicity_defect(field, rng=rng), "<= 1e-12"),
        "gradient_defect": (gradient_defect(field, rng=rng), "<= 1e-6"),
        "equilibrium_defect": (equilibrium_defect(field), "<= 1e-12"),
    }
    ok = {
        "inward_drift_margin": checks["inward_drift_margin"][0] < 0,
        "periodicity_defect": checks["periodicity_defect"][0] <= 1e-12,
        "gradient_defect": checks["gradient_defect"][0] <= 1e-6,
        "equilibrium_defect": checks["equilibrium_defect"][0] <= 1e-12,
    }
    em, ep = build_profiles(cfg, field, workers)
    depth = CosineDepth(cfg.landscape.depth_mean, cfg.landscape.depth_amplitude)
    s = em.phases
    rel = np.abs(em.values - 2 * depth(s)) / (2 * depth(s))
    checks["energy_vs_twice_depth"] = (float(rel.max()), "<= 0.03")
    ok["energy_vs_twice_depth"] = bool(rel.max() <= 0.03)
    interval = resonance_interval(em, ep)
    out.table("validate", ["check", "value", "criterion", "pass"],
              [(k, v, c, ok[k]) for k, (v, c) in sorted(checks.items())])
    out.table("oracle", ["s", "e_minus", "two_depth", "relative_error"],
              [(a, b, 2 * depth(a), r) for a, b, r in zip(s, em.values, rel)])
    out.summary("validate", {"checks": {k: {"value": v, "criterion": c, "pass": ok[k]} for k, (v, c) in checks.items()},
                             "resonance_interval": None if interval is None else [interval.lower, interval.upper]})
    if _not_converged((em, ep)):
        raise NonConvergence("energy profile minimisation did not converge at every phase")
    failed = sorted(k for k, v in ok.items() if not v)
    if failed:
        raise ValidationFailure("failed checks: " + ", ".join(failed))


COMMANDS = {
    "energy": (cmd_energy, False),
    "qp": (cmd_qp, False),
    "simulate": (cmd_simulate, True),
    "window": (cmd_window, True),
    "rate": (cmd_rate, True),
    "resonance": (cmd_resonance, False),
    "chain": (cmd_chain, False),
    "compare": (cmd_compare, True),
    "validate": (cmd_validate, True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resonance-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, help="master seed (overrides env and config)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    fn, seeded = COMMANDS[args.command]
    try:
        cfg = load_config(args.config)
        seed = resolve_seed(cfg, args.seed)
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        if args.workers < 1:
            raise ConfigError("--workers", "must be at least 1")
        out = Emitter(cfg, seed, args.out or cfg.output.directory, args.command)
        if seeded:
            fn(cfg, out, args.workers, seed)
        else:
            fn(cfg, out, args.workers)
    except (ConfigError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonConvergence, NumericalInstabilityError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (LandscapeError, ResonanceError, ChainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in out.written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
