"""Strict JSON experiment configuration.

Every block is a dataclass; keys not declared on the dataclass are rejected,
and keys a subcommand needs but the file omits are reported by dotted name
(``sim.epsilon``). Scalars and lists are interchangeable for the ladder-type
fields (``epsilon``, ``mu``, ``h``).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional

SEED_ENV = "RESONANCE_LAB_SEED"


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class LandscapeBlock:
    name: str = "quartic_double_well"
    dimension: int = 1
    depth_mean: float = 0.5
    depth_amplitude: float = 0.25
    phase_lag: float = 0.5


@dataclass
class SimBlock:
    epsilon: Any = None
    mu: Any = None
    h: Any = None
    rho: Optional[float] = None
    dt: float = 1e-3
    path_count: int = 1000
    master_seed: Optional[int] = None
    horizon_multiplier: float = 3.0
    r_abort: float = 10.0
    chain_epsilon: Any = None


@dataclass
class ActionBlock:
    grid_size: int = 16
    t_max: float = 320.0
    gtol: float = 1e-6
    max_iter: int = 10_000
    profile: str = "action"  # "action", "well_depth" or a profile CSV path
    qp_phase: float = 0.0
    qp_x: Any = None
    qp_y: Any = None


@dataclass
class OutputBlock:
    directory: str = "out"
    formats: list = field(default_factory=lambda: ["csv", "json"])


BLOCKS = {"landscape": LandscapeBlock, "sim": SimBlock, "action": ActionBlock, "output": OutputBlock}
LADDERS = ("epsilon", "mu", "h", "chain_epsilon")


@dataclass
class ExperimentConfig:
    landscape: LandscapeBlock = field(default_factory=LandscapeBlock)
    sim: SimBlock = field(default_factory=SimBlock)
    action: ActionBlock = field(default_factory=ActionBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    present: dict = field(default_factory=dict)  # block -> keys given in the file

    def require(self, *keys: str) -> None:
        """Raise for the first dotted key absent from the file."""
        for key in keys:
            block, name = key.split(".")
            if name not in self.present.get(block, ()):
                raise ConfigError(key, "required for this subcommand but missing")

    def ladder(self, name: str) -> list:
        value = getattr(self.sim, name)
        return [float(v) for v in (value if isinstance(value, list) else [value])]

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in BLOCKS}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg: ExperimentConfig) -> None:
    land, sim, act = cfg.landscape, cfg.sim, cfg.action
    if land.name != "quartic_double_well":
        raise ConfigError("landscape.name", f"unknown landscape {land.name!r}")
    if not isinstance(land.dimension, int) or land.dimension < 1:
        raise ConfigError("landscape.dimension", "must be a positive integer")
    for name in LADDERS:
        value = getattr(sim, name)
        if value is None:
            continue
        items = value if isinstance(value, list) else [value]
        if not items or not all(_is_number(v) and v > 0 for v in items):
            raise ConfigError(f"sim.{name}", "must be a positive number or a non-empty list of them")
    if sim.rho is not None and not (_is_number(sim.rho) and sim.rho > 0):
        raise ConfigError("sim.rho", "must be positive")
    if not isinstance(sim.path_count, int) or sim.path_count < 1:
        raise ConfigError("sim.path_count", "must be an integer >= 1")
    if sim.master_seed is not None and not (isinstance(sim.master_seed, int) and 0 <= sim.master_seed < 2**64):
        raise ConfigError("sim.master_seed", "must be an unsigned 64-bit integer")
    for key, value in (("sim.dt", sim.dt), ("sim.horizon_multiplier", sim.horizon_multiplier),
                       ("sim.r_abort", sim.r_abort), ("action.t_max", act.t_max), ("action.gtol", act.gtol)):
        if not (_is_number(value) and value > 0):
            raise ConfigError(key, "must be positive")
    if not isinstance(act.grid_size, int) or act.grid_size < 4:
        raise ConfigError("action.grid_size", "must be an integer >= 4")
    if not isinstance(act.max_iter, int) or act.max_iter < 1:
        raise ConfigError("action.max_iter", "must be a positive integer")
    bad = [f for f in cfg.output.formats if f not in ("csv", "json")]
    if bad:
        raise ConfigError("output.formats", f"unknown format {bad[0]!r}")


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(doc) - set(BLOCKS))
    if unknown:
        raise ConfigError(unknown[0], "unknown block")
    blocks, present = {}, {}
    for name, cls in BLOCKS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(name, "block must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        extra = sorted(set(raw) - allowed)
        if extra:
            raise ConfigError(f"{name}.{extra[0]}", "unknown key")
        blocks[name] = cls(**raw)
        present[name] = tuple(sorted(raw))
    cfg = ExperimentConfig(**blocks, present=present)
    _validate(cfg)
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON ({exc})") from None
    return parse_config(doc)


def resolve_seed(cfg: ExperimentConfig, cli_seed: Optional[int]) -> int:
    """``--seed`` beats the environment, which beats ``sim.master_seed``."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
    return 0 if cfg.sim.master_seed is None else int(cfg.sim.master_seed)
