"""Time-periodic drift fields, double-well benchmarks and basin classification.

A drift field is a callable ``b(s, x)`` of the phase ``s`` (period one) and a
point ``x`` with trailing dimension ``d``.  Everything here is vectorised over
the leading axes of ``x`` so the SDE engine can push a whole batch of paths
through one call.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import RK45

Array = np.ndarray


class LandscapeError(ValueError):
    """Invalid landscape parameters or an operation unsupported by the field."""


class DivergenceError(RuntimeError):
    """A frozen-flow trajectory left the escape radius."""


class Basin(enum.Enum):
    MINUS = "-"
    PLUS = "+"
    UNRESOLVED = "?"

    @property
    def other(self) -> "Basin":
        if self is Basin.UNRESOLVED:
            raise LandscapeError("UNRESOLVED has no opposite basin")
        return Basin.PLUS if self is Basin.MINUS else Basin.MINUS

    @classmethod
    def parse(cls, label) -> "Basin":
        if isinstance(label, Basin):
            return label
        table = {"-": cls.MINUS, "minus": cls.MINUS, "+": cls.PLUS, "plus": cls.PLUS}
        try:
            return table[str(label).lower()]
        except KeyError:
            raise LandscapeError(f"unknown basin label {label!r}") from None


@dataclass(frozen=True)
class Hyperplane:
    """The set ``{x : <x, normal> = offset}`` with a unit normal."""

    normal: Array
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise LandscapeError("hyperplane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @property
    def dim(self) -> int:
        return self.normal.size

    def signed_distance(self, x) -> Array:
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def project(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        return x - np.multiply.outer(self.signed_distance(x), self.normal)

    def tangent_basis(self) -> Array:
        """Orthonormal basis of the hyperplane directions, shape (d, d-1)."""
        d = self.dim
        # complete the normal to an orthonormal frame; columns 1: span the plane
        q, _ = np.linalg.qr(np.column_stack([self.normal, np.eye(d)]))
        return q[:, 1:d]


@dataclass(frozen=True)
class GeometrySpec:
    x_minus: Array
    x_plus: Array
    separatrix: Optional[Hyperplane] = None
    saddle: Optional[Array] = None

    def __post_init__(self):
        object.__setattr__(self, "x_minus", np.atleast_1d(np.asarray(self.x_minus, dtype=float)))
        object.__setattr__(self, "x_plus", np.atleast_1d(np.asarray(self.x_plus, dtype=float)))
        if self.saddle is not None:
            object.__setattr__(self, "saddle", np.atleast_1d(np.asarray(self.saddle, dtype=float)))

    def equilibrium(self, basin) -> Array:
        basin = Basin.parse(basin)
        return self.x_minus if basin is Basin.MINUS else self.x_plus

    @property
    def classification_radius(self) -> float:
        return 0.1 * float(np.linalg.norm(self.x_plus - self.x_minus))


@dataclass(frozen=True)
class DriftField:
    """A period-one drift ``b(s, x)``, optionally the negative gradient of ``U(s, x)``.

    ``eta`` and ``r0`` are the inward-drift constants: ``<x, b(s, x)> < -eta |x|``
    whenever ``|x| >= r0``.
    """

    dim: int
    drift: Callable[[float, Array], Array]
    potential: Optional[Callable[[float, Array], Array]] = None
    jacobian_fn: Optional[Callable[[float, Array], Array]] = None
    geometry: Optional[GeometrySpec] = None
    eta: Optional[float] = None
    r0: Optional[float] = None
    name: str = "custom"
    landscape: object = field(default=None, compare=False)

    def __call__(self, s, x) -> Array:
        return self.drift(s, x)

    @property
    def is_gradient(self) -> bool:
        return self.potential is not None

    def jacobian(self, s, x, step: float = 1e-6) -> Array:
        """Drift Jacobian ``db_i/dx_j`` with shape ``x.shape + (d,)``.

        Central differences are used when no analytic Jacobian is attached.
        """
        if self.jacobian_fn is not None:
            return self.jacobian_fn(s, x)
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (self.dim,))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = step
            out[..., :, j] = (self.drift(s, x + e) - self.drift(s, x - e)) / (2 * step)
        return out

    def relaxation_time(self, s: float, x) -> float:
        """Inverse of the slowest linear decay rate of the frozen flow at ``x``."""
        jac = self.jacobian(s, np.asarray(x, dtype=float))
        rates = np.abs(np.real(np.linalg.eigvals(jac)))
        slowest = rates.min()
        if slowest <= 0:
            raise LandscapeError("point is not a hyperbolic equilibrium")
        return 1.0 / slowest


# ---------------------------------------------------------------------------
# depth functions


@dataclass(frozen=True)
class CosineDepth:
    """``D(t) = mean + amplitude * cos(2 pi (t + shift))``."""

    mean: float
    amplitude: float = 0.0
    shift: float = 0.0

    def __call__(self, t):
        return self.mean + self.amplitude * np.cos(2 * np.pi * (np.asarray(t, dtype=float) + self.shift))


@dataclass(frozen=True)
class ShiftedDepth:
    base: Callable
    shift: float

    def __call__(self, t):
        return self.base(np.asarray(t, dtype=float) + self.shift)


@dataclass(frozen=True)
class QuarticDoubleWell:
    """Benchmark potential with minima pinned at ``(+-1, 0, ...)`` and saddle at 0.

    ``U(t, x) = 4 D(t, sign x1) (x1^4/4 - x1^2/2) + |x_rest|^2 / 2`` where the
    left well uses ``depth_minus(t)`` and the right one ``depth_minus(t + phase_lag)``.
    The construction is C^1 across the separatrix ``x1 = 0``.
    """

    depth_minus: Callable
    phase_lag: float
    dim: int = 1

    def depth_plus(self, t):
        return self.depth_minus(np.asarray(t, dtype=float) + self.phase_lag)

    def _depth_at(self, s, x1):
        return np.where(x1 <= 0.0, self.depth_minus(s), self.depth_plus(s))

    def potential(self, s, x):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        u = 4.0 * self._depth_at(s, x1) * (0.25 * x1**4 - 0.5 * x1**2)
        if self.dim > 1:
            u = u + 0.5 * np.sum(x[..., 1:] ** 2, axis=-1)
        return u

    def drift(self, s, x):
        x = np.asarray(x, dtype=float)
        out = -x  # transverse coordinates relax at unit rate
        x1 = x[..., 0]
        out[..., 0] = -4.0 * self._depth_at(s, x1) * (x1**3 - x1)
        return out

    def jacobian(self, s, x):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        jac = np.zeros(x.shape + (self.dim,))
        idx = np.arange(self.dim)
        jac[..., idx, idx] = -1.0
        jac[..., 0, 0] = -4.0 * self._depth_at(s, x1) * (3 * x1**2 - 1.0)
        return jac


def _check_depth(depth: Callable, n: int = 257) -> None:
    t = np.linspace(0.0, 1.0, n)
    v = np.asarray(depth(t), dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise LandscapeError("depth function must be finite and positive")
    if not np.allclose(depth(t + 1.0), v, rtol=0, atol=1e-12):
        raise LandscapeError("depth function must have period one")


def make_benchmark(d: int, depth_minus: Callable, phase_lag: float) -> DriftField:
    """Quartic double well with independently modulated well depths.

    ``depth_minus`` gives the left well depth per phase; the right well is the
    same profile advanced by ``phase_lag``.  The returned field carries its
    ``GeometrySpec`` and verified inward-drift constants ``eta=1, r0=3``.
    """
    if d not in (1, 2):
        raise LandscapeError(f"benchmark dimension must be 1 or 2, got {d}")
    if not 0.0 < phase_lag < 1.0:
        raise LandscapeError(f"phase lag must lie in (0, 1), got {phase_lag}")
    _check_depth(depth_minus)
    well = QuarticDoubleWell(depth_minus, float(phase_lag), d)
    e1 = np.zeros(d)
    e1[0] = 1.0
    geometry = GeometrySpec(x_minus=-e1, x_plus=e1, separatrix=Hyperplane(e1, 0.0), saddle=np.zeros(d))
    fld = DriftField(
        dim=d,
        drift=well.drift,
        potential=well.potential,
        jacobian_fn=well.jacobian,
        geometry=geometry,
        eta=1.0,
        r0=3.0,
        name=f"quartic-{d}d",
        landscape=well,
    )
    worst = inward_drift_margin(fld, n_samples=2000, rng=np.random.default_rng(0))
    if worst >= 0:
        raise LandscapeError(f"inward drift condition fails (margin {worst:.3g})")
    return fld


# ---------------------------------------------------------------------------
# assumption checks


def _sample_shell(rng, n, d, r_lo, r_hi):
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(r_lo, r_hi, size=(n, 1))


def inward_drift_margin(field: DriftField, n_samples: int = 1000, rng=None) -> float:
    """Largest sampled value of ``<x, b(s,x)> + eta |x|`` on the shell ``r0 <= |x| <= 2 r0``.

    Negative means the growth condition held at every sample.
    """
    if field.eta is None or field.r0 is None:
        raise LandscapeError("field has no inward-drift constants")
    rng = np.random.default_rng() if rng is None else rng
    x = _sample_shell(rng, n_samples, field.dim, field.r0, 2 * field.r0)
    s = rng.uniform(0.0, 1.0, size=n_samples)
    b = np.stack([field(si, xi) for si, xi in zip(s, x)])
    return float(np.max(np.sum(x * b, axis=1) + field.eta * np.linalg.norm(x, axis=1)))


def periodicity_defect(field: DriftField, n_samples: int = 500, box: float = 3.0, rng=None) -> float:
    rng = np.random.default_rng() if rng is None else rng
    x = rng.uniform(-box, box, size=(n_samples, field.dim))
    s = rng.uniform(0.0, 1.0, size=n_samples)
    return max(float(np.max(np.abs(field(si + 1.0, xi) - field(si, xi)))) for si, xi in zip(s, x))


def gradient_defect(field: DriftField, n_samples: int = 500, box: float = 2.0, step: float = 1e-5, rng=None) -> float:
    """Max ``|b + grad U|`` with the gradient from central differences."""
    if not field.is_gradient:
        raise LandscapeError("field has no potential")
    rng = np.random.default_rng() if rng is None else rng
    x = rng.uniform(-box, box, size=(n_samples, field.dim))
    s = rng.uniform(0.0, 1.0, size=n_samples)
    worst = 0.0
    for si, xi in zip(s, x):
        grad = np.empty(field.dim)
        for j in range(field.dim):
            e = np.zeros(field.dim)
            e[j] = step
            grad[j] = (field.potential(si, xi + e) - field.potential(si, xi - e)) / (2 * step)
        worst = max(worst, float(np.max(np.abs(field(si, xi) + grad))))
    return worst


def equilibrium_defect(field: DriftField, n_phases: int = 64) -> float:
    g = field.geometry
    s = np.linspace(0.0, 1.0, n_phases, endpoint=False)
    return max(float(np.max(np.abs(field(si, x)))) for si in s for x in (g.x_minus, g.x_plus))


# ---------------------------------------------------------------------------
# basin classification


def classify_attraction(
    field: DriftField,
    s: float,
    y,
    radius: Optional[float] = None,
    max_steps: int = 1_000_000,
    escape_radius: float = 1e3,
    stall_speed: float = 1e-10,
) -> Basin:
    """Basin reached by the frozen flow ``dphi/dt = b(s, phi)`` started at ``y``.

    Returns ``Basin.UNRESOLVED`` when the step budget runs out or the flow
    stalls at a point that is neither attractor (a saddle on the separatrix).
    """
    g = field.geometry
    if g is None:
        raise LandscapeError("field has no geometry")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise LandscapeError("starting point must be finite")
    r = g.classification_radius if radius is None else radius

    def which(p):
        if np.linalg.norm(p - g.x_minus) < r:
            return Basin.MINUS
        if np.linalg.norm(p - g.x_plus) < r:
            return Basin.PLUS
        return None

    hit = which(y)
    if hit is not None:
        return hit
    solver = RK45(lambda t, p: field(s, p), 0.0, y, t_bound=np.inf, rtol=1e-9, atol=1e-12)
    for _ in range(max_steps):
        solver.step()
        p = solver.y
        if np.linalg.norm(p) > escape_radius:
            raise DivergenceError(f"frozen flow from {y} left |x| <= {escape_radius}")
        hit = which(p)
        if hit is not None:
            return hit
        if solver.status != "running" or np.linalg.norm(field(s, p)) < stall_speed:
            return Basin.UNRESOLVED
    return Basin.UNRESOLVED


def frozen_flow(field: DriftField, s: float, y, duration: float, steps: int = 100) -> Array:
    """RK4 solution of the frozen flow after ``duration``."""
    p = np.atleast_1d(np.asarray(y, dtype=float)).copy()
    h = duration / steps
    for _ in range(steps):
        k1 = field(s, p)
        k2 = field(s, p + 0.5 * h * k1)
        k3 = field(s, p + 0.5 * h * k2)
        k4 = field(s, p + h * k3)
        p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p
