"""Frozen-phase action functional, minimum-action paths and energy profiles.

The discrete action of a path sampled at ``N + 1`` uniform nodes is the
midpoint rule

    A = 1/2 * sum_k dt * |(phi[k+1] - phi[k]) / dt - b(s, (phi[k] + phi[k+1]) / 2)|^2

which is a nonlinear least-squares objective with a block-bidiagonal residual
Jacobian.  Minimisation uses damped Gauss-Newton steps whose normal equations
are block-tridiagonal, so every step is a banded Cholesky solve.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import LinAlgError, solveh_banded
from scipy.optimize import minimize, minimize_scalar

from .landscape import Basin, DriftField, Hyperplane, LandscapeError

NOT_CONVERGED = "NOT_CONVERGED"
LADDER_UNSETTLED = "LADDER_UNSETTLED"


@dataclass(frozen=True)
class PathGrid:
    horizon: float
    nodes: np.ndarray  # shape (N + 1, d)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        object.__setattr__(self, "nodes", nodes)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if nodes.shape[0] < 2:
            raise ValueError("a path needs at least two nodes")

    @property
    def n_intervals(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def spacing(self) -> float:
        return self.horizon / self.n_intervals

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.nodes.shape[0])

    def concat(self, other: "PathGrid") -> "PathGrid":
        if not np.allclose(self.nodes[-1], other.nodes[0]):
            raise ValueError("paths do not join")
        return PathGrid(self.horizon + other.horizon, np.vstack([self.nodes, other.nodes[1:]]))


def _residuals(field: DriftField, s: float, nodes: np.ndarray, dt: float) -> np.ndarray:
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    vel = (nodes[1:] - nodes[:-1]) / dt
    return math.sqrt(dt) * (vel - field(s, mid))


def evaluate_action(field: DriftField, s: float, path: PathGrid) -> float:
    """Midpoint-rule value of ``1/2 int |phi' - b(s, phi)|^2 dt``."""
    f = _residuals(field, s, path.nodes, path.spacing)
    return 0.5 * float(np.sum(f * f))


# ---------------------------------------------------------------------------
# banded Gauss-Newton


def _pack_banded(diag_blocks: np.ndarray, off_blocks: np.ndarray, d: int) -> np.ndarray:
    """Upper banded storage of a symmetric block-tridiagonal matrix."""
    nb = diag_blocks.shape[0]
    u = 2 * d - 1
    ab = np.zeros((u + 1, nb * d))
    cols = np.arange(nb) * d
    for p in range(d):
        for q in range(p, d):
            ab[u + p - q, cols + q] = diag_blocks[:, p, q]
    for p in range(d):
        for q in range(d):
            ab[u + p - q - d, cols[1:] + q] = off_blocks[:, p, q]
    return ab


class _Problem:
    """Interior nodes (and optionally an endpoint sliding on a hyperplane) as unknowns."""

    def __init__(self, field, s, nodes, dt, plane: Optional[Hyperplane]):
        self.field = field
        self.s = s
        self.dt = dt
        self.nodes = np.array(nodes, dtype=float)
        self.d = self.nodes.shape[1]
        self.free_end = plane is not None
        if self.free_end:
            frame = np.column_stack([plane.tangent_basis(), plane.normal])
            self.frame = frame
            self.frame_mask = np.ones(self.d)
            self.frame_mask[-1] = 0.0  # normal coordinate stays on the plane
            self.nodes[-1] = plane.project(self.nodes[-1])

    def evaluate(self, nodes):
        dt = self.dt
        mid = 0.5 * (nodes[1:] + nodes[:-1])
        f = math.sqrt(dt) * ((nodes[1:] - nodes[:-1]) / dt - self.field(self.s, mid))
        jac = self.field.jacobian(self.s, mid)
        eye = np.eye(self.d)
        A = math.sqrt(dt) * (-eye / dt - 0.5 * jac)  # d f_k / d phi_k
        B = math.sqrt(dt) * (eye / dt - 0.5 * jac)  # d f_k / d phi_{k+1}
        return f, A, B, mid

    def curvature(self, f, mid, step: float = 1e-5):
        """Residual-curvature blocks ``sum_i f_i d^2 f_i / d phi^2`` per interval.

        Each interval contributes the same block to its four node pairings;
        the drift Hessian is contracted with ``f`` by differencing ``J^T f``.
        """
        S = np.empty(mid.shape + (self.d,))
        for j in range(self.d):
            e = np.zeros(self.d)
            e[j] = step
            jp = np.einsum("kij,ki->kj", self.field.jacobian(self.s, mid + e), f)
            jm = np.einsum("kij,ki->kj", self.field.jacobian(self.s, mid - e), f)
            S[:, :, j] = (jp - jm) / (2 * step)
        S = 0.5 * (S + np.transpose(S, (0, 2, 1)))
        return -0.25 * math.sqrt(self.dt) * S

    def normal_equations(self, f, A, B, mid, newton: bool = True):
        """Gradient and (Gauss-)Newton blocks over the free nodes."""
        At = np.transpose(A, (0, 2, 1))
        Bt = np.transpose(B, (0, 2, 1))
        gA = np.einsum("kij,kj->ki", At, f)  # contribution to node k
        gB = np.einsum("kij,kj->ki", Bt, f)  # contribution to node k + 1
        AtA = At @ A
        BtB = Bt @ B
        AtB = At @ B
        if newton:
            S = self.curvature(f, mid)
            AtA = AtA + S
            BtB = BtB + S
            AtB = AtB + S
        # interior nodes 1 .. N-1
        g = gA[1:] + gB[:-1]
        D = AtA[1:] + BtB[:-1]
        O = AtB[1:-1]
        if self.free_end:
            P = self.frame * self.frame_mask
            Bl = B[-1] @ P
            Dl = Bl.T @ Bl
            Ol = A[-1].T @ Bl
            if newton:
                Dl = Dl + P.T @ S[-1] @ P
                Ol = Ol + S[-1] @ P
            g = np.vstack([g, Bl.T @ f[-1]])
            D = np.concatenate([D, Dl[None]])
            O = np.concatenate([O, Ol[None]])
        return g, D, O

    def apply_step(self, nodes, step):
        new = nodes.copy()
        n_int = nodes.shape[0] - 2
        new[1:-1] += step[:n_int]
        if self.free_end:
            new[-1] += self.frame @ (step[n_int] * self.frame_mask)
        return new


@dataclass
class CostResult:
    value: float
    path: PathGrid
    converged: bool
    iterations: int
    grad_norm: float

    @property
    def flag(self) -> str:
        return "" if self.converged else NOT_CONVERGED


STALL_WINDOW = 20


def _descend(problem: _Problem, nodes, gtol: float, max_iter: int):
    """Levenberg-Marquardt damped Newton iteration on the free nodes.

    Falls back on Gauss-Newton blocks whenever the damped Newton matrix is
    not positive definite.
    """
    d = problem.d
    f, A, B, mid = problem.evaluate(nodes)
    cost = 0.5 * float(np.sum(f * f))
    g, D, O = problem.normal_equations(f, A, B, mid)
    lam = 1e-6 * float(np.mean(np.abs(np.trace(D, axis1=1, axis2=2)))) / d
    converged = False
    it = 0
    history = [cost]
    while it < max_iter:
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if gmax < gtol:
            converged = True
            break
        it += 1
        ab = _pack_banded(D, O, d)
        ab[-1] += lam
        try:
            step = solveh_banded(ab, -g.ravel(), lower=False, check_finite=False).reshape(-1, d)
        except (LinAlgError, ValueError):
            lam = max(lam * 10.0, 1e-8)
            continue
        trial = problem.apply_step(nodes, step)
        f_t, A_t, B_t, mid_t = problem.evaluate(trial)
        cost_t = 0.5 * float(np.sum(f_t * f_t))
        if np.isfinite(cost_t) and cost_t < cost:
            nodes, f, A, B, mid, cost = trial, f_t, A_t, B_t, mid_t, cost_t
            g, D, O = problem.normal_equations(f, A, B, mid)
            lam = max(lam * 0.3, 1e-12)
            history.append(cost)
            # a crawl below 1e-10 relative over a stagnation window counts as stationary
            if len(history) > STALL_WINDOW and history[-STALL_WINDOW - 1] - cost < 1e-10 * cost:
                converged = True
                break
        else:
            lam = max(lam * 8.0, 1e-8)
            if lam > 1e20:
                converged = True  # no descent direction left at machine precision
                break
    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    return nodes, cost, converged or gmax < gtol, it, gmax


# ---------------------------------------------------------------------------
# initial paths


def default_nodes(T: float) -> int:
    return int(max(200, math.ceil(10 * T)))


def straight_line(x, y, N: int) -> np.ndarray:
    w = np.linspace(0.0, 1.0, N + 1)[:, None]
    return (1 - w) * np.asarray(x, dtype=float) + w * np.asarray(y, dtype=float)


def flow_path(field: DriftField, s: float, x, y, T: float, N: int, reverse: bool) -> Optional[np.ndarray]:
    """Path that follows the (time-reversed if ``reverse``) frozen flow from ``x`` towards ``y``.

    Integrates ``phi' = -+ b`` from a small displacement of ``x`` toward ``y``
    for as long as it approaches ``y``; the path waits at ``x`` first and
    jumps to ``y`` on the last node.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dist = float(np.linalg.norm(y - x))
    if dist == 0:
        return None
    dt = T / N
    sign = -1.0 if reverse else 1.0
    p = x + 1e-3 * dist * (y - x) / dist
    traj = [p]
    best = np.linalg.norm(p - y)
    sub = 4
    h = dt / sub
    for _ in range(N - 1):
        for _ in range(sub):
            k1 = sign * field(s, p)
            k2 = sign * field(s, p + 0.5 * h * k1)
            k3 = sign * field(s, p + 0.5 * h * k2)
            k4 = sign * field(s, p + h * k3)
            p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        r = np.linalg.norm(p - y)
        if not np.isfinite(r) or r > best + 1e-12:
            break
        traj.append(p)
        best = r
        if r < 1e-3 * dist:
            break
    if best > 0.5 * dist:
        return None  # the flow does not lead toward y
    traj = np.array(traj)
    n_wait = N + 1 - len(traj) - 1
    if n_wait < 1:
        return None
    return np.vstack([np.tile(x, (n_wait, 1)), traj, y[None]])


def _resample(path: PathGrid, T: float, N: int) -> np.ndarray:
    """Stretch ``path`` to horizon ``T`` by waiting at its start first."""
    old_t = path.times + (T - path.horizon)
    t = np.linspace(0.0, T, N + 1)
    out = np.empty((N + 1, path.nodes.shape[1]))
    for j in range(out.shape[1]):
        out[:, j] = np.interp(t, old_t, path.nodes[:, j], left=path.nodes[0, j])
    return out


def minimize_cost(
    field: DriftField,
    s: float,
    x,
    y,
    T: float,
    N: Optional[int] = None,
    plane: Optional[Hyperplane] = None,
    warm: Optional[PathGrid] = None,
    gtol: float = 1e-6,
    max_iter: int = 10_000,
) -> CostResult:
    """Minimal discrete action over paths from ``x`` to ``y`` in time ``T``.

    With ``plane`` the endpoint slides on that hyperplane (``y`` is the
    starting guess).  Several initial paths are descended and the best
    optimum is kept.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    N = default_nodes(T) if N is None else int(N)
    if N < 16:
        raise ValueError("need at least 16 intervals")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if plane is not None:
        y = plane.project(y)
    dt = T / N
    starts = [straight_line(x, y, N)]
    for reverse in (True, False):
        p = flow_path(field, s, x, y, T, N, reverse)
        if p is not None:
            starts.append(p)
    if warm is not None:
        starts.append(_resample(warm, T, N))
    problem = _Problem(field, s, starts[0], dt, plane)
    best = None
    for init in starts:
        init = init.copy()
        init[0] = x
        if plane is not None:
            init[-1] = plane.project(init[-1])
        else:
            init[-1] = y
        nodes, cost, ok, it, gmax = _descend(problem, init, gtol, max_iter)
        if best is None or cost < best[1]:
            best = (nodes, cost, ok, it, gmax)
    nodes, cost, ok, it, gmax = best
    return CostResult(max(cost, 0.0), PathGrid(T, nodes), ok, it, gmax)


@dataclass
class QuasiPotentialResult:
    value: float
    horizon: float
    path: Optional[PathGrid]
    converged: bool
    ladder: list = field(default_factory=list)  # (T, value) per rung
    ladder_settled: bool = True

    @property
    def flags(self) -> list:
        out = []
        if not self.converged:
            out.append(NOT_CONVERGED)
        if not self.ladder_settled:
            out.append(LADDER_UNSETTLED)
        return out

    @property
    def endpoint(self) -> Optional[np.ndarray]:
        return None if self.path is None else self.path.nodes[-1]


def horizon_ladder(t0: float, t_max: float) -> list:
    rungs = [t0]
    while rungs[-1] * 2 <= t_max * (1 + 1e-12):
        rungs.append(rungs[-1] * 2)
    return rungs


def quasi_potential(
    field: DriftField,
    s: float,
    x,
    y,
    t0: Optional[float] = None,
    t_max: float = 320.0,
    plane: Optional[Hyperplane] = None,
    gtol: float = 1e-6,
    max_iter: int = 10_000,
) -> QuasiPotentialResult:
    """``inf_T V^s(x, y, T)`` over a doubling horizon ladder with warm starts.

    ``t0`` defaults to five relaxation times of the frozen flow at ``x``
    (or at the basin minimum when ``x`` is not an equilibrium).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if plane is None and np.array_equal(x, y):
        return QuasiPotentialResult(0.0, 0.0, None, True, [])
    if t0 is None:
        t0 = 5.0 * _relaxation_time(field, s, x)
    rungs = horizon_ladder(min(t0, t_max), t_max)
    ladder = []
    converged = True
    best = None
    warm = None
    for T in rungs:
        res = minimize_cost(field, s, x, y, T, plane=plane, warm=warm, gtol=gtol, max_iter=max_iter)
        ladder.append((T, res.value))
        converged = converged and res.converged
        warm = res.path
        if best is None or res.value <= best.value:
            best = res
    settled = True
    if len(ladder) >= 2:
        a, b = ladder[-2][1], ladder[-1][1]
        settled = abs(a - b) <= 0.01 * max(abs(b), 1e-12)
    return QuasiPotentialResult(best.value, best.path.horizon, best.path, converged, ladder, settled)


def _relaxation_time(field: DriftField, s: float, x) -> float:
    if np.linalg.norm(field(s, x)) < 1e-8:
        try:
            return field.relaxation_time(s, x)
        except LandscapeError:
            pass
    if field.geometry is not None:
        return field.relaxation_time(s, field.geometry.x_minus)
    return 1.0


# ---------------------------------------------------------------------------
# energy profiles


@dataclass
class EnergyProfile:
    """Energy ``e(s)`` to exit one basin, sampled on ``s_j = j / M``.

    Evaluation uses periodic monotone cubic (PCHIP) interpolation.
    """

    values: np.ndarray
    basin: Basin = Basin.MINUS
    flags: Sequence[str] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.basin = Basin.parse(self.basin)
        M = self.values.size
        if M < 4:
            raise ValueError("profile needs at least four phases")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("profile values must be finite and positive")
        self.flags = tuple(self.flags) if self.flags else ("",) * M
        if len(self.flags) != M:
            raise ValueError("one flag entry per phase is required")
        pad = 3
        idx = np.arange(-pad, M + pad)
        self._interp = PchipInterpolator(idx / M, self.values[idx % M])
        self._d1 = self._interp.derivative(1)
        self._d2 = self._interp.derivative(2)

    @classmethod
    def from_function(cls, fn, M: int = 512, basin=Basin.MINUS) -> "EnergyProfile":
        s = np.arange(M) / M
        return cls(np.asarray(fn(s), dtype=float), basin)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def phases(self) -> np.ndarray:
        return np.arange(self.size) / self.size

    @property
    def step(self) -> float:
        return 1.0 / self.size

    def __call__(self, t):
        return self._interp(np.mod(t, 1.0))

    def derivative(self, t, order: int = 1):
        fn = {1: self._d1, 2: self._d2}[order]
        return fn(np.mod(t, 1.0))

    def _extreme(self, sign: float):
        j = int(np.argmin(sign * self.values))
        h = self.step
        res = minimize_scalar(lambda t: sign * float(self(t)), bounds=(j * h - h, j * h + h), method="bounded",
                              options={"xatol": 1e-12})
        t, v = float(res.x) % 1.0, float(self(res.x))
        if sign * v > sign * self.values[j]:
            t, v = j * h, float(self.values[j])
        return t, v

    def argmin(self) -> float:
        return self._extreme(1.0)[0]

    def argmax(self) -> float:
        return self._extreme(-1.0)[0]

    @property
    def inf(self) -> float:
        return self._extreme(1.0)[1]

    @property
    def sup(self) -> float:
        return self._extreme(-1.0)[1]

    def monotone_between_extremes(self, rtol: float = 1e-9) -> bool:
        """Strict monotonicity between extremes with every local extremum global."""
        v = self.values
        scale = max(float(np.ptp(v)), 1e-300)
        dv = np.diff(np.append(v, v[0]))
        tol = rtol * scale
        if np.any(np.abs(dv) <= tol):
            return False
        sgn = np.sign(dv)
        changes = np.flatnonzero(sgn != np.roll(sgn, 1))
        # changes mark local extrema at node index j (between dv[j-1] and dv[j])
        if len(changes) != 2:
            return False
        ext = v[changes]
        lo, hi = v.min(), v.max()
        return bool(np.all(np.isclose(ext, lo, atol=10 * tol) | np.isclose(ext, hi, atol=10 * tol)))


def energy_profile(
    field: DriftField,
    basin,
    M: int = 16,
    t_max: float = 320.0,
    gtol: float = 1e-6,
    max_iter: int = 10_000,
    workers: int = 1,
) -> EnergyProfile:
    """``e(s) = inf_{y on the separatrix} V^s(x_basin, y)`` on ``M`` phases.

    Only explicit hyperplane separatrices are supported; the endpoint slides
    on the hyperplane starting from the saddle.
    """
    basin = Basin.parse(basin)
    g = field.geometry
    if g is None or g.separatrix is None:
        raise LandscapeError("energy profiles need an explicit hyperplane separatrix")
    phases = np.arange(M) / M
    jobs = [(field, float(s), basin, t_max, gtol, max_iter) for s in phases]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_profile_point, jobs))
    else:
        results = [_profile_point(j) for j in jobs]
    values = [r.value for r in results]
    flags = [";".join(r.flags) for r in results]
    return EnergyProfile(np.array(values), basin, flags)


def _profile_point(job) -> QuasiPotentialResult:
    field, s, basin, t_max, gtol, max_iter = job
    g = field.geometry
    start = g.saddle if g.saddle is not None else g.separatrix.project(g.equilibrium(basin))
    return quasi_potential(field, s, g.equilibrium(basin), start, t_max=t_max, plane=g.separatrix,
                           gtol=gtol, max_iter=max_iter)


def well_depth(field: DriftField, s: float, basin) -> float:
    """``inf_{y on the separatrix} U(s, y) - U(s, x_basin)`` for gradient fields."""
    if not field.is_gradient:
        raise LandscapeError("well depth needs a potential")
    g = field.geometry
    if g is None or g.separatrix is None:
        raise LandscapeError("well depth needs an explicit hyperplane separatrix")
    plane = g.separatrix
    x = g.equilibrium(basin)
    origin = g.saddle if g.saddle is not None else plane.project(x)
    Q = plane.tangent_basis()
    if Q.shape[1] == 0:
        barrier = float(field.potential(s, origin))
    else:
        res = minimize(lambda z: float(field.potential(s, origin + Q @ z)), np.zeros(Q.shape[1]), method="BFGS",
                       options={"gtol": 1e-10})
        barrier = float(res.fun)
    return barrier - float(field.potential(s, x))


def lipschitz_constant_bound(field: DriftField, radius: float, n_samples: int = 2000, rng=None) -> float:
    """Upper-bound constant ``Gamma_K`` for ``V^s(x, y) <= Gamma_K |x - y|`` on ``B_radius(0)``.

    ``Gamma_K = 1/2 (1 + kappa + R K + |b(0, 0)|)^2`` with the spatial (``K``)
    and phase (``kappa``) Lipschitz constants estimated by sampling.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = field.dim
    v = rng.standard_normal((n_samples, d))
    v *= (rng.uniform(0, 1, (n_samples, 1)) ** (1 / d)) * radius / np.linalg.norm(v, axis=1, keepdims=True)
    s = rng.uniform(0, 1, n_samples)
    K = max(float(np.linalg.norm(field.jacobian(si, xi), 2)) for si, xi in zip(s, v))
    h = 1e-5
    kappa = max(float(np.linalg.norm(field(si + h, xi) - field(si - h, xi))) / (2 * h) for si, xi in zip(s, v))
    # sampled maxima underestimate suprema; inflate slightly
    K *= 1.1
    kappa *= 1.1
    b00 = float(np.linalg.norm(field(0.0, np.zeros(d))))
    return 0.5 * (1 + kappa + radius * K + b00) ** 2
