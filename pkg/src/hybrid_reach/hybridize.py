"""Piecewise-affine interpolation of a nonlinear field over the state-control mesh."""
from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .dynamics import ControlSpec, Model, VectorField, lipschitz_estimate
from .errors import SingularVertexMatrix
from .geometry import triangulate_control_polytope
from .mesh import (
    MeshConfig,
    SimplexCell,
    StateControlCell,
    cell,
    column_cells,
    locate,
    locate_simplex,
)


@dataclass(frozen=True, eq=False)
class AffineDynamics:
    """Local law ``X' = A X + B u + c`` of one state-control cell."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    cell_id: str = ""

    def __call__(self, X, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = self.A @ np.asarray(X, dtype=float) + self.c
        return out + self.B @ u if self.B.size else out


def interpolate_values(vertices, values, n):
    """Affine interpolant through ``values`` at simplex ``vertices``.

    Parameters
    ----------
    vertices : ndarray, shape (d + 1, d)
        Simplex vertices in (X, u) space, ``d = n + m``.
    values : ndarray, shape (d + 1, n)
        Field values at the vertices.

    Returns
    -------
    A, B, c
        With ``[A | B] = F M^-1``, where the columns of ``M`` and ``F`` are
        the vertex and value differences to the first vertex.
    """
    V = np.asarray(vertices, dtype=float)
    Fv = np.asarray(values, dtype=float)
    M = (V[1:] - V[0]).T
    Fd = (Fv[1:] - Fv[0]).T
    d = M.shape[0]
    if d == 0:
        return np.zeros((n, 0)), np.zeros((n, 0)), Fv[0].copy()
    try:
        with warnings.catch_warnings():
            # singularity is reported below as a domain error
            warnings.simplefilter("ignore", LinAlgWarning)
            lu = lu_factor(M.T, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularVertexMatrix(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-300):
        raise SingularVertexMatrix("vertex matrix is singular")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond):
        raise SingularVertexMatrix("vertex matrix is singular")
    if cond > 1e12:
        warnings.warn(f"ill-conditioned vertex matrix (cond={cond:.2e})", RuntimeWarning)
    AB = lu_solve(lu, Fd.T).T
    c = Fv[0] - AB @ V[0]
    return AB[:, :n], AB[:, n:], c


def interp_error_bound(L, n, m, h):
    """Uniform interpolation error bound ``4 L (n + m) h / (n + m + 1)``."""
    if L < 0 or h <= 0:
        raise ValueError("need L >= 0 and h > 0")
    return 4.0 * L * (n + m) * h / (n + m + 1)


@dataclass(frozen=True)
class ErrorModel:
    L: float
    h: float
    n: int
    m: int

    @property
    def epsilon(self):
        return interp_error_bound(self.L, self.n, self.m, self.h)


def trajectory_error_bound(err, t, L=None):
    """State and derivative deviation bounds at time ``t``.

    ``err`` is an :class:`ErrorModel` or a bare epsilon (then ``L`` is
    required). Returns ``((eps / L)(e^{Lt} - 1), eps e^{Lt})`` with the
    ``L -> 0`` limit ``(eps t, eps)``.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if isinstance(err, ErrorModel):
        eps, L = err.epsilon, err.L
    else:
        eps = float(err)
    if L is None:
        raise ValueError("L is required with a bare epsilon")
    if L * t < 1e-12:
        return eps * t, eps
    return eps / L * np.expm1(L * t), eps * np.exp(L * t)


class HybridAutomaton:
    """On-the-fly hybrid automaton of a field over the implicit mesh.

    Modes are state cells; each mode owns the affine laws of its column.
    Affine laws and field values at mesh vertices are memoized; vertex values
    are keyed by exact lattice data so neighbors reuse them.
    """

    def __init__(self, field: VectorField, control: ControlSpec, h, max_transitions=10000):
        self.field = field
        self.control = control
        self.cfg = MeshConfig(field.n, field.m, float(h))
        self.controls = triangulate_control_polytope(control.polytope, h)
        self.max_transitions = int(max_transitions)
        self._values = {}
        self._dyn = {}
        self._stack = {}
        self._lock = threading.Lock()
        self.evaluations = 0

    @classmethod
    def from_model(cls, model: Model, h, **kw):
        return cls(model.field, model.control, h, **kw)

    @property
    def n(self):
        return self.cfg.n

    @property
    def m(self):
        return self.cfg.m

    @property
    def h(self):
        return self.cfg.h

    # vertex values
    def vertex_values(self, sc: StateControlCell):
        keys = sc.vertex_keys
        missing = [i for i, k in enumerate(keys) if k not in self._values]
        if missing:
            pts = sc.vertices[missing]
            vals = self.field.batch(pts[:, : self.n], pts[:, self.n:])
            with self._lock:
                for i, v in zip(missing, vals):
                    if keys[i] not in self._values:
                        self._values[keys[i]] = v
                        self.evaluations += 1
        return np.array([self._values[k] for k in keys])

    def interpolate_cell(self, sc: StateControlCell) -> AffineDynamics:
        hit = self._dyn.get(sc.id)
        if hit is not None:
            return hit
        A, B, c = interpolate_values(sc.vertices, self.vertex_values(sc), self.n)
        dyn = AffineDynamics(A, B, c, sc.id)
        with self._lock:
            dyn = self._dyn.setdefault(sc.id, dyn)
        return dyn

    def column(self, q: SimplexCell):
        return column_cells(q, self.controls)

    def mode_dynamics(self, q: SimplexCell):
        return [(sc, self.interpolate_cell(sc)) for sc in self.column(q)]

    def locate(self, X):
        return locate(X, self.cfg)

    def locate_all(self, X, tol=1e-12):
        return locate_simplex(X, self.cfg, tol)

    def _column_stack(self, q):
        hit = self._stack.get(q)
        if hit is None:
            cells = self.column(q)
            R = np.stack([sc.R for sc in cells])
            r = np.stack([sc.r for sc in cells])
            hit = (cells, R, r)
            self._stack[q] = hit
        return hit

    def cell_of(self, q, X, u):
        """Column cell of ``q`` containing ``(X, u)`` (best barycentric margin)."""
        cells, R, r = self._column_stack(q)
        z = np.concatenate([np.asarray(X, float), np.atleast_1d(np.asarray(u, float))])
        margins = (R @ z + r).min(axis=1)
        return cells[int(np.argmax(margins))]

    def f_h(self, X, u, q=None):
        """Hybridized field at one point."""
        X = np.asarray(X, dtype=float)
        q = self.locate(X) if q is None else q
        sc = self.cell_of(q, X, u)
        return self.interpolate_cell(sc)(X, u)

    def f_h_batch(self, X, U):
        """Hybridized field on a batch of points (grouped by state cell)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(len(X), self.m)
        h = self.h
        k = np.floor(X / h).astype(int)
        perm = np.argsort(X - k * h, axis=1, kind="stable")
        out = np.empty_like(X)
        groups = {}
        for i in range(len(X)):
            groups.setdefault((tuple(k[i]), tuple(perm[i])), []).append(i)
        for (kk, pp), idx in groups.items():
            q = cell(kk, pp, h)
            cells, R, r = self._column_stack(q)
            Z = np.hstack([X[idx], U[idx]])
            margins = np.einsum("kij,pj->pki", R, Z) + r[None]
            best = margins.min(axis=2).argmax(axis=1)
            for j, b in zip(idx, best):
                out[j] = self.interpolate_cell(cells[b])(X[j], U[j])
        return out


def hybridize_check(model: Model, h, box, samples=10_000, seed=0, lip_samples=2000):
    """Measured interpolation error against the analytic bound on a box.

    The region of interest is the user-supplied state box times the control
    set; the attainable sets that would define it are not computed.
    """
    box = (np.asarray(box[0], float), np.asarray(box[1], float))
    H = HybridAutomaton.from_model(model, h)
    L = lipschitz_estimate(model.field, box, model.control, samples=lip_samples, seed=seed)
    eps = interp_error_bound(L, model.n, model.m, h)
    rng = np.random.default_rng(seed)
    X = box[0] + rng.random((samples, model.n)) * (box[1] - box[0])
    V = model.control.polytope.vertices
    U = rng.dirichlet(np.ones(len(V)), size=samples) @ V if model.m else np.zeros((samples, 0))
    err = np.abs(model.field.batch(X, U) - H.f_h_batch(X, U)).max()
    return {
        "h": float(h),
        "L": float(L),
        "epsilon": float(eps),
        "measured_sup_error": float(err),
        "bound_satisfied": bool(err <= eps),
        "region": {"lo": box[0].tolist(), "hi": box[1].tolist()},
        "region_note": "state box supplied by the user; attainable sets not computed",
        "samples": int(samples),
    }
