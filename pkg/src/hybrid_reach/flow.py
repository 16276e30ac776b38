"""Closed-loop affine flows inside a simplex: exact solutions and exit events.

Cells are only used through their barycentric rows ``beta(X) = R @ X + r``,
which are nonnegative exactly on the closed simplex. ``beta`` is
dimensionless, so event tolerances do not depend on the problem scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import EventSearchFailed, PointNotOnCellClosure

ACTIVE_TOL = 1e-9
OUTSIDE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Affine feedback ``u = F @ X + g``.

    ``source`` records the state-control cell and the control vertices the
    feedback interpolates; ``key`` is exact lattice data used to deduplicate.
    """

    F: np.ndarray
    g: np.ndarray
    source: tuple = ()
    key: tuple = ()

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.F.T + self.g if X.ndim == 2 else self.F @ X + self.g

    @classmethod
    def constant(cls, u, n):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(np.zeros((len(u), n)), u, source=("constant",), key=("constant", tuple(u)))

    def to_json(self):
        return {"F": self.F.tolist(), "g": self.g.tolist(), "source": _jsonable(self.source)}


def _jsonable(obj):
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Autonomous affine field ``X' = M @ X + b``."""

    M: np.ndarray
    b: np.ndarray

    @classmethod
    def from_dynamics(cls, A, B, c, fb: FeedbackControl):
        A, B, c = np.asarray(A, float), np.asarray(B, float), np.asarray(c, float)
        if B.size == 0:
            return cls(A.copy(), c.copy())
        return cls(A + B @ fb.F, B @ fb.g + c)

    @property
    def n(self):
        return len(self.b)

    def velocity(self, X):
        return self.M @ np.asarray(X, float) + self.b

    def augmented(self):
        n = self.n
        Z = np.zeros((n + 1, n + 1))
        Z[:n, :n] = self.M
        Z[:n, n] = self.b
        return Z

    def propagator(self, t):
        """Matrix ``P`` with ``[X(t); 1] = P @ [X(0); 1]``."""
        return expm(t * self.augmented())


def affine_flow(loop: ClosedLoop, X0, t):
    """Exact solution of ``X' = M X + b`` at time ``t`` (scalar or array)."""
    X0 = np.asarray(X0, dtype=float)
    z0 = np.append(X0, 1.0)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    aug = loop.augmented()
    out = np.array([(expm(s * aug) @ z0)[:-1] for s in ts])
    return out[0] if np.ndim(t) == 0 else out


def reverse(loop: ClosedLoop) -> ClosedLoop:
    return ClosedLoop(-loop.M, -loop.b)


def _rows(cell):
    if hasattr(cell, "R"):
        return np.asarray(cell.R, float), np.asarray(cell.r, float)
    R, r = cell
    return np.asarray(R, float), np.asarray(r, float)


def enters_cell(cell, X0, loop: ClosedLoop, tol=ACTIVE_TOL) -> bool:
    """Whether the trajectory from ``X0`` stays in the closed cell for a while.

    Every facet function ``beta_i`` active at ``X0`` is expanded in time: its
    derivatives are ``R_i M^(j-1) (M X0 + b)`` for ``j = 1..n``. The first
    nonzero one must be positive. When all ``n`` vanish, ``beta_i`` is
    identically zero along the trajectory (Cayley-Hamilton), so the motion
    slides in the facet and stays in the closed cell.
    """
    R, r = _rows(cell)
    X0 = np.asarray(X0, dtype=float)
    beta = R @ X0 + r
    if np.any(beta < -tol):
        raise PointNotOnCellClosure(f"point outside cell (min barycentric {beta.min():.3e})")
    active = np.flatnonzero(beta <= tol)
    if len(active) == 0:
        return True
    n = len(X0)
    v = loop.velocity(X0)
    mnorm = np.linalg.norm(loop.M, 2)
    vnorm = np.linalg.norm(v)
    for i in active:
        w = v
        rn = np.linalg.norm(R[i])
        for j in range(n):
            d = float(R[i] @ w)
            if abs(d) > 1e-10 * rn * vnorm * max(1.0, mnorm) ** j:
                if d < 0:
                    return False
                break
            w = loop.M @ w
    return True


@dataclass
class ExitRecord:
    """First exit of a closed-loop trajectory through a facet of the cell."""

    X_f: np.ndarray
    face: int
    T: float
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    states: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


class StillInside:
    """Marker returned when no exit happens before ``t_max``."""

    def __init__(self, t_max, X_end):
        self.t_max = t_max
        self.X_end = X_end

    def __bool__(self):
        return False

    def __repr__(self):
        return f"StillInside(t_max={self.t_max})"


def _step_size(cell, loop, X0, h):
    if h is None:
        h = float(np.linalg.norm(_cell_extent(cell)))
    v = np.linalg.norm(loop.velocity(X0))
    dt = h / (10.0 * v + 1.0)
    mn = np.linalg.norm(loop.M, 2)
    if mn > 0:
        dt = min(dt, 0.1 / mn)
    return dt


def _cell_extent(cell):
    if hasattr(cell, "h"):
        return np.array([cell.h])
    R, _ = _rows(cell)
    return np.array([1.0 / max(np.abs(R).max(), 1e-300)])


def out_cell(cell, X0, loop: ClosedLoop, t_max=100.0, h=None, keep_samples=False, chunk=64):
    """Exit point of the closed-loop trajectory from ``cell``.

    The trajectory is sampled with a speed-scaled step; the first sample
    with a negative barycentric coordinate brackets the exit, which is then
    refined by bisection to ``1e-12`` in time. The returned point is the
    inside end of the final bracket.

    Returns
    -------
    ExitRecord or StillInside
    """
    R, r = _rows(cell)
    X0 = np.asarray(X0, dtype=float)
    n = len(X0)
    dt = _step_size(cell, loop, X0, h)
    aug = loop.augmented()
    step = expm(dt * aug)
    powers = np.empty((chunk, n + 1, n + 1))
    P = np.eye(n + 1)
    for k in range(chunk):
        P = step @ P
        powers[k] = P
    z = np.append(X0, 1.0)
    t0 = 0.0
    all_t, all_x = [np.array([0.0])], [X0[None, :]]
    while t0 < t_max:
        Z = powers @ z
        Xs = Z[:, :n]
        betas = Xs @ R.T + r
        bad = np.flatnonzero(betas.min(axis=1) < -OUTSIDE_TOL)
        if len(bad):
            k = int(bad[0])
            lo_z = z if k == 0 else Z[k - 1]
            t_lo = t0 + k * dt
            if keep_samples and k > 0:
                all_t.append(t0 + dt * np.arange(1, k + 1))
                all_x.append(Xs[:k])
            if t_lo >= t_max:
                break
            rec = _bisect(R, r, aug, lo_z, t_lo, dt, all_t, all_x, keep_samples)
            if rec.T <= t_max:
                return rec
            break
        if keep_samples:
            all_t.append(t0 + dt * np.arange(1, chunk + 1))
            all_x.append(Xs)
        z = Z[-1]
        t0 += chunk * dt
        vel = aug @ z
        if np.linalg.norm(vel[:n]) <= 1e-14 * max(1.0, np.linalg.norm(z[:n])):
            break
    # sampling runs in whole chunks; report the state at t_max itself
    return StillInside(t_max, (expm(t_max * aug) @ np.append(X0, 1.0))[:n])


def _bisect(R, r, aug, z_lo, t_lo, width, all_t, all_x, keep_samples):
    n = len(z_lo) - 1
    a, b = 0.0, width
    for _ in range(200):
        if b - a <= 1e-12:
            break
        mid = 0.5 * (a + b)
        zm = expm(mid * aug) @ z_lo
        if (R @ zm[:n] + r).min() < -OUTSIDE_TOL:
            b = mid
        else:
            a = mid
    else:
        raise EventSearchFailed("exit bisection did not converge")
    z_in = expm(a * aug) @ z_lo
    z_out = expm(b * aug) @ z_lo
    face = int(np.argmin(R @ z_out[:n] + r))
    # snap the inside end of the bracket onto the exit facet
    row = R[face]
    X_f = z_in[:n] - (row @ z_in[:n] + r[face]) * row / (row @ row)
    T = t_lo + a
    if keep_samples:
        times = np.concatenate(all_t + [np.array([T])])
        states = np.vstack(all_x + [X_f[None, :]])
    else:
        times, states = np.array([0.0, T]), np.vstack([all_x[0], X_f[None, :]])
    return ExitRecord(X_f, face, T, times, states)


def sample_flow(loop: ClosedLoop, X0, T, count=50):
    ts = np.linspace(0.0, T, max(2, count))
    return ts, affine_flow(loop, X0, ts)
