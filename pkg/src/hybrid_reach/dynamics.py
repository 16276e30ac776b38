"""Vector fields, running costs, built-in models and Lipschitz estimation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import expr as ex
from .errors import DomainError, EvaluationError, NonPhysicalState
from .geometry import Polytope, convex_hull


class VectorField:
    """Field ``f(X, u)`` with ``n`` states and ``m`` controls.

    Build it from DSL text (:meth:`from_source`) or from a vectorized Python
    callable ``fn(X, U) -> F`` acting on arrays of shape (N, n) and (N, m).
    """

    def __init__(self, n, m, trees=None, fn=None, source=None):
        self.n = int(n)
        self.m = int(m)
        self.trees = trees
        self._fn = fn
        self.source = source

    @classmethod
    def from_source(cls, text, m=None):
        trees = ex.parse(text)
        n = len(trees)
        used = set().union(*(ex.variables(t) for t in trees))
        max_u = max((i for k, i in used if k == "u"), default=0)
        m = max_u if m is None else m
        trees = ex.parse(text, n=n, m=m)
        return cls(n, m, trees=trees, source=text)

    @classmethod
    def from_callable(cls, fn, n, m):
        return cls(n, m, fn=fn)

    def batch(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(X.shape[0], self.m) if self.m else np.zeros((X.shape[0], 0))
        if self._fn is not None:
            with np.errstate(all="ignore"):
                out = np.asarray(self._fn(X, U), dtype=float)
            if not np.all(np.isfinite(out)):
                raise EvaluationError("field evaluated to a non-finite value")
            return out
        return np.stack([ex.evaluate_checked(t, X, U) for t in self.trees], axis=1)

    def __call__(self, X, u=None):
        X = np.asarray(X, dtype=float)
        u = np.zeros(self.m) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
        if X.ndim == 1:
            return self.batch(X[None, :], u[None, :])[0]
        return self.batch(X, np.broadcast_to(u, (X.shape[0], self.m)))

    def state_jacobian(self, X, U):
        """Central-difference Jacobian in ``X``; returns shape (N, n, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float)).reshape(len(X), self.m)
        J = np.empty((len(X), self.n, self.n))
        for i in range(self.n):
            step = 1e-6 * (1.0 + np.abs(X[:, i]))
            Xp, Xm = X.copy(), X.copy()
            Xp[:, i] += step
            Xm[:, i] -= step
            J[:, :, i] = (self.batch(Xp, U) - self.batch(Xm, U)) / (2 * step[:, None])
        return J


class RunningCost:
    """Running cost ``l(X)`` (no control dependence)."""

    def __init__(self, n, tree=None, fn=None, constant=None, source=None):
        self.n = n
        self.tree = tree
        self._fn = fn
        self.constant = constant
        self.source = source

    @classmethod
    def from_source(cls, text, n):
        tree = ex.parse_expr(text, n=n, m=0)
        if not ex.variables(tree):
            val = float(ex.evaluate_checked(tree, np.zeros((1, n)))[0])
            return cls(n, tree=tree, constant=val, source=text)
        return cls(n, tree=tree, source=text)

    @classmethod
    def const(cls, value, n):
        return cls(n, tree=ex.Num(float(value)), constant=float(value), source=repr(float(value)))

    @property
    def is_constant(self):
        return self.constant is not None

    def batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.constant is not None:
            return np.full(len(X), self.constant)
        if self._fn is not None:
            return np.asarray(self._fn(X), dtype=float)
        return ex.evaluate_checked(self.tree, X)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        out = self.batch(X)
        return float(out[0]) if X.ndim == 1 else out

    def gradient(self, X):
        X = np.asarray(X, dtype=float)
        if self.constant is not None:
            return np.zeros_like(X)
        Xb = np.atleast_2d(X)
        G = np.empty_like(Xb)
        for i in range(self.n):
            step = 1e-6 * (1.0 + np.abs(Xb[:, i]))
            Xp, Xm = Xb.copy(), Xb.copy()
            Xp[:, i] += step
            Xm[:, i] -= step
            G[:, i] = (self.batch(Xp) - self.batch(Xm)) / (2 * step)
        return G[0] if X.ndim == 1 else G


@dataclass
class ControlSpec:
    polytope: Polytope

    def __post_init__(self):
        if not self.polytope.contains(np.zeros(self.polytope.dim)):
            raise DomainError("the control set must contain 0")

    @property
    def m(self):
        return self.polytope.dim


@dataclass
class Model:
    name: str
    field: VectorField
    control: ControlSpec
    cost: RunningCost
    region: tuple | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.field.n

    @property
    def m(self):
        return self.field.m

    def describe(self):
        return {"name": self.name, "n": self.n, "m": self.m,
                "control_vertices": self.control.polytope.vertices.tolist()}


def spring_model():
    """Nonlinear spring ``x' = y, y' = -x - 2 x^3 + u`` with ``|u| <= 1``."""
    f = VectorField.from_source("x2 ; -x1 - 2*x1^3 + u1")
    U = ControlSpec(convex_hull([[-1.0], [1.0]]))
    return f, U


MU = 5165.8620912
F_MAX = 3.0


def _orbital_rhs(X, U, mu=MU):
    P, ex_, ey, L = X.T
    u1, u2 = U.T
    cL, sL = np.cos(L), np.sin(L)
    W = 1.0 + ex_ * cL + ey * sL
    if np.any(P <= 0) or np.any(W <= 0):
        raise NonPhysicalState("orbital state needs P > 0 and W > 0")
    a = np.sqrt(P / mu)
    dP = a * (2 * P / W) * u2
    dex = a * (sL * u1 + (cL + (ex_ + cL) / W) * u2)
    dey = a * (-cL * u1 + (sL + (ey + sL) / W) * u2)
    dL = np.sqrt(mu / P) * W**2 / P
    return np.stack([dP, dex, dey, dL], axis=1)


def orbital_model():
    """Coplanar constant-mass orbital transfer in ``(P, ex, ey, L)``.

    Units are Mm and hours; the thrust set is the closed diamond
    ``|u1| + |u2| <= F_MAX``.
    """
    f = VectorField.from_callable(_orbital_rhs, 4, 2)
    U = ControlSpec(convex_hull([[F_MAX, 0], [0, F_MAX], [-F_MAX, 0], [0, -F_MAX]]))
    return f, U


def cartesian_from_orbital(state, mu=MU):
    """Position and velocity ``(r1, r2, v1, v2)`` of an orbital state (or batch)."""
    S = np.atleast_2d(np.asarray(state, dtype=float))
    P, ex_, ey, L = S.T
    W = 1.0 + ex_ * np.cos(L) + ey * np.sin(L)
    if np.any(P <= 0) or np.any(W <= 0):
        raise NonPhysicalState("orbital state needs P > 0 and W > 0")
    k = np.sqrt(mu / P)
    out = np.stack([P / W * np.cos(L), P / W * np.sin(L), -k * (ey + np.sin(L)),
                    k * (ex_ + np.cos(L))], axis=1)
    return out[0] if np.ndim(state) == 1 else out


def _sample_controls(U: Polytope, count, rng):
    V = U.vertices
    w = rng.dirichlet(np.ones(len(V)), size=count)
    return np.vstack([V, w @ V])


def lipschitz_estimate(f: VectorField, box, control: ControlSpec, samples=1000, seed=0):
    """Sampled estimate of ``sup ||D_X f||_inf`` over ``box x U``, times 1.1.

    Parameters
    ----------
    box : (lo, hi)
        Corners of the state box.
    samples : int
        Number of random points (>= 100); box corners are always added.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    rng = np.random.default_rng(seed)
    unit = rng.random((samples, f.n))
    corners = np.array(list(np.ndindex(*(2,) * f.n)), dtype=float) if f.n <= 8 else np.zeros((0, f.n))
    X = lo + np.vstack([unit, corners]) * (hi - lo)
    Us = _sample_controls(control.polytope, len(X), rng) if f.m else np.zeros((len(X), 0))
    idx = rng.integers(0, len(Us), size=len(X))
    U = Us[idx]
    # include every control vertex at each corner as well
    if f.m and len(corners):
        Xc = np.repeat(lo + corners * (hi - lo), len(control.polytope.vertices), axis=0)
        Uc = np.tile(control.polytope.vertices, (len(corners), 1))
        X = np.vstack([X, Xc])
        U = np.vstack([U, Uc])
    J = f.state_jacobian(X, U)
    norms = np.abs(J).sum(axis=2).max(axis=1)
    return 1.1 * float(norms.max())


def load_model(spec):
    """Model by built-in name (``spring``, ``orbital``) or JSON file path.

    The JSON form is ``{n, m, field: [...], cost, control_vertices}``.
    """
    if spec == "spring":
        f, U = spring_model()
        return Model("spring", f, U, RunningCost.const(1.0, 2), region=((-2, -2), (2, 2)))
    if spec == "orbital":
        f, U = orbital_model()
        return Model("orbital", f, U, RunningCost.const(1.0, 4),
                     extras={"cartesian": cartesian_from_orbital})
    path = Path(spec)
    if not path.exists():
        raise DomainError(f"unknown model {spec!r}")
    data = json.loads(path.read_text())
    n, m = int(data["n"]), int(data["m"])
    comps = data["field"]
    text = " ; ".join(comps) if isinstance(comps, list) else comps
    f = VectorField.from_source(text, m=m)
    if f.n != n:
        raise DomainError(f"field has {f.n} components, expected {n}")
    U = ControlSpec(convex_hull(np.asarray(data["control_vertices"], float)))
    cost = RunningCost.from_source(str(data.get("cost", "1")), n)
    region = data.get("region")
    return Model(path.stem, f, U, cost, region=tuple(region) if region else None)


BUILTINS = ("spring", "orbital")


__all__ = [
    "VectorField", "RunningCost", "ControlSpec", "Model", "spring_model", "orbital_model",
    "cartesian_from_orbital", "lipschitz_estimate", "load_model", "MU", "F_MAX", "BUILTINS",
]
