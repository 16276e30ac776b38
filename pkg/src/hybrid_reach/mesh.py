"""Implicit Freudenthal mesh of the state space and its product with the control mesh.

Cells are never stored globally: a state cell is the pair ``(k, phi)`` of a
cube index ``k`` and a permutation ``phi`` of the axes, and everything else
(vertices, facets, neighbors) is derived in closed form. The simplex is

    {x : 0 <= r[phi[0]] <= ... <= r[phi[n-1]] <= h},   r = x - k h.

Vertex ``p`` (``p = 0..n``) has coordinate ``a + h`` on the axes
``phi[p:]`` and ``a`` elsewhere, with ``a = k h``; the facet with index ``p``
is the one opposite vertex ``p``. Permutations are 0-based internally and
printed 1-based in cell ids.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateProduct, PointOutsideCell
from .geometry import Polytope, convex_hull
from .flow import FeedbackControl

TOL = 1e-9


@dataclass(frozen=True)
class MeshConfig:
    n: int
    m: int
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("mesh step h must be positive")
        if self.n < 1 or self.m < 0:
            raise ValueError("need n >= 1 and m >= 0")

    @property
    def origin(self):
        return np.zeros(self.n + self.m)


class SimplexCell:
    """State cell ``D_q`` identified by cube index and axis permutation."""

    __slots__ = ("cube", "perm", "h", "n", "lattice", "vertices", "R", "r", "_hash")

    def __init__(self, cube, perm, h):
        self.cube = tuple(int(c) for c in cube)
        self.perm = tuple(int(p) for p in perm)
        self.h = float(h)
        n = self.n = len(self.cube)
        if sorted(self.perm) != list(range(n)):
            raise ValueError(f"invalid permutation {perm}")
        k = np.array(self.cube)
        lat = np.tile(k, (n + 1, 1))
        for p in range(n + 1):
            for i in range(p, n):
                lat[p, self.perm[i]] += 1
        self.lattice = lat
        self.vertices = lat * self.h
        # barycentric rows: beta_0 = r_phi0 / h, beta_j = (r_phi_j - r_phi_{j-1}) / h,
        # beta_n = 1 - r_phi_{n-1} / h, with r = x - k h
        R = np.zeros((n + 1, n))
        R[0, self.perm[0]] = 1.0
        for j in range(1, n):
            R[j, self.perm[j]] = 1.0
            R[j, self.perm[j - 1]] = -1.0
        R[n, self.perm[n - 1]] = -1.0
        R /= self.h
        off = -R @ (k * self.h)
        off[n] += 1.0
        self.R = R
        self.r = off
        self._hash = hash((self.cube, self.perm, self.h))

    # identity
    def __eq__(self, other):
        return (isinstance(other, SimplexCell) and self.cube == other.cube
                and self.perm == other.perm and self.h == other.h)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"SimplexCell({self.id})"

    @property
    def id(self) -> str:
        k = ",".join(str(c) for c in self.cube)
        p = ",".join(str(i + 1) for i in self.perm)
        return f"k=[{k}];phi=[{p}]"

    @property
    def key(self):
        return (self.cube, self.perm)

    @property
    def diameter(self) -> float:
        return math.sqrt(self.n) * self.h

    @property
    def volume(self) -> float:
        return self.h**self.n / math.factorial(self.n)

    # geometry
    def barycentric(self, x):
        return self.R @ np.asarray(x, dtype=float) + self.r

    def contains(self, x, tol=TOL) -> bool:
        return bool(np.all(self.barycentric(x) >= -tol))

    def polytope(self) -> Polytope:
        return convex_hull(self.vertices)

    def facet_vertices(self, j):
        return np.delete(self.vertices, j, axis=0)

    def neighbor(self, j) -> "SimplexCell":
        """Cell sharing the facet opposite vertex ``j``."""
        n, k, phi = self.n, list(self.cube), list(self.perm)
        if n == 1:
            k[0] += -1 if j == 0 else 1
            return cell(k, phi, self.h)
        if j == 0:
            k[phi[0]] -= 1
            return cell(k, phi[1:] + phi[:1], self.h)
        if j == n:
            k[phi[n - 1]] += 1
            return cell(k, phi[n - 1:] + phi[:n - 1], self.h)
        phi[j - 1], phi[j] = phi[j], phi[j - 1]
        return cell(k, phi, self.h)

    def sorted_state_order(self):
        """Vertex indices ordered by increasing lattice coordinate sum.

        The order is induced by a global function of the lattice point, so two
        cells order the vertices of a shared face identically.
        """
        return list(range(self.n, -1, -1))


@lru_cache(maxsize=200_000)
def _cell_cached(cube, perm, h):
    return SimplexCell(cube, perm, h)


def cell(cube, perm, h) -> SimplexCell:
    """Memoized cell constructor."""
    return _cell_cached(tuple(int(c) for c in cube), tuple(int(p) for p in perm), float(h))


_ID_RE = re.compile(r"k=\[([^\]]*)\];phi=\[([^\]]*)\]")


def cell_from_id(text, h) -> SimplexCell:
    mt = _ID_RE.fullmatch(text.strip())
    if not mt:
        raise ValueError(f"malformed cell id {text!r}")
    k = [int(v) for v in mt.group(1).split(",")]
    phi = [int(v) - 1 for v in mt.group(2).split(",")]
    return cell(k, phi, h)


def locate_cubes(X, cfg: MeshConfig, tol=1e-12):
    """Cubes whose closure contains ``X``.

    A coordinate lying on a grid plane (relative tolerance ``tol``) yields
    both adjacent cube indices, ``x/h`` first and ``x/h - 1`` second.
    """
    X = np.asarray(X, dtype=float)
    options = []
    for x in X:
        t = x / cfg.h
        nearest = round(t)
        if abs(t - nearest) <= tol * max(1.0, abs(t)):
            options.append((int(nearest), int(nearest) - 1))
        else:
            options.append((int(math.floor(t)),))
    return [tuple(c) for c in itertools.product(*options)]


def locate_simplex(X, cfg: MeshConfig, tol=1e-12):
    """All state cells whose closure contains ``X``.

    Within each candidate cube the permutation sorting the residuals
    ``x - k h`` ascending is used; residuals equal within ``tol * h`` give
    every ordering of the tied axes. Per cube, the lexicographically smallest
    permutation (the stable sort) comes first.
    """
    X = np.asarray(X, dtype=float)
    h = cfg.h
    out = []
    for k in locate_cubes(X, cfg, tol):
        res = X - np.array(k) * h
        order = list(np.argsort(res, kind="stable"))
        groups, cur = [], [order[0]]
        for a, b in zip(order[:-1], order[1:]):
            if res[b] - res[a] <= tol * h * max(1.0, abs(res[b]) / h):
                cur.append(b)
            else:
                groups.append(cur)
                cur = [b]
        groups.append(cur)
        perms = []
        for choice in itertools.product(*[itertools.permutations(sorted(g)) for g in groups]):
            perms.append(tuple(int(i) for grp in choice for i in grp))
        for phi in sorted(set(perms)):
            out.append(cell(k, phi, h))
    return out


def locate(X, cfg: MeshConfig, tol=1e-12) -> SimplexCell:
    """Canonical (first-listed) cell containing ``X``."""
    return locate_simplex(X, cfg, tol)[0]


# -- product with the control mesh ------------------------------------------------

def _monotone_paths(n, m):
    """Lattice paths from (0, 0) to (n, m) with unit steps, as step strings."""
    for ups in itertools.combinations(range(n + m), n):
        ups = set(ups)
        yield tuple(0 if s in ups else 1 for s in range(n + m))


class StateControlCell:
    """Simplex ``Delta_q'`` of the state-control mesh inside a column.

    ``path`` lists the vertices as pairs ``(i, j)``: sorted state vertex ``i``
    of the state cell paired with local control vertex ``j`` of the control
    simplex. The H-representation is ``M1 @ X + M2 @ u + d >= 0``.
    """

    __slots__ = ("state_cell", "control_index", "path", "vertices", "vertex_keys",
                 "state_ids", "control_ids", "M1", "M2", "d", "R", "r", "ctrl_points")

    def __init__(self, state_cell: SimplexCell, control_index, control_ids, ctrl_points, path):
        self.state_cell = state_cell
        self.control_index = int(control_index)
        self.path = tuple(path)
        self.control_ids = tuple(int(c) for c in control_ids)
        self.ctrl_points = np.asarray(ctrl_points, dtype=float)
        order = state_cell.sorted_state_order()
        self.state_ids = tuple(order)
        sv = state_cell.vertices
        verts, keys = [], []
        for i, j in self.path:
            p = order[i]
            verts.append(np.concatenate([sv[p], self.ctrl_points[j]]))
            keys.append((tuple(int(v) for v in state_cell.lattice[p]), self.control_ids[j]))
        self.vertices = np.array(verts)
        self.vertex_keys = tuple(keys)
        n = state_cell.n
        E = (self.vertices[1:] - self.vertices[0]).T
        if abs(np.linalg.det(E / np.abs(E).max(axis=0).clip(1e-300))) <= 1e-12:
            raise DegenerateProduct(f"degenerate product cell over {state_cell.id}")
        Einv = np.linalg.inv(E)
        R = np.vstack([-Einv.sum(axis=0), Einv])
        r = -R @ self.vertices[0]
        r[0] += 1.0
        self.R, self.r = R, r
        self.M1, self.M2, self.d = R[:, :n], R[:, n:], r

    @property
    def id(self) -> str:
        steps = "".join("x" if s == 0 else "u" for s in _steps(self.path))
        return f"{self.state_cell.id};U={self.control_index};path={steps}"

    @property
    def n(self):
        return self.state_cell.n

    @property
    def m(self):
        return self.ctrl_points.shape[1]

    def contains(self, X, u, tol=TOL) -> bool:
        z = np.concatenate([np.asarray(X, float), np.atleast_1d(np.asarray(u, float))])
        return bool(np.all(self.R @ z + self.r >= -tol))

    def volume(self) -> float:
        E = self.vertices[1:] - self.vertices[0]
        return abs(float(np.linalg.det(E))) / math.factorial(len(E))

    @property
    def diameter(self) -> float:
        v = self.vertices
        d = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def transversals(self):
        """Choices of one path vertex per state vertex.

        Returns a list of tuples ``(j_0, ..., j_n)`` of local control indices;
        each spans an n-face of the cell projecting onto the whole state cell.
        """
        runs = [[] for _ in range(self.n + 1)]
        for i, j in self.path:
            runs[i].append(j)
        return [tuple(c) for c in itertools.product(*runs)]

    def feedback(self, choice) -> FeedbackControl:
        """Affine feedback ``u = F X + g`` riding the n-face ``choice``."""
        sc = self.state_cell
        Rs, rs = sc.R[list(self.state_ids)], sc.r[list(self.state_ids)]
        C = self.ctrl_points[list(choice)]
        F = C.T @ Rs
        g = C.T @ rs
        gids = tuple(self.control_ids[j] for j in choice)
        return FeedbackControl(F, g, source=(self.id, gids), key=(sc.key, gids))


def _steps(path):
    return [0 if b[0] > a[0] else 1 for a, b in zip(path[:-1], path[1:])]


def column_cells(q: SimplexCell, controls):
    """Cells of ``D_q x U`` (staircase triangulation per control simplex).

    Each product ``D_q x U_j`` of two simplices is split into the
    ``C(n+m, n)`` staircase simplices defined by the vertex orders (state
    vertices by lattice coordinate sum, control vertices by global id). Both
    orders are global, so the cells are conforming across columns and no new
    vertices are introduced.
    """
    return list(_column_cached(q, controls))


_COLUMN_CACHE = {}


def _column_cached(q, controls):
    key = (q, id(controls))
    hit = _COLUMN_CACHE.get(key)
    if hit is not None and hit[0] is controls:
        return hit[1]
    n = q.n
    m = controls.m
    cells = []
    for ci, ids in enumerate(controls.cells):
        pts = controls.points[list(ids)]
        for steps in _monotone_paths(n, m):
            path = [(0, 0)]
            for s in steps:
                i, j = path[-1]
                path.append((i + 1, j) if s == 0 else (i, j + 1))
            cells.append(StateControlCell(q, ci, ids, pts, path))
    out = tuple(cells)
    if len(_COLUMN_CACHE) > 100_000:
        _COLUMN_CACHE.clear()
    _COLUMN_CACHE[key] = (controls, out)
    return out


@dataclass
class ControlSlice:
    """Control polytope ``U_q'(X)`` with the feedbacks anchoring its vertices."""

    polytope: Polytope
    anchors: list
    values: np.ndarray


def control_polytope(sc: StateControlCell, X, tol=TOL) -> ControlSlice:
    """Slice ``{u : M2 u + (M1 X + d) >= 0}`` of a state-control cell.

    Vertices are the values at ``X`` of the transversal feedbacks; duplicates
    (which appear when ``X`` is on the boundary of the state cell) are merged,
    keeping the first anchor.
    """
    X = np.asarray(X, dtype=float)
    if not sc.state_cell.contains(X, tol):
        raise PointOutsideCell(f"{X.tolist()} not in {sc.state_cell.id}")
    fbs = [sc.feedback(c) for c in sc.transversals()]
    vals = np.array([fb(X) for fb in fbs])
    poly = convex_hull(vals, tol, allow_point=True)
    anchors, kept = [], []
    scale = max(1.0, float(np.abs(sc.ctrl_points).max()))
    for fb, v in zip(fbs, vals):
        on_vertex = np.min(np.linalg.norm(poly.vertices - v, axis=1)) <= 1e2 * tol * scale
        if on_vertex and not any(np.linalg.norm(v - w) <= 1e2 * tol * scale for w in kept):
            anchors.append(fb)
            kept.append(v)
    return ControlSlice(poly, anchors, np.array(kept))


@dataclass(frozen=True)
class Guard:
    source: SimplexCell
    target: SimplexCell
    facet: int
    face: Polytope

    def to_json(self):
        return {"from": self.source.id, "to": self.target.id, "facet": self.facet,
                "face": self.face.to_json()}


def guards_of(q: SimplexCell):
    """The ``n + 1`` guards of a state cell, one per facet (identity reset)."""
    out = []
    for j in range(q.n + 1):
        face = convex_hull(q.facet_vertices(j), allow_point=True)
        out.append(Guard(q, q.neighbor(j), j, face))
    return out


def shared_facet(q: SimplexCell, q2: SimplexCell):
    """Facet index of ``q`` shared with ``q2``, or ``None`` if not adjacent."""
    for j in range(q.n + 1):
        if q.neighbor(j) == q2:
            return j
    return None
