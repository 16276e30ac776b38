"""Convex polytopes, simplices and the control-space triangulation.

A :class:`Polytope` keeps both a vertex list and an inequality list
``A x + b <= 0``. Polytopes that do not span their ambient space keep an
explicit affine frame (origin plus orthonormal basis) and carry the
equalities of that frame as pairs of opposite inequalities.

Tolerances are absolute after scaling by the polytope diameter, so unit-scale
and large-scale problems go through the same predicates.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .errors import (
    AllPointsCoincident,
    DegenerateSimplex,
    DimensionMismatch,
    EmptyInput,
    UnboundedPolytope,
)

TOL = 1e-9


def _scale_of(points):
    points = np.atleast_2d(points)
    if len(points) > 1:
        lo, hi = points.min(axis=0), points.max(axis=0)
        diam = float(np.linalg.norm(hi - lo))
        if diam > 0:
            return diam
    return max(1.0, float(np.abs(points).max(initial=0.0)))


def dedupe_points(points, tol=TOL):
    """Merge points closer than ``tol`` times the set scale, keeping the first."""
    points = np.asarray(points, dtype=float)
    if len(points) <= 1:
        return points.copy()
    r = tol * _scale_of(points)
    tree = cKDTree(points)
    keep = np.ones(len(points), dtype=bool)
    for i, j in sorted(tree.query_pairs(r)):
        if keep[i] and keep[j]:
            keep[j] = False
    return points[keep]


def _lexsorted(points):
    if len(points) == 0:
        return points
    order = np.lexsort(points.T[::-1])
    return points[order]


@dataclass(frozen=True, eq=False)
class Polytope:
    """Bounded convex polytope with vertex and inequality descriptions.

    Attributes
    ----------
    dim : int
        Ambient dimension.
    vertices : ndarray, shape (k, dim)
        Vertices, lexicographically sorted.
    A, b : ndarray
        Inequalities ``A @ x + b <= 0``; rows of ``A`` have unit norm.
    origin : ndarray, shape (dim,)
        A point of the affine hull.
    basis : ndarray, shape (dim, r)
        Orthonormal basis of the affine hull directions; ``r`` is the
        affine dimension.
    """

    dim: int
    vertices: np.ndarray
    A: np.ndarray
    b: np.ndarray
    origin: np.ndarray
    basis: np.ndarray
    _scale: float = field(default=1.0, repr=False)

    @property
    def affine_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def is_full_dim(self) -> bool:
        return self.affine_dim == self.dim

    @property
    def halfspaces(self):
        return [(a.copy(), float(c)) for a, c in zip(self.A, self.b)]

    @property
    def scale(self) -> float:
        return self._scale

    @property
    def diameter(self) -> float:
        v = self.vertices
        if len(v) < 2:
            return 0.0
        d = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def centroid(self):
        return self.vertices.mean(axis=0)

    def volume(self) -> float:
        """Lebesgue measure in the affine hull (0 for a single point)."""
        r = self.affine_dim
        if r == 0:
            return 0.0
        y = (self.vertices - self.origin) @ self.basis
        if r == 1:
            return float(y.max() - y.min())
        return float(ConvexHull(y).volume)

    def contains(self, x, tol=TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionMismatch(f"point of dim {x.shape} vs polytope dim {self.dim}")
        return bool(np.all(self.A @ x + self.b <= tol * self._scale))

    def contains_many(self, X, tol=TOL):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all(X @ self.A.T + self.b <= tol * self._scale, axis=1)

    def to_json(self):
        return {
            "dim": int(self.dim),
            "vertices": [[float(c) for c in v] for v in self.vertices],
            "halfspaces": [
                {"normal": [float(c) for c in a], "offset": float(o)}
                for a, o in zip(self.A, self.b)
            ],
        }

    @classmethod
    def from_json(cls, data):
        dim = int(data["dim"])
        verts = data.get("vertices") or []
        if verts:
            pts = np.asarray(verts, dtype=float).reshape(-1, dim)
            return convex_hull(pts, allow_point=True)
        hs = data.get("halfspaces") or []
        if not hs:
            raise EmptyInput("polytope JSON has neither vertices nor halfspaces")
        A = np.array([h["normal"] for h in hs], dtype=float).reshape(-1, dim)
        b = np.array([h["offset"] for h in hs], dtype=float)
        return from_halfspaces(A, b)

    def translate(self, shift):
        shift = np.asarray(shift, dtype=float)
        return convex_hull(self.vertices + shift, allow_point=True)


def _affine_frame(points, tol):
    origin = points.mean(axis=0)
    centered = points - origin
    _, s, vt = np.linalg.svd(centered, full_matrices=True)
    scale = _scale_of(points)
    thresh = tol * scale * max(1.0, math.sqrt(len(points)))
    r = int(np.sum(s > thresh))
    return origin, vt[:r].T, vt[r:].T, scale


def _point_polytope(x):
    x = np.asarray(x, dtype=float)
    d = len(x)
    eye = np.eye(d)
    A = np.vstack([eye, -eye])
    b = np.concatenate([-x, x])
    return Polytope(d, x[None, :].copy(), A, b, x.copy(), np.zeros((d, 0)),
                    max(1.0, float(np.abs(x).max(initial=0.0))))


def convex_hull(points, tol=TOL, allow_point=False) -> Polytope:
    """Convex hull of a finite point set.

    Parameters
    ----------
    points : array_like, shape (N, d)
    tol : float
        Relative tolerance used for rank decisions and vertex pruning.
    allow_point : bool
        Return a single-point polytope instead of raising when all the
        points coincide.

    Returns
    -------
    Polytope
        Minimal vertex set and unit-normal inequalities. Lower-dimensional
        hulls keep their affine frame.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise EmptyInput("no points given")
    pts = np.atleast_2d(pts)
    if pts.ndim != 2:
        raise DimensionMismatch("points must be a 2-D array")
    if not np.all(np.isfinite(pts)):
        raise EmptyInput("non-finite coordinates")
    d = pts.shape[1]
    pts = dedupe_points(pts, tol)
    if len(pts) == 1:
        if allow_point:
            return _point_polytope(pts[0])
        raise AllPointsCoincident("all points coincide")

    origin, basis, comp, scale = _affine_frame(pts, tol)
    r = basis.shape[1]
    if r == 0:
        if allow_point:
            return _point_polytope(pts.mean(axis=0))
        raise AllPointsCoincident("all points coincide")
    y = (pts - origin) @ basis

    if r == 1:
        idx = np.array(sorted({int(np.argmin(y[:, 0])), int(np.argmax(y[:, 0]))}))
        eq_normals = np.array([[-1.0], [1.0]])
        eq_offsets = np.zeros(2)
    else:
        try:
            hull = ConvexHull(y)
        except QhullError:
            hull = ConvexHull(y, qhull_options="QJ")
        idx = np.unique(hull.vertices)
        eq_normals = hull.equations[:, :-1]
        eq_offsets = hull.equations[:, -1]

    # Inequalities in span coordinates, retightened on the candidate vertices.
    norms = np.linalg.norm(eq_normals, axis=1)
    eq_normals = eq_normals / norms[:, None]
    cand = y[idx]
    eq_offsets = -(cand @ eq_normals.T).max(axis=0)
    key = np.round(np.hstack([eq_normals, (eq_offsets / scale)[:, None]]) / (1e3 * tol))
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    eq_normals, eq_offsets = eq_normals[first], eq_offsets[first]

    # Keep only points tight on facets whose normals span the hull.
    slack = cand @ eq_normals.T + eq_offsets
    keep = []
    for i in range(len(cand)):
        tight = np.abs(slack[i]) <= 1e2 * tol * scale
        if tight.sum() >= r and np.linalg.matrix_rank(eq_normals[tight], tol=1e-6) == r:
            keep.append(i)
    verts = pts[idx[keep]]

    A_full = eq_normals @ basis.T
    b_full = eq_offsets - A_full @ origin
    if comp.shape[1]:
        A_eq = comp.T
        b_eq = -A_eq @ origin
        A_full = np.vstack([A_full, A_eq, -A_eq])
        b_full = np.concatenate([b_full, b_eq, -b_eq])
    return Polytope(d, _lexsorted(verts), A_full, b_full, origin, basis, scale)


@dataclass(frozen=True, eq=False)
class Simplex:
    """Nondegenerate simplex given by ``dim + 1`` vertices.

    ``ids`` optionally records global vertex indices when the simplex is part
    of a triangulation.
    """

    vertices: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        object.__setattr__(self, "vertices", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1] + 1:
            raise DegenerateSimplex(f"need dim+1 vertices, got shape {v.shape}")
        E = v[1:] - v[0]
        rn = np.linalg.norm(E, axis=1)
        if np.any(rn == 0) or abs(np.linalg.det(E / rn[:, None])) <= 1e-12:
            raise DegenerateSimplex("vertices are affinely dependent")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def volume(self) -> float:
        E = self.vertices[1:] - self.vertices[0]
        return abs(float(np.linalg.det(E))) / math.factorial(self.dim)

    @property
    def diameter(self) -> float:
        v = self.vertices
        d = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def barycentric_map(self):
        """Return ``(R, r)`` with barycentric coordinates ``R @ x + r``."""
        return barycentric_map(self.vertices)

    def barycentric(self, x):
        R, r = self.barycentric_map()
        return R @ np.asarray(x, dtype=float) + r


def barycentric_map(vertices):
    """Affine map ``x -> R x + r`` giving barycentric coordinates.

    Row ``i`` is the coordinate attached to vertex ``i``; it vanishes on the
    facet opposite that vertex.
    """
    v = np.asarray(vertices, dtype=float)
    E = (v[1:] - v[0]).T
    Einv = np.linalg.inv(E)
    R = np.vstack([-Einv.sum(axis=0), Einv])
    r = -R @ v[0]
    r[0] += 1.0
    return R, r


def simplex_to_halfspaces(s: Simplex) -> Polytope:
    """Inequality description of a simplex, facet ``i`` opposite vertex ``i``.

    Rows are the negated barycentric coordinate maps, so each row is tight on
    every vertex except the one it is attached to (where it equals -1).
    """
    if not isinstance(s, Simplex):
        s = Simplex(np.asarray(s, dtype=float))
    R, r = s.barycentric_map()
    d = s.dim
    return Polytope(d, _lexsorted(s.vertices.copy()), -R, -r, s.vertices.mean(axis=0),
                    np.eye(d), _scale_of(s.vertices))


def from_halfspaces(A, b, tol=TOL) -> Polytope:
    """Polytope ``{x : A x + b <= 0}`` by vertex enumeration."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    d = A.shape[1]
    _check_bounded(A, b)
    pts = _enumerate_vertices(A, b, tol)
    if len(pts) == 0:
        raise EmptyInput("halfspace system is infeasible")
    return convex_hull(pts, tol, allow_point=True)


def _check_bounded(A, b):
    from scipy.optimize import linprog

    d = A.shape[1]
    for i in range(d):
        for sgn in (1.0, -1.0):
            c = np.zeros(d)
            c[i] = -sgn
            res = linprog(c, A_ub=A, b_ub=-b, bounds=[(None, None)] * d, method="highs")
            if res.status == 3:
                raise UnboundedPolytope("halfspace system is unbounded")
            if res.status == 2:
                raise EmptyInput("halfspace system is infeasible")


def _enumerate_vertices(A, b, tol=TOL):
    """Brute-force vertex enumeration of ``{y : A y + b <= 0}`` in small dims."""
    k, r = A.shape
    if r == 0:
        return np.zeros((1, 0)) if np.all(b <= tol) else np.zeros((0, 0))
    norms = np.linalg.norm(A, axis=1)
    live = norms > 1e-14
    if np.any(b[~live] > tol * max(1.0, np.abs(b).max(initial=0.0))):
        return np.zeros((0, r))
    A, b = A[live] / norms[live, None], b[live] / norms[live]
    k = len(A)
    if k < r:
        return np.zeros((0, r))
    combos = np.array(list(itertools.combinations(range(k), r)), dtype=int)
    out = []
    for chunk in np.array_split(combos, max(1, len(combos) // 20000 + 1)):
        M = A[chunk]
        rhs = -b[chunk]
        det = np.linalg.det(M)
        ok = np.abs(det) > 1e-10
        if not np.any(ok):
            continue
        y = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        sc = np.maximum(1.0, np.abs(y).max(axis=1))
        feas = np.all(y @ A.T + b <= 1e2 * tol * sc[:, None], axis=1)
        out.append(y[feas])
    if not out:
        return np.zeros((0, r))
    pts = np.vstack(out)
    if len(pts) == 0:
        return pts
    return dedupe_points(pts, tol)


def intersect(P: Polytope, A, b, tol=TOL):
    """Intersection of ``P`` with ``{x : A x + b <= 0}``.

    Works in the affine frame of ``P`` so lower-dimensional inputs are handled
    without degenerate full-dimensional hull calls. Returns ``None`` when the
    intersection is empty.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape[1] != P.dim:
        raise DimensionMismatch("constraint dimension differs from polytope")
    V, c = P.basis, P.origin
    r = V.shape[1]
    scale = P.scale
    if r == 0:
        x = P.vertices[0]
        return P if np.all(A @ x + b <= tol * scale * np.linalg.norm(A, axis=1).clip(1)) else None
    # P's own inequalities restricted to its span (equalities vanish there).
    AP = P.A @ V
    bP = P.A @ c + P.b
    AQ = A @ V
    bQ = A @ c + b
    Ay = np.vstack([AP, AQ])
    by = np.concatenate([bP, bQ])
    ys = _enumerate_vertices(Ay, by, tol)
    if len(ys) == 0:
        return None
    pts = c + ys @ V.T
    return convex_hull(pts, tol, allow_point=True)


def min_norm_point(P, tol=1e-12, max_iter=500):
    """Minimum-norm point of the convex hull of the rows of ``P`` (Wolfe).

    Returns ``(x, w)`` with ``x = w @ P`` and ``w`` a probability vector.
    """
    P = np.asarray(P, dtype=float)
    k = len(P)
    sq = (P**2).sum(axis=1)
    big = max(1.0, sq.max())
    S = [int(np.argmin(sq))]
    w = np.array([1.0])
    for _ in range(max_iter):
        x = w @ P[S]
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * big or j in S:
            break
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            Q = P[S]
            G = Q @ Q.T
            n = len(S)
            K = np.zeros((n + 1, n + 1))
            K[:n, :n] = G
            K[:n, n] = 1.0
            K[n, :n] = 1.0
            rhs = np.zeros(n + 1)
            rhs[n] = 1.0
            a = np.linalg.lstsq(K, rhs, rcond=None)[0][:n]
            if np.all(a > 1e-14):
                w = a
                break
            neg = a <= 1e-14
            theta = np.min(w[neg] / (w[neg] - a[neg]))
            w = w + theta * (a - w)
            keep = w > 1e-14
            S = [s for s, kp in zip(S, keep) if kp]
            w = w[keep]
            w = w / w.sum()
    full = np.zeros(k)
    full[S] = w
    return full @ P, full


def point_distance(x, Q: Polytope) -> float:
    x = np.asarray(x, dtype=float)
    if Q.contains(x, tol=1e-12):
        return 0.0
    y, _ = min_norm_point(Q.vertices - x)
    return float(np.linalg.norm(y))


def hausdorff_distance(P: Polytope, Q: Polytope) -> float:
    """Euclidean Hausdorff distance between two polytopes.

    The distance to a convex set is convex, so each directed supremum is
    attained at a vertex of the first set.
    """
    if P.dim != Q.dim:
        raise DimensionMismatch(f"dimensions {P.dim} and {Q.dim} differ")
    d1 = max(point_distance(v, Q) for v in P.vertices)
    d2 = max(point_distance(v, P) for v in Q.vertices)
    d = max(d1, d2)
    return 0.0 if d <= TOL * max(P.scale, Q.scale) else d


# -- control-space triangulation ------------------------------------------------

def _reference_children(m):
    """Children of the edgewise (Freudenthal) split of an m-simplex.

    Each child is a tuple of ``m + 1`` labels ``(a, b)``: vertex ``a`` when
    ``a == b``, otherwise the midpoint of edge ``(a, b)``.
    """

    def label(y):
        # barycentric coordinates of the reference simplex 1 >= y1 >= ... >= ym >= 0
        lam = np.empty(m + 1)
        lam[0] = 1.0 - y[0]
        lam[1:m] = y[: m - 1] - y[1:]
        lam[m] = y[m - 1]
        nz = [i for i in range(m + 1) if lam[i] > 0.25]
        return (nz[0], nz[-1])

    children = []
    for corner in itertools.product((0.0, 0.5), repeat=m):
        for perm in itertools.permutations(range(m)):
            p = np.array(corner)
            pts = [p.copy()]
            for i in perm:
                p[i] += 0.5
                pts.append(p.copy())
            arr = np.array(pts)
            inside = all(
                1 + 1e-12 >= q[0] and all(q[i] >= q[i + 1] - 1e-12 for i in range(m - 1))
                and q[m - 1] >= -1e-12
                for q in arr
            )
            if inside:
                children.append(tuple(label(q) for q in arr))
    return children


class ControlTriangulation:
    """Conforming triangulation of a control polytope.

    Behaves as a sequence of :class:`Simplex`; ``points`` holds the global
    vertex list and ``cells`` the index tuples (each sorted by global id).
    """

    def __init__(self, polytope: Polytope, points, cells, h):
        self.polytope = polytope
        self.points = np.asarray(points, dtype=float)
        self.cells = [tuple(int(i) for i in c) for c in cells]
        self.h = h
        self._simplices = [Simplex(self.points[list(c)], ids=c) for c in self.cells]

    def __len__(self):
        return len(self.cells)

    def __getitem__(self, i):
        return self._simplices[i]

    def __iter__(self):
        return iter(self._simplices)

    @property
    def m(self):
        return self.points.shape[1]


def _refine(points, cells, m):
    points = [np.asarray(p, dtype=float) for p in points]
    mids = {}
    children = _reference_children(m)
    out = []
    for cell in cells:
        gid = {}
        for a in range(m + 1):
            for b_ in range(a, m + 1):
                if a == b_:
                    gid[(a, a)] = cell[a]
                    continue
                key = (min(cell[a], cell[b_]), max(cell[a], cell[b_]))
                if key not in mids:
                    mids[key] = len(points)
                    points.append(0.5 * (points[key[0]] + points[key[1]]))
                gid[(a, b_)] = mids[key]
        for ch in children:
            out.append(tuple(sorted(gid[lab] for lab in ch)))
    return np.array(points), out


def triangulate_control_polytope(U: Polytope, h: float) -> ControlTriangulation:
    """Triangulate the control polytope with simplices of diameter at most ``h``.

    The sites are the vertices of ``U`` plus the origin when it lies in
    ``U``, so that 0 is a mesh vertex. A Delaunay triangulation of the sites
    is refined by repeated edgewise splitting, which halves every diameter
    and keeps the triangulation conforming.
    """
    if not isinstance(U, Polytope) or len(U.vertices) == 0:
        raise UnboundedPolytope("control set must be a bounded polytope given by vertices")
    if not U.is_full_dim:
        raise DegenerateSimplex("control polytope must be full-dimensional")
    if h <= 0:
        raise ValueError("h must be positive")
    m = U.dim
    sites = U.vertices
    zero = np.zeros(m)
    if U.contains(zero) and np.min(np.linalg.norm(sites, axis=1)) > TOL * U.scale:
        sites = np.vstack([sites, zero])
    if m == 1:
        xs = np.unique(np.round(sites[:, 0], 15))
        pts = []
        for lo, hi in zip(xs[:-1], xs[1:]):
            k = max(1, math.ceil((hi - lo) / h - 1e-9))
            pts.extend(lo + (hi - lo) * np.arange(k) / k)
        pts.append(xs[-1])
        pts = np.array(pts)[:, None]
        cells = [(i, i + 1) for i in range(len(pts) - 1)]
        return ControlTriangulation(U, pts, cells, h)

    tri = Delaunay(sites)
    cells = []
    for s in tri.simplices:
        v = sites[s]
        E = v[1:] - v[0]
        if abs(np.linalg.det(E)) > 1e-12 * U.scale**m:
            cells.append(tuple(sorted(int(i) for i in s)))
    pts = np.array(sites)
    diam = max(Simplex(pts[list(c)]).diameter for c in cells)
    levels = max(0, math.ceil(math.log2(diam / h) - 1e-12)) if diam > h else 0
    for _ in range(levels):
        pts, cells = _refine(pts, cells, m)
    return ControlTriangulation(U, pts, cells, h)
