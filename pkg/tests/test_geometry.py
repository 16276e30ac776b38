import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from hybrid_reach.errors import AllPointsCoincident, DegenerateSimplex, EmptyInput, UnboundedPolytope
from hybrid_reach.geometry import (
    Polytope,
    Simplex,
    convex_hull,
    from_halfspaces,
    hausdorff_distance,
    intersect,
    min_norm_point,
    point_distance,
    simplex_to_halfspaces,
    triangulate_control_polytope,
)

points = st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=25)


def test_square_hull():
    P = convex_hull([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]])
    assert len(P.vertices) == 4
    assert P.volume() == pytest.approx(1.0)
    assert P.contains([0.5, 0.5]) and not P.contains([1.1, 0.5])


def test_collinear_points_give_segment():
    P = convex_hull([[0, 0], [1, 1], [2, 2], [0.5, 0.5]])
    assert P.affine_dim == 1
    assert len(P.vertices) == 2
    assert P.contains([1.5, 1.5]) and not P.contains([1.5, 1.4])


def test_hull_errors():
    with pytest.raises(EmptyInput):
        convex_hull(np.zeros((0, 2)))
    with pytest.raises(AllPointsCoincident):
        convex_hull([[1.0, 2.0], [1.0, 2.0]])
    P = convex_hull([[1.0, 2.0]], allow_point=True)
    assert P.affine_dim == 0


def _brute_vertices(points):
    # a point is a hull vertex iff it is not a convex combination of the others
    pts = np.unique(np.asarray(points, float), axis=0)
    out = []
    for i, p in enumerate(pts):
        others = np.delete(pts, i, axis=0)
        A_eq = np.vstack([others.T, np.ones(len(others))])
        res = linprog(np.zeros(len(others)), A_eq=A_eq, b_eq=np.append(p, 1.0),
                      bounds=[(0, None)] * len(others), method="highs")
        if res.status != 0:
            out.append(p)
    return np.array(out)


@settings(max_examples=40, deadline=None)
@given(points)
def test_hull_vertices_match_lp_oracle(pts):
    pts = np.round(np.array(pts), 3)
    if np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-6) < 2:
        return
    P = convex_hull(pts)
    ref = _brute_vertices(pts)
    assert len(P.vertices) == len(ref)
    d = np.linalg.norm(P.vertices[:, None] - ref[None], axis=2).min(axis=1)
    assert d.max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(points)
def test_hull_contains_inputs(pts):
    pts = np.array(pts)
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    P = convex_hull(pts)
    assert P.contains_many(pts, tol=1e-7).all()


def test_halfspace_round_trip():
    P = convex_hull(np.array(list(itertools.product((0, 1), repeat=3)), float))
    Q = from_halfspaces(P.A, P.b)
    assert hausdorff_distance(P, Q) < 1e-12
    R = Polytope.from_json(P.to_json())
    assert hausdorff_distance(P, R) < 1e-12


def test_unbounded_halfspaces():
    with pytest.raises(UnboundedPolytope):
        from_halfspaces(np.array([[-1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def test_simplex_barycentric():
    s = Simplex(np.array([[0.0, 0], [2, 0], [0, 2]]))
    b = s.barycentric([0.5, 0.5])
    assert b.sum() == pytest.approx(1.0)
    assert np.allclose(b @ s.vertices, [0.5, 0.5])
    assert s.volume() == pytest.approx(2.0)
    P = simplex_to_halfspaces(s)
    assert P.contains([0.5, 0.5]) and not P.contains([1.5, 1.5])
    with pytest.raises(DegenerateSimplex):
        Simplex(np.array([[0.0, 0], [1, 1], [2, 2]]))


def test_intersect_square_with_halfplane():
    P = convex_hull([[0, 0], [2, 0], [2, 2], [0, 2]])
    Q = intersect(P, np.array([[1.0, 0.0]]), np.array([-1.0]))  # x <= 1
    assert Q.volume() == pytest.approx(2.0)
    assert intersect(P, np.array([[1.0, 0.0]]), np.array([5.0])) is None


def test_distances():
    P = convex_hull([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert point_distance([2, 0.5], P) == pytest.approx(1.0)
    assert point_distance([0.5, 0.5], P) == 0.0
    x, w = min_norm_point(np.array([[1.0, -1.0], [1.0, 1.0]]))
    assert np.allclose(x, [1, 0]) and w.sum() == pytest.approx(1.0)
    Q = P.translate([0.5, 0.0])
    assert hausdorff_distance(P, Q) == pytest.approx(0.5)
    a = convex_hull([[0.0], [1.0]])
    b = convex_hull([[0.0], [2.0]])
    assert hausdorff_distance(a, b) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=3, max_size=8),
       st.tuples(st.floats(-6, 6), st.floats(-6, 6)))
def test_point_distance_matches_dense_sampling(pts, x):
    pts = np.array(pts)
    if np.linalg.matrix_rank(pts[1:] - pts[0], tol=1e-3) < 2:
        return
    P = convex_hull(pts)
    rng = np.random.default_rng(0)
    W = rng.dirichlet(np.ones(len(P.vertices)) * 0.3, size=20000)
    S = np.vstack([W @ P.vertices, P.vertices])
    ref = np.linalg.norm(S - np.array(x), axis=1).min()
    d = point_distance(np.array(x), P)
    assert d <= ref + 1e-9
    assert d >= ref - 0.05 * max(1.0, P.diameter)


@pytest.mark.parametrize("h", [0.3, 0.7, 2.0])
def test_interval_triangulation(h):
    T = triangulate_control_polytope(convex_hull([[-1.0], [1.0]]), h)
    vols = sum(s.volume() for s in T)
    assert vols == pytest.approx(2.0)
    assert max(s.diameter for s in T) <= h + 1e-12
    assert np.any(np.all(np.abs(T.points) < 1e-12, axis=1))


@pytest.mark.parametrize("h", [0.5, 1.0, 6.0])
def test_square_and_diamond_triangulation(h):
    for V in ([[-1, -1], [1, -1], [1, 1], [-1, 1]], [[3, 0], [0, 3], [-3, 0], [0, -3]]):
        U = convex_hull(np.array(V, float))
        T = triangulate_control_polytope(U, h)
        assert sum(s.volume() for s in T) == pytest.approx(U.volume())
        assert max(s.diameter for s in T) <= h + 1e-9
        for s in T:
            assert U.contains_many(s.vertices, tol=1e-9).all()


def test_diamond_at_orbital_step():
    U = convex_hull(np.array([[3, 0], [0, 3], [-3, 0], [0, -3]], float))
    T = triangulate_control_polytope(U, 6.0)
    assert len(T) == 4
    assert sum(s.volume() for s in T) == pytest.approx(18.0)
