import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from hybrid_reach.dynamics import ControlSpec, RunningCost, VectorField, spring_model
from hybrid_reach.errors import DegenerateDirection
from hybrid_reach.flow import ClosedLoop
from hybrid_reach.geometry import convex_hull
from hybrid_reach.hybridize import AffineDynamics, HybridAutomaton
from hybrid_reach.mesh import cell, control_polytope
from hybrid_reach.pmp import (
    adjoint_flow,
    candidate_controls,
    extremal_in_mode,
    hamiltonian,
    normalize_adjoint,
    normalize_direction,
    select_control,
    simulate_extremal,
    tol_hamiltonian,
)

ONE1 = RunningCost.const(1.0, 1)
ONE2 = RunningCost.const(1.0, 2)


def point(*x):
    return convex_hull(np.array([x], float), allow_point=True)


def interval_controls():
    return ControlSpec(convex_hull([[-1.0], [1.0]]))


@pytest.fixture(scope="module")
def line():
    return HybridAutomaton(VectorField.from_source("u1"), interval_controls(), 1.0)


def double_integrator(h):
    return HybridAutomaton(VectorField.from_source("x2 ; u1"), interval_controls(), h)


def test_hamiltonian_examples():
    dyn = AffineDynamics(np.zeros((2, 2)), np.array([[1.0], [0.0]]), np.zeros(2))
    assert hamiltonian(ONE2, dyn, [0, 0], [-1.0], [1.0, 0.0]) == pytest.approx(0.0)
    assert hamiltonian(ONE2, dyn, [0, 0], [0.7], [0.0, 0.0]) == pytest.approx(1.0)


def test_hamiltonian_matches_raw_interpolant():
    f, U = spring_model()
    H = HybridAutomaton(f, U, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.uniform(-1, 1, size=2)
        u = rng.uniform(-1, 1, size=1)
        lam = rng.normal(size=2)
        q = H.locate(X)
        sc = H.cell_of(q, X, u)
        dyn = H.interpolate_cell(sc)
        raw = 1.0 + lam @ (dyn.A @ X + dyn.B @ u + dyn.c)
        assert hamiltonian(ONE2, dyn, X, u, lam) == pytest.approx(raw)


def test_candidates_1d_are_deduplicated():
    # U = [0, 1] is one control simplex, so the column has two cells sharing a diagonal
    H = HybridAutomaton(VectorField.from_source("u1"), ControlSpec(convex_hull([[0.0], [1.0]])), 1.0)
    q = cell((0,), (0,), 1.0)
    cands = candidate_controls(H, q, [0.3])
    keys = [c.feedback.key for c in cands.entries]
    assert len(H.column(q)) == 2
    assert len(keys) == len(set(keys)) == 3
    # boundary point: no crash, no duplicate keys
    cands0 = candidate_controls(H, q, [0.0])
    assert len({c.feedback.key for c in cands0.entries}) == len(cands0.entries)


def test_select_control_min_time_1d(line):
    q = cell((0,), (0,), 1.0)
    sel = select_control(line, q, [0.5], [1.0], ONE1)
    assert sel.candidate.control([0.5])[0] == pytest.approx(-1.0)
    assert sel.residual == pytest.approx(0.0)
    sel = select_control(line, q, [0.5], [0.4], ONE1)
    assert sel.residual == pytest.approx(1.0 - 0.4)
    zero = select_control(line, q, [0.5], [0.0], ONE1)
    assert zero.degenerate


def test_minimizer_invariant_under_positive_scaling():
    f, U = spring_model()
    H = HybridAutomaton(f, U, 0.5)
    rng = np.random.default_rng(3)
    for _ in range(20):
        X = rng.uniform(-1, 1, size=2)
        lam = rng.normal(size=2)
        q = H.locate(X)
        a = select_control(H, q, X, lam, ONE2, lookahead=False)
        b = select_control(H, q, X, 3.5 * lam, RunningCost.const(3.5, 2), lookahead=False)
        assert np.allclose(a.candidate.control(X), b.candidate.control(X))


def test_adjoint_flow_analytic():
    zero = ClosedLoop(np.zeros((1, 1)), np.zeros(1))
    assert adjoint_flow(ONE1, zero, [0.3], [0.8], 2.0)[0] == pytest.approx(0.8)
    decay = ClosedLoop(np.array([[-1.0]]), np.zeros(1))
    assert adjoint_flow(ONE1, decay, [0.3], [1.0], 1.0)[0] == pytest.approx(math.e)


def test_adjoint_matches_cost_to_go_gradient():
    # l = x^2 along x' = -x + 1 for time T: lambda(0) = dJ/dx0 when lambda(T) = 0,
    # i.e. integrate the adjoint backward; compare with finite differences of J
    l = RunningCost.from_source("x1^2", 1)
    loop = ClosedLoop(np.array([[-1.0]]), np.array([1.0]))
    T = 0.8

    def J(x0):
        ts = np.linspace(0, T, 4001)
        xs = 1 + (x0 - 1) * np.exp(-ts)
        return trapezoid(xs**2, ts)

    x0 = 0.4
    fd = (J(x0 + 1e-5) - J(x0 - 1e-5)) / 2e-5
    # lambda(T) is affine in lambda(0); pick lambda(0) so that lambda(T) = 0
    a = adjoint_flow(l, loop, [x0], [0.0], T)[0]
    b = adjoint_flow(l, loop, [x0], [1.0], T)[0]
    lam0 = -a / (b - a)
    assert lam0 == pytest.approx(fd, abs=1e-5)


def test_normalize_adjoint_examples():
    dyn = AffineDynamics(np.zeros((2, 2)), np.zeros((2, 0)), np.array([-1.0, 0.0]))

    class Zero:
        F = np.zeros((0, 2))
        g = np.zeros(0)

        def __call__(self, X):
            return np.zeros(0)

    lam = normalize_adjoint(ONE2, dyn, [0, 0], Zero(), [1.0, 0.0])
    assert np.allclose(lam, [1.0, 0.0])
    with pytest.warns(RuntimeWarning):
        lam0 = normalize_adjoint(RunningCost.const(0.0, 2), dyn, [0, 0], Zero(), [1.0, 0.0])
    assert np.allclose(lam0, 0.0)
    with pytest.raises(DegenerateDirection):
        normalize_adjoint(ONE2, dyn, [0, 0], Zero(), [0.0, 1.0])


def test_single_segment_in_1d(line):
    q = cell((0,), (0,), 1.0)
    segs, ex = extremal_in_mode(line, q, 0.0, [0.5], [1.0], ONE1, 3e-9)
    assert len(segs) == 1
    assert segs[0].controls[:, 0] == pytest.approx(-1.0)
    assert ex.kind == "exit"
    assert ex.X[0] == pytest.approx(0.0, abs=1e-9)
    assert ex.t == pytest.approx(0.5, abs=1e-9)


def test_double_integrator_switch_inside_cell():
    # lambda1 constant, lambda2 = lambda2(0) - lambda1 t; switch at t = 0.5
    H = double_integrator(4.0)
    q = cell((0, 0), (0, 1), 4.0)
    X0, lam0 = np.array([0.1, 2.0]), np.array([-2.0, -1.0])
    segs, ex = extremal_in_mode(H, q, 0.0, X0, lam0, ONE2, 1e-9)
    assert len(segs) >= 2
    assert segs[0].end == "switch"
    assert segs[0].t1 == pytest.approx(0.5, abs=1e-8)
    assert segs[0].controls[0, 0] == pytest.approx(1.0)
    assert segs[1].controls[-1, 0] == pytest.approx(-1.0)


def test_double_integrator_no_switch_single_segment():
    H = double_integrator(4.0)
    q = cell((0, 0), (0, 1), 4.0)
    segs, ex = extremal_in_mode(H, q, 0.0, [0.1, 2.0], [-2.0, -10.0], ONE2, 1e-9)
    assert len(segs) == 1 and ex.kind == "exit"
    beta = q.R @ ex.X + q.r
    assert beta.min() == pytest.approx(0.0, abs=1e-9)


def test_start_in_target(line):
    traj = simulate_extremal(line, [0.0], [1.0], ONE1, point(0.0))
    assert traj.status == "reached target" and not traj.segments


def test_chain_minimum_time(line):
    traj = simulate_extremal(line, [2.5], [1.0], ONE1, point(0.0))
    assert traj.status == "reached target"
    assert traj.final_time == pytest.approx(2.5, abs=1e-9)
    assert len({s.mode for s in traj.segments}) == 3
    for s in traj.segments:
        assert np.allclose(s.controls, -1.0)


def test_double_integrator_bang_bang_time():
    H = double_integrator(0.25)
    q = H.locate([1.0, 0.0])
    lam0 = normalize_direction(H, q, [1.0, 0.0], ONE2, [1.0, 1.0])
    assert np.allclose(lam0, [1.0, 1.0])
    traj = simulate_extremal(H, [1.0, 0.0], lam0, ONE2, point(0.0, 0.0), t_end=5.0)
    assert traj.status == "reached target"
    assert abs(traj.final_time - 2.0) <= 0.15


def test_spring_extremal_admissibility():
    f, U = spring_model()
    H = HybridAutomaton(f, U, 0.5)
    X0 = np.array([0.5, 0.0])
    lam0 = normalize_direction(H, H.locate(X0), X0, ONE2, [0.0, 1.0])
    traj = simulate_extremal(H, X0, lam0, ONE2, point(0.0, 0.0), t_end=3.0)
    for s in traj.segments:
        assert np.all(np.abs(s.hamiltonians) <= traj.tol_H)
        for X, u in zip(s.states, s.controls):
            assert np.allclose(u, s.feedback(X), atol=1e-12)
            assert -1 - 1e-9 <= u[0] <= 1 + 1e-9
            sc = next(c for c in H.column(s.mode) if c.id == s.feedback.source[0])
            assert sc.contains(X, u, 1e-7)
            verts = control_polytope(sc, X, tol=1e-7).polytope.vertices
            assert np.min(np.abs(verts[:, 0] - u[0])) <= 1e-7
    assert max(traj.lambda_jumps(), default=0.0) <= 1e-9


def test_tol_scale():
    assert tol_hamiltonian(1.0, np.array([3.0, 4.0]), np.array([1.0, 0.0])) == pytest.approx(7e-9)
