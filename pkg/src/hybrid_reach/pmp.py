"""Hybrid extremals: candidate vertex controls, Hamiltonian minimization, adjoint flow.

Inside a mode the control rides a vertex feedback ``u = F X + g`` of the
column; it is kept while it minimizes the hybrid Hamiltonian among all
vertex feedbacks, and the switching time is the first time a rival becomes
strictly better. State and adjoint are continuous across mode transitions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import minimize_scalar

from .dynamics import RunningCost
from .errors import (
    DegenerateDirection,
    EmptyCandidateSet,
    GuardGrazing,
    PointNotOnCellClosure,
    PointOutsideCell,
    SingularArcDetected,
    ZenoBudgetExceeded,
)
from .flow import ClosedLoop, ExitRecord, FeedbackControl, affine_flow, enters_cell, out_cell
from .geometry import Polytope, point_distance
from .hybridize import AffineDynamics, HybridAutomaton
from .mesh import SimplexCell, StateControlCell


class Candidate:
    """Vertex feedback of a column together with the affine law it rides."""

    __slots__ = ("feedback", "cell", "dyn", "_loop")

    def __init__(self, feedback: FeedbackControl, cell: StateControlCell, dyn: AffineDynamics):
        self.feedback = feedback
        self.cell = cell
        self.dyn = dyn
        self._loop = ClosedLoop.from_dynamics(dyn.A, dyn.B, dyn.c, feedback)

    def control(self, X):
        return self.feedback(X)

    def velocity(self, X):
        return self._loop.velocity(X)

    def velocity_batch(self, Xs):
        return Xs @ self._loop.M.T + self._loop.b

    def loop(self):
        return self._loop


@dataclass
class CandidateControlSet:
    mode: SimplexCell
    X: np.ndarray
    entries: list

    def __len__(self):
        return len(self.entries)

    def values(self):
        return np.array([c.control(self.X) for c in self.entries])


def hamiltonian(l: RunningCost, dyn: AffineDynamics, X, u, lam, cell: StateControlCell | None = None):
    """``l(X) + lam . (A X + B u + c)``."""
    if cell is not None and not cell.contains(X, u, 1e-9):
        raise PointOutsideCell("(X, u) outside the state-control cell of the law")
    return float(l(np.asarray(X, float)) + np.asarray(lam, float) @ dyn(X, u))


def candidate_controls(H: HybridAutomaton, q: SimplexCell, X) -> CandidateControlSet:
    """Vertex feedbacks of all column cells of ``q``, one per distinct ``(F, g)``."""
    X = np.asarray(X, dtype=float)
    if not q.contains(X, 1e-9):
        raise PointOutsideCell(f"{X.tolist()} not in {q.id}")
    seen = set()
    out = []
    for sc, dyn in H.mode_dynamics(q):
        for choice in sc.transversals():
            fb = sc.feedback(choice)
            if fb.key in seen:
                continue
            seen.add(fb.key)
            out.append(Candidate(fb, sc, dyn))
    return CandidateControlSet(q, X, out)


def _h_values(cands, l_val, X, lam):
    V = np.array([c.velocity(X) for c in cands.entries])
    return l_val + V @ lam


def tol_hamiltonian(l_val, lam, v):
    return 1e-9 * (1.0 + abs(l_val) + np.linalg.norm(lam) * np.linalg.norm(v))


@dataclass
class Selection:
    candidate: Candidate
    index: int
    values: np.ndarray
    ties: list
    residual: float
    degenerate: bool


def select_control(H: HybridAutomaton, q, X, lam, l: RunningCost, tol=None, cands=None,
                   lookahead=True) -> Selection:
    """Minimize the hybrid Hamiltonian over the vertex feedbacks at ``X``.

    Near-ties (within ``tol``) are broken by following each tied candidate a
    short time and keeping the one that stays the minimizer.
    """
    X = np.asarray(X, dtype=float)
    lam = np.asarray(lam, dtype=float)
    cands = candidate_controls(H, q, X) if cands is None else cands
    if len(cands) == 0:
        raise EmptyCandidateSet(f"no vertex feedback in {q.id}")
    l_val = l(X)
    vals = _h_values(cands, l_val, X, lam)
    best = int(np.argmin(vals))
    if tol is None:
        tol = tol_hamiltonian(l_val, lam, cands.entries[best].velocity(X))
    ties = [int(i) for i in np.flatnonzero(vals <= vals[best] + tol)]
    degenerate = len(ties) == len(vals) and len(vals) > 1
    if lookahead and len(ties) > 1:
        best = _break_tie(H, q, X, lam, l, cands, ties)
    return Selection(cands.entries[best], best, vals, ties, float(vals[best]), degenerate)


def _break_tie(H, q, X, lam, l, cands, ties):
    scores = []
    delta = 1e-6 * H.h
    for i in ties:
        c = cands.entries[i]
        loop = c.loop()
        speed = np.linalg.norm(loop.velocity(X)) + 1.0
        dt = delta / speed
        Xd = affine_flow(loop, X, dt)
        lamd = adjoint_flow(l, loop, X, lam, dt)
        v = _h_values(cands, l(Xd), Xd, lamd)
        try:
            inside = enters_cell(q, X, loop)
        except PointNotOnCellClosure:
            inside = False
        scores.append((0 if inside else 1, v[i] - v.min(), ties.index(i)))
    k = min(range(len(ties)), key=lambda j: scores[j])
    return ties[k]


def adjoint_flow(l: RunningCost, loop: ClosedLoop, X0, lam0, t):
    """Adjoint ``lam' = -grad l(X) - M^T lam`` along the closed loop ``(M, b)``.

    Exact matrix exponential for a constant cost; otherwise an adaptive
    high-order integration with the state in closed form.
    """
    lam0 = np.asarray(lam0, dtype=float)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    Mt = loop.M.T
    if l.is_constant:
        out = np.array([expm(-Mt * s) @ lam0 for s in ts])
    else:
        n = len(lam0)
        z0 = np.concatenate([np.asarray(X0, float), lam0])

        def rhs(_, z):
            X, lm = z[:n], z[n:]
            return np.concatenate([loop.M @ X + loop.b, -l.gradient(X) - Mt @ lm])

        t_end = float(ts.max()) if len(ts) else 0.0
        if t_end == 0.0:
            out = np.tile(lam0, (len(ts), 1))
        else:
            sol = solve_ivp(rhs, (0.0, t_end), z0, method="DOP853", rtol=1e-12, atol=1e-13,
                            dense_output=True)
            out = np.array([sol.sol(s)[n:] for s in ts])
    return out[0] if np.ndim(t) == 0 else out


def normalize_adjoint(l: RunningCost, dyn: AffineDynamics, X0, feedback: FeedbackControl, direction):
    """Scale ``direction`` so the Hamiltonian vanishes at ``X0`` under ``feedback``."""
    direction = np.asarray(direction, dtype=float)
    X0 = np.asarray(X0, dtype=float)
    v = dyn(X0, feedback(X0))
    den = float(direction @ v)
    if abs(den) < 1e-12:
        raise DegenerateDirection("direction is orthogonal to the hybrid velocity")
    s = -l(X0) / den
    if s == 0.0:
        warnings.warn("zero running cost gives a zero adjoint", RuntimeWarning)
    return s * direction


def normalize_direction(H: HybridAutomaton, q, X0, l: RunningCost, direction):
    """Pick a candidate and scale so that it minimizes a zero Hamiltonian.

    Candidates giving a positive scale are preferred, in candidate order.
    Raises ``DegenerateDirection`` when no candidate qualifies.
    """
    X0 = np.asarray(X0, dtype=float)
    direction = np.asarray(direction, dtype=float)
    cands = candidate_controls(H, q, X0)
    found = []
    for c in cands.entries:
        try:
            lam = normalize_adjoint(l, c.dyn, X0, c.feedback, direction)
        except DegenerateDirection:
            continue
        vals = _h_values(cands, l(X0), X0, lam)
        tol = tol_hamiltonian(l(X0), lam, c.velocity(X0))
        own = float(vals[cands.entries.index(c)])
        if vals.min() >= own - tol:
            s = float(lam @ direction) / float(direction @ direction)
            found.append((0 if s > 0 else 1, lam))
    if not found:
        raise DegenerateDirection("no vertex control zeroes the Hamiltonian along this direction")
    found.sort(key=lambda f: f[0])
    return found[0][1]


@dataclass
class ExtremalSegment:
    mode: SimplexCell
    t0: float
    t1: float
    dynamics: AffineDynamics
    feedback: FeedbackControl
    loop: ClosedLoop
    X0: np.ndarray
    lam0: np.ndarray
    end: str
    times: np.ndarray
    states: np.ndarray
    adjoints: np.ndarray
    controls: np.ndarray
    hamiltonians: np.ndarray


@dataclass
class ExtremalTrajectory:
    segments: list
    transition_times: list
    switch_times: list
    status: str
    tol_H: float
    transitions: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def final_time(self):
        return self.segments[-1].t1 if self.segments else 0.0

    @property
    def final_state(self):
        return self.segments[-1].states[-1] if self.segments else None

    def lambda_jumps(self):
        """Adjoint discontinuities between consecutive segments."""
        return [float(np.linalg.norm(b.lam0 - a.adjoints[-1]))
                for a, b in zip(self.segments[:-1], self.segments[1:])]

    def rows(self):
        """(t, mode id, X, u, lambda, H) samples in time order."""
        out = []
        for s in self.segments:
            for t, x, u, lm, hv in zip(s.times, s.states, s.controls, s.adjoints, s.hamiltonians):
                out.append((float(t), s.mode.id, x, u, lm, float(hv)))
        return out

    def summary(self):
        return {
            "status": self.status,
            "final_time": float(self.final_time),
            "final_state": None if self.final_state is None else self.final_state.tolist(),
            "transition_times": [float(t) for t in self.transition_times],
            "switch_times": [float(t) for t in self.switch_times],
            "segments": len(self.segments),
            "tol_H": float(self.tol_H),
            "max_abs_H": float(max((np.abs(s.hamiltonians).max() for s in self.segments), default=0.0)),
            "max_lambda_jump": float(max(self.lambda_jumps(), default=0.0)),
            "max_H_jump": float(max((t["H_jump"] for t in self.transitions), default=0.0)),
            "warnings": list(self.warnings),
        }


def _segment_samples(l, loop, X0, lam0, fb, dyn, span, count=21):
    ts = np.linspace(0.0, span, count) if span > 0 else np.zeros(1)
    Xs = affine_flow(loop, X0, ts)
    Ls = adjoint_flow(l, loop, X0, lam0, ts)
    Us = fb(Xs)
    Hs = l.batch(Xs) + np.einsum("ij,ij->i", Ls, Xs @ loop.M.T + loop.b)
    return ts, Xs, Ls, Us, Hs


def _min_gap(cands, cur, l, X, lam):
    """Smallest Hamiltonian gap of rivals vs. the current candidate (and its argmin)."""
    v_cur = cur.velocity(X)
    best, arg = np.inf, -1
    for i, c in enumerate(cands.entries):
        if c is cur:
            continue
        g = float(lam @ (c.velocity(X) - v_cur))
        if g < best:
            best, arg = g, i
    return best, arg


def _switch_time(cands, cur, l, loop, X0, lam0, span, tol, h):
    """First time in ``(0, span]`` where a rival beats the current control."""
    if span <= 0 or len(cands) < 2:
        return None
    step = min(span / 100.0, h / 10.0)
    ts = np.arange(step, span + 0.5 * step, step)
    ts[-1] = min(ts[-1], span)
    Xs = affine_flow(loop, X0, ts)
    Ls = adjoint_flow(l, loop, X0, lam0, ts)
    V = np.array([c.velocity_batch(Xs) for c in cands.entries])  # (K, N, n)
    vcur = cur.velocity_batch(Xs)
    gaps = np.einsum("kni,ni->kn", V - vcur[None], Ls)
    idx = cands.entries.index(cur)
    gaps[idx] = np.inf
    worst = gaps.min(axis=0)
    # singular arc: a rival with a different velocity ties over the whole span
    if span > 1e-6:
        diff = np.linalg.norm(V - vcur[None], axis=2).min(axis=1) > 1e-9 * (1 + np.abs(vcur).max())
        flat = np.all(np.abs(gaps) <= tol, axis=1) & diff
        if np.any(flat):
            raise SingularArcDetected("a switching function vanishes over a whole segment")
    bad = np.flatnonzero(worst < -tol)
    if len(bad) == 0:
        return None
    k = int(bad[0])
    # detection uses -tol against noise; the switch itself is the sign change
    nonneg = np.flatnonzero(worst[:k] >= 0.0)
    level = 0.0
    if len(nonneg):
        a = ts[nonneg[-1]]
    else:
        a = 0.0
        if _min_gap(cands, cur, l, X0, lam0)[0] < 0.0:
            level = -tol
    b = ts[k]

    def below(t):
        X = affine_flow(loop, X0, t)
        lam = adjoint_flow(l, loop, X0, lam0, t)
        return _min_gap(cands, cur, l, X, lam)[0] < level

    for _ in range(200):
        if b - a <= 1e-12:
            break
        mid = 0.5 * (a + b)
        if below(mid):
            b = mid
        else:
            a = mid
    return b


def _target_hit(loop, X0, span, target: Polytope, tol):
    """Earliest time in ``[0, span]`` where the flow meets the target, if any."""
    if target is None:
        return None
    count = 201
    ts = np.linspace(0.0, span, count) if span > 0 else np.zeros(1)
    Xs = affine_flow(loop, X0, ts)
    d = np.array([point_distance(x, target) for x in Xs])
    scale = max(1.0, target.scale)
    hit = np.flatnonzero(d <= tol * scale)
    if len(hit):
        return float(ts[hit[0]])
    k = int(np.argmin(d))
    a, b = ts[max(k - 1, 0)], ts[min(k + 1, len(ts) - 1)]
    if b <= a:
        return None
    res = minimize_scalar(lambda t: point_distance(affine_flow(loop, X0, t), target),
                          bounds=(a, b), method="bounded", options={"xatol": 1e-14})
    if res.fun <= tol * scale:
        return float(res.x)
    return None


@dataclass
class ModeExit:
    t: float
    X: np.ndarray
    lam: np.ndarray
    face: int | None
    H_before: float
    kind: str  # "exit", "target", "horizon", "region"


def extremal_in_mode(H: HybridAutomaton, q, t_i, X_i, lam_i, l, tol_H, target=None,
                     t_end=100.0, budget=None, region=None, start=None):
    """Extremal pieces in one mode until the state leaves the cell.

    Returns ``(segments, exit)``; ``exit.kind`` tells why the mode was left.
    ``start`` may carry a pre-selected candidate index (from the entry
    decision); ``budget`` is a one-element list counting segments.
    """
    X = np.asarray(X_i, dtype=float)
    lam = np.asarray(lam_i, dtype=float)
    t = float(t_i)
    cands = candidate_controls(H, q, X)
    segments = []
    first = True
    while True:
        if budget is not None:
            budget[0] += 1
            if budget[0] > H.max_transitions:
                raise ZenoBudgetExceeded(f"more than {H.max_transitions} segments")
        if first and start is not None:
            cur = cands.entries[start]
        else:
            cur = select_control(H, q, X, lam, l, tol_H, cands).candidate
        first = False
        loop = cur.loop()
        H_now = float(l(X) + lam @ cur.velocity(X))
        if not enters_cell(q, X, loop):
            return segments, ModeExit(t, X, lam, None, H_now, "exit")
        remaining = max(t_end - t, 0.0)
        rec = out_cell(q, X, loop, t_max=remaining)
        exited = isinstance(rec, ExitRecord)
        span = rec.T if exited else remaining
        ts_sw = _switch_time(cands, cur, l, loop, X, lam, span, tol_H, H.h)
        stop = span if ts_sw is None else ts_sw
        hit = _target_hit(loop, X, stop, target, 1e-9)
        if hit is not None:
            stop = hit
        end = "target" if hit is not None else ("switch" if ts_sw is not None else
                                                ("exit" if exited else "horizon"))
        ts, Xs, Ls, Us, Hs = _segment_samples(l, loop, X, lam, cur.feedback, cur.dyn, stop)
        if end == "exit":
            Xs[-1] = rec.X_f
        seg = ExtremalSegment(q, t, t + stop, cur.dyn, cur.feedback, loop, X.copy(), lam.copy(),
                              end, t + ts, Xs, Ls, Us, Hs)
        segments.append(seg)
        X, lam, t = Xs[-1].copy(), Ls[-1].copy(), t + stop
        if region is not None and (np.any(X < region[0]) or np.any(X > region[1])):
            return segments, ModeExit(t, X, lam, None, float(Hs[-1]), "region")
        if end == "switch":
            continue
        face = rec.face if end == "exit" else None
        return segments, ModeExit(t, X, lam, face, float(Hs[-1]), end)


def _enter(H, X, lam, l, tol_H, exclude=None, prefer=None):
    """Mode and candidate with which the extremal continues from ``X``."""
    cells = [c for c in H.locate_all(X, tol=1e-9) if c != exclude]
    if prefer is not None and prefer in cells:
        cells.remove(prefer)
        cells.insert(0, prefer)
    for q in cells:
        try:
            sel = select_control(H, q, X, lam, l, tol_H)
        except PointOutsideCell:
            continue
        if enters_cell(q, X, sel.candidate.loop()):
            return q, sel, False
    return None, None, True


def simulate_extremal(H: HybridAutomaton, X0, lam0, l: RunningCost, target: Polytope | None = None,
                      t_end=100.0, region=None) -> ExtremalTrajectory:
    """Chain per-mode extremals from ``X0`` with adjoint ``lam0``.

    Stops when the target is met, the state leaves ``region`` (a box), or
    time ``t_end`` is reached; more than ``H.max_transitions`` segments
    raise ``ZenoBudgetExceeded``.
    """
    X = np.asarray(X0, dtype=float)
    lam = np.asarray(lam0, dtype=float)
    traj = ExtremalTrajectory([], [], [], "running", 0.0)
    q0 = H.locate(X)
    sel0 = select_control(H, q0, X, lam, l, tol=1.0e300, lookahead=False)
    v0 = sel0.candidate.velocity(X)
    tol_H = tol_hamiltonian(l(X), lam, v0)
    traj.tol_H = tol_H
    if target is not None and point_distance(X, target) <= 1e-9 * max(1.0, target.scale):
        traj.status = "reached target"
        return traj
    q, sel, _ = _enter(H, X, lam, l, tol_H)
    if q is None:
        q, sel = q0, select_control(H, q0, X, lam, l, tol_H)
    budget = [0]
    t = 0.0
    start = sel.index
    while True:
        segs, ex = extremal_in_mode(H, q, t, X, lam, l, tol_H, target, t_end, budget, region,
                                    start=start)
        for s in segs:
            traj.segments.append(s)
            if s.end == "switch":
                traj.switch_times.append(s.t1)
        X, lam, t = ex.X, ex.lam, ex.t
        if ex.kind == "target":
            traj.status = "reached target"
            return traj
        if ex.kind == "region":
            traj.status = "left region"
            return traj
        if ex.kind == "horizon":
            traj.status = "budget exhausted"
            return traj
        budget[0] += 1
        if budget[0] > H.max_transitions:
            raise ZenoBudgetExceeded(f"more than {H.max_transitions} segments and transitions")
        prefer = q.neighbor(ex.face) if ex.face is not None else None
        q_next, sel, grazing = _enter(H, X, lam, l, tol_H, exclude=q, prefer=prefer)
        if grazing:
            nb = prefer if prefer is not None else H.locate(X)
            traj.warnings.append(
                f"{GuardGrazing.__name__}: no adjacent mode entered at t={t:.12g}; "
                f"continuing in {nb.id}")
            q_next = nb
            sel = select_control(H, q_next, X, lam, l, tol_H)
        H_after = float(l(X) + lam @ sel.candidate.velocity(X))
        traj.transition_times.append(t)
        traj.transitions.append({"t": t, "from": q.id, "to": q_next.id,
                                 "H_before": ex.H_before, "H_after": H_after,
                                 "H_jump": abs(H_after - ex.H_before)})
        q, start = q_next, sel.index
