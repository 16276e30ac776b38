"""Convex approximations of controllable (or attainable) sets, mode by mode.

In one mode, every vertex feedback of the column is applied from every
target vertex with time reversed; the points where those trajectories leave
the cell are controllable, and their hull with the target is the piece
``Lambda``. Pieces are chained through guards: the face of ``Lambda`` on a
facet becomes the target of the neighboring mode.

Every vertex of a piece keeps a witness (target vertex, feedback, time) that
can be re-simulated; this is the certificate the rest of the package relies
on.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from .errors import (
    EmptyTarget,
    EvaluationError,
    NonAdjacentPath,
    PointNotOnCellClosure,
    TargetNotInFirstMode,
)
from .flow import (
    ClosedLoop,
    ExitRecord,
    FeedbackControl,
    affine_flow,
    enters_cell,
    out_cell,
    reverse,
)
from .geometry import Polytope, convex_hull, intersect, point_distance
from .hybridize import HybridAutomaton
from .mesh import SimplexCell, cell, shared_facet

FACE_TOL = 1e-9


@dataclass
class Target:
    polytope: Polytope
    host: SimplexCell


@dataclass
class Witness:
    """How a piece vertex is linked to a target vertex.

    ``loop`` carries the flow that was integrated from ``target_vertex`` to
    ``point`` in time ``T``; running ``reverse(loop)`` from ``point`` for
    ``T`` returns to the target vertex. ``T == 0`` marks a target vertex.
    """

    point: np.ndarray
    target_vertex: np.ndarray
    feedback: FeedbackControl | None
    loop: ClosedLoop | None
    T: float
    face: int | None = None

    def to_json(self):
        return {
            "point": self.point.tolist(),
            "target_vertex": self.target_vertex.tolist(),
            "T": float(self.T),
            "face": self.face,
            "feedback": None if self.feedback is None else self.feedback.to_json(),
        }


@dataclass
class ReachPiece:
    mode: SimplexCell
    lam: Polytope
    witnesses: list
    target: Polytope
    direction: str = "backward"
    parent: int | None = None
    via_facet: int | None = None
    level: int = 0
    exits: int = 0
    flows: int = 0
    interior_ok: float | None = None

    @property
    def size(self):
        return (self.lam.affine_dim, self.lam.volume())

    def to_json(self):
        return {
            "mode": self.mode.id,
            "direction": self.direction,
            "level": self.level,
            "parent": self.parent,
            "via_facet": self.via_facet,
            "polytope": self.lam.to_json(),
            "target": self.target.to_json(),
            "witnesses": [w.to_json() for w in self.witnesses],
            "flows": self.flows,
            "exit_points": self.exits,
            "interior_ok": self.interior_ok,
        }


@dataclass
class ReachResult:
    pieces: list
    path: list
    targets: list
    direction: str = "backward"
    skipped: list = field(default_factory=list)
    h: float = 0.0

    @property
    def hausdorff_bound(self):
        n = self.pieces[0].mode.n if self.pieces else 0
        return math.sqrt(n) * self.h

    def vertices(self):
        return np.vstack([p.lam.vertices for p in self.pieces]) if self.pieces else np.zeros((0, 0))


def _flow_pairs(H: HybridAutomaton, q: SimplexCell, direction):
    """Distinct vertex feedbacks of the column and their flows in this mode."""
    seen = set()
    out = []
    for sc, dyn in H.mode_dynamics(q):
        for choice in sc.transversals():
            fb = sc.feedback(choice)
            if fb.key in seen:
                continue
            seen.add(fb.key)
            loop = ClosedLoop.from_dynamics(dyn.A, dyn.B, dyn.c, fb)
            out.append((fb, reverse(loop) if direction == "backward" else loop))
    return out


def _one_flow(q, s, loop, t_max):
    try:
        if not enters_cell(q, s, loop):
            return None
    except PointNotOnCellClosure:
        return None
    rec = out_cell(q, s, loop, t_max=t_max)
    return rec if isinstance(rec, ExitRecord) else None


def convex_approx_mode(H: HybridAutomaton, q: SimplexCell, target, direction="backward",
                       t_max=100.0, executor=None) -> ReachPiece:
    """Convex approximation of the controllable set of ``target`` in mode ``q``.

    Parameters
    ----------
    target : Polytope or Target
        Local target, contained in the closed cell.
    direction : {"backward", "forward"}
        ``backward`` builds controllable sets (time-reversed flows);
        ``forward`` builds attainable sets from the target.
    executor : concurrent.futures.Executor, optional
        Runs the independent (vertex, feedback) flows; results are reduced in
        a fixed order, so the output does not depend on the worker count.
    """
    if direction not in ("backward", "forward"):
        raise ValueError("direction must be 'backward' or 'forward'")
    T = target.polytope if isinstance(target, Target) else target
    S = T.vertices
    pairs = _flow_pairs(H, q, direction)
    tasks = [(fb, loop, s) for fb, loop in pairs for s in S]
    if executor is None:
        recs = [_one_flow(q, s, loop, t_max) for _, loop, s in tasks]
    else:
        recs = list(executor.map(lambda t: _one_flow(q, t[2], t[1], t_max), tasks))
    cands = [Witness(s.copy(), s.copy(), None, None, 0.0) for s in S]
    for (fb, loop, s), rec in zip(tasks, recs):
        if rec is not None:
            cands.append(Witness(rec.X_f, s.copy(), fb, loop, rec.T, rec.face))
    pts = np.array([w.point for w in cands])
    lam = convex_hull(pts, allow_point=True)
    tree = cKDTree(pts)
    witnesses = []
    for v in lam.vertices:
        _, idx = tree.query(v)
        witnesses.append(cands[int(idx)])
    return ReachPiece(q, lam, witnesses, T, direction, exits=len(cands) - len(S),
                      flows=len(tasks))


def verify_witness(q: SimplexCell, w: Witness, tol=1e-6, margin=1e-9, samples=50):
    """Re-simulate a witness: back to its target vertex, staying in the cell."""
    if w.loop is None:
        return bool(np.linalg.norm(w.point - w.target_vertex) <= tol)
    back = reverse(w.loop)
    ts = np.linspace(0.0, w.T, samples)
    Xs = affine_flow(back, w.point, ts)
    inside = np.all(Xs @ q.R.T + q.r >= -margin)
    return bool(inside and np.linalg.norm(Xs[-1] - w.target_vertex) <= tol)


def verify_piece(piece: ReachPiece, **kw):
    return [verify_witness(piece.mode, w, **kw) for w in piece.witnesses]


def guard_face(piece: ReachPiece, facet: int, tol=FACE_TOL):
    """Face of ``Lambda`` on a facet of its mode (``None`` when empty).

    ``Lambda`` lies in the closed cell and the facet supports the cell, so
    the intersection is the hull of the vertices on that facet.
    """
    V = piece.lam.vertices
    beta = V @ piece.mode.R[facet] + piece.mode.r[facet]
    on = V[beta <= tol]
    if len(on) == 0:
        return None
    # snap onto the facet plane
    row = piece.mode.R[facet]
    on = on - np.outer(on @ row + piece.mode.r[facet], row / (row @ row))
    return convex_hull(on, allow_point=True)


def decompose_target(T: Polytope, H: HybridAutomaton, tol=1e-9):
    """Split a target into its intersections with the cells it meets.

    Lower-dimensional slivers (contacts along cell boundaries) are dropped
    when the target has higher-dimensional pieces.
    """
    if T is None or len(T.vertices) == 0:
        raise EmptyTarget("empty target")
    h = H.h
    n = H.n
    lo = T.vertices.min(axis=0)
    hi = T.vertices.max(axis=0)
    pad = tol * max(1.0, T.scale)
    ranges = [range(int(math.floor((a - pad) / h)), int(math.floor((b + pad) / h)) + 1)
              for a, b in zip(lo, hi)]
    pieces = []
    for k in itertools.product(*ranges):
        for phi in itertools.permutations(range(n)):
            q = cell(k, phi, h)
            part = intersect(T, -q.R, -q.r, tol)
            if part is not None:
                pieces.append(Target(part, q))
    if not pieces:
        raise EmptyTarget("target meets no cell")
    top = max(p.polytope.affine_dim for p in pieces)
    return [p for p in pieces if p.polytope.affine_dim == top]


def _contained(q, P, tol=1e-9):
    return bool(np.all(P.vertices @ q.R.T + q.r >= -tol))


def propagate_path(H: HybridAutomaton, gamma, Tf, direction="backward", t_max=100.0,
                   executor=None) -> ReachResult:
    """Chain pieces along a path of adjacent modes.

    ``tau_0`` is the target; ``tau_{i+1}`` is the face of piece ``i`` on the
    guard toward mode ``i + 1``. Stops at the first empty face.
    """
    T = Tf.polytope if isinstance(Tf, Target) else Tf
    gamma = list(gamma)
    if not gamma:
        raise NonAdjacentPath("empty path")
    if not _contained(gamma[0], T):
        raise TargetNotInFirstMode(f"target not inside {gamma[0].id}")
    facets = []
    for a, b in zip(gamma[:-1], gamma[1:]):
        j = shared_facet(a, b)
        if j is None:
            raise NonAdjacentPath(f"{a.id} and {b.id} are not adjacent")
        facets.append(j)
    pieces, targets = [], [T]
    tau = T
    for i, q in enumerate(gamma):
        piece = convex_approx_mode(H, q, tau, direction, t_max, executor)
        piece.parent = i - 1 if i else None
        piece.via_facet = facets[i - 1] if i else None
        piece.level = i
        pieces.append(piece)
        if i + 1 == len(gamma):
            break
        tau = guard_face(piece, facets[i])
        if tau is None:
            break
        targets.append(tau)
    return ReachResult(pieces, gamma[: len(pieces)], targets, direction, h=H.h)


def auto_path(H: HybridAutomaton, Tf, cells, direction="backward", t_max=100.0, executor=None):
    """Path of ``cells`` modes grown greedily from the target.

    The start is the incident cell with the largest piece; each step crosses
    the facet carrying the largest face of the current piece, never
    revisiting a mode.
    """
    T = Tf.polytope if isinstance(Tf, Target) else Tf
    hosts = decompose_target(T, H)
    best = None
    for tg in hosts:
        try:
            piece = convex_approx_mode(H, tg.host, tg.polytope, direction, t_max, executor)
        except EvaluationError:
            continue
        if best is None or piece.size > best[1].size:
            best = (tg, piece)
    if best is None:
        raise EmptyTarget("no host cell of the target could be evaluated")
    tg, piece = best
    pieces, gamma, targets = [piece], [tg.host], [tg.polytope]
    piece.level = 0
    while len(gamma) < cells:
        cur = pieces[-1]
        options = []
        for j in range(cur.mode.n + 1):
            nb = cur.mode.neighbor(j)
            if nb in gamma:
                continue
            tau = guard_face(cur, j)
            if tau is not None:
                options.append(((tau.affine_dim, tau.volume()), j, nb, tau))
        if not options:
            break
        options.sort(key=lambda o: o[0], reverse=True)
        _, j, nb, tau = options[0]
        try:
            nxt = convex_approx_mode(H, nb, tau, direction, t_max, executor)
        except EvaluationError:
            break
        nxt.parent = len(pieces) - 1
        nxt.via_facet = j
        nxt.level = len(pieces)
        pieces.append(nxt)
        gamma.append(nb)
        targets.append(tau)
    return ReachResult(pieces, gamma, targets, direction, h=H.h)


def expand_from_target(H: HybridAutomaton, Tf, depth, direction="backward", t_max=100.0,
                       executor=None) -> ReachResult:
    """Breadth-first expansion through all guards, ``depth`` levels deep.

    Level 0 holds one piece per cell met by the target. A mode reached again
    keeps the larger piece (affine dimension, then volume). Modes whose
    vertex values cannot be evaluated are skipped and reported.
    """
    T = Tf.polytope if isinstance(Tf, Target) else Tf
    if depth < 0:
        raise ValueError("depth must be >= 0")
    best = {}
    order = []
    skipped = []
    frontier = []
    for tg in decompose_target(T, H):
        try:
            piece = convex_approx_mode(H, tg.host, tg.polytope, direction, t_max, executor)
        except EvaluationError as exc:
            skipped.append((tg.host.id, str(exc)))
            continue
        best[tg.host] = piece
        order.append(tg.host)
        frontier.append(tg.host)
    for level in range(1, depth + 1):
        nxt = []
        for q in frontier:
            cur = best[q]
            for j in range(q.n + 1):
                tau = guard_face(cur, j)
                if tau is None:
                    continue
                nb = q.neighbor(j)
                try:
                    piece = convex_approx_mode(H, nb, tau, direction, t_max, executor)
                except EvaluationError as exc:
                    skipped.append((nb.id, str(exc)))
                    continue
                piece.level = level
                piece.via_facet = j
                piece.parent = order.index(q)
                old = best.get(nb)
                if old is None:
                    order.append(nb)
                if old is None or piece.size > old.size:
                    best[nb] = piece
                    if nb not in nxt:
                        nxt.append(nb)
        frontier = nxt
    pieces = [best[q] for q in order]
    return ReachResult(pieces, order, [p.target for p in pieces], direction, skipped, h=H.h)


def is_controllable(X0, result: ReachResult, tol=1e-9):
    """Membership of ``X0`` in the union of pieces.

    Returns ``(found, mode, chain)`` where ``chain`` lists, from the piece
    containing ``X0`` back to the target, ``(piece index, witnesses)``.
    """
    X0 = np.asarray(X0, dtype=float)
    for i, p in enumerate(result.pieces):
        lo, hi = p.lam.vertices.min(axis=0), p.lam.vertices.max(axis=0)
        slack = tol * max(1.0, p.lam.scale)
        if np.any(X0 < lo - slack) or np.any(X0 > hi + slack):
            continue
        if p.lam.contains(X0, tol):
            chain = []
            j = i
            while j is not None:
                chain.append((j, result.pieces[j].witnesses))
                j = result.pieces[j].parent
            return True, p.mode, chain
    return False, None, []


def _hit_time(loop, X0, rec_times, rec_states, target: Polytope):
    d = np.array([point_distance(x, target) for x in rec_states])
    k = int(np.argmin(d))
    if d[k] == 0.0 or len(rec_times) < 2:
        return rec_times[k], d[k]
    a = rec_times[max(k - 1, 0)]
    b = rec_times[min(k + 1, len(rec_times) - 1)]
    res = minimize_scalar(lambda t: point_distance(affine_flow(loop, X0, t), target),
                          bounds=(a, b), method="bounded", options={"xatol": 1e-13})
    if res.fun < d[k]:
        return float(res.x), float(res.fun)
    return rec_times[k], d[k]


def drive_in_mode(piece: ReachPiece, X0, tol=1e-6, t_max=100.0):
    """Try each witness feedback of a piece from ``X0`` toward its target.

    Returns ``(witness, time, end point)`` for the first feedback whose
    trajectory meets the target within ``tol`` before leaving the cell,
    else ``None``.
    """
    q = piece.mode
    X0 = np.asarray(X0, dtype=float)
    if point_distance(X0, piece.target) <= tol:
        return None, 0.0, X0
    tried = set()
    for w in piece.witnesses:
        if w.loop is None or w.feedback.key in tried:
            continue
        tried.add(w.feedback.key)
        drive = reverse(w.loop) if piece.direction == "backward" else w.loop
        try:
            if not enters_cell(q, X0, drive):
                continue
        except PointNotOnCellClosure:
            return None
        horizon = min(t_max, 2.0 * w.T + q.h)
        rec = out_cell(q, X0, drive, t_max=horizon, keep_samples=True)
        if isinstance(rec, ExitRecord):
            times, states = rec.times, rec.states
        else:
            times = np.linspace(0.0, horizon, 200)
            states = affine_flow(drive, X0, times)
        t, d = _hit_time(drive, X0, times, states, piece.target)
        if d <= tol:
            return w, t, affine_flow(drive, X0, t)
    return None


def drive(X0, result: ReachResult, tol=1e-6, t_max=100.0):
    """Forward simulation along witness feedbacks from ``X0`` to the target.

    Returns ``(reached, legs)`` with one ``(mode id, witness, duration, end)``
    leg per piece traversed.
    """
    if result.direction != "backward":
        raise ValueError("driving applies to controllable (backward) results")
    ok, _, chain = is_controllable(X0, result)
    if not ok:
        return False, []
    X = np.asarray(X0, dtype=float)
    legs = []
    for j, _ in chain:
        piece = result.pieces[j]
        got = drive_in_mode(piece, X, tol, t_max)
        if got is None:
            return False, legs
        w, t, X = got
        legs.append((piece.mode.id, w, t, X))
    final = result.pieces[chain[-1][0]].target
    return bool(point_distance(X, final) <= tol), legs


def interior_check(piece: ReachPiece, seed=0, tol=1e-6):
    """Fraction of ``2^n`` interior samples driven to the piece target.

    Points inside ``Lambda`` need not ride a single vertex feedback, so a
    low fraction flags possible overshoot rather than an error.
    """
    if piece.direction != "backward" or piece.lam.affine_dim == 0:
        return 1.0
    rng = np.random.default_rng(seed)
    V = piece.lam.vertices
    count = 2 ** piece.mode.n
    W = rng.dirichlet(np.ones(len(V)), size=count)
    P = 0.5 * (W @ V) + 0.5 * V.mean(axis=0)
    ok = sum(drive_in_mode(piece, p, tol) is not None for p in P)
    piece.interior_ok = ok / count
    return piece.interior_ok


def make_executor(threads):
    if threads and threads > 1:
        return ThreadPoolExecutor(max_workers=threads)
    return None
