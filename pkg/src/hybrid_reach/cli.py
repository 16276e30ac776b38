"""Command-line front end: subcommands, config merging and run manifests.

Every run writes its outputs to ``--out`` together with ``manifest.json``
(resolved inputs, library versions, timings, sha256 of each output file).
Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import expr as ex
from .dynamics import BUILTINS, load_model
from .errors import DomainError, EmptyTarget
from .geometry import Polytope, convex_hull, hausdorff_distance
from .hybridize import HybridAutomaton, hybridize_check
from .mesh import MeshConfig, cell_from_id, locate_simplex
from .pmp import normalize_direction, simulate_extremal
from .reach import (
    auto_path,
    expand_from_target,
    interior_check,
    make_executor,
    propagate_path,
    verify_piece,
)

THREADS_ENV = "HYBRID_REACH_THREADS"

# option name -> default; a None default means "required by some command"
DEFAULTS = {
    "model": "spring",
    "h": None,
    "region": None,
    "target": "@origin",
    "out": "out",
    "threads": None,
    "seed": 0,
    "direction": "backward",
    "t_max": 100.0,
    "cells": 3,
    "path": "auto",
    "modes": None,
    "depth": 1,
    "x0": None,
    "x": None,
    "lambda0": None,
    "lambda_dir": None,
    "budget": 100.0,
    "samples": 10000,
    "interior": False,
    "a": None,
    "b": None,
}


class UsageError(Exception):
    pass


# parsing helpers

def parse_vector(text, n=None):
    """Comma-separated numbers; each entry may be an expression like ``pi/2``."""
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = []
        for tok in str(text).split(","):
            tok = tok.strip()
            if not tok:
                raise UsageError(f"empty entry in vector {text!r}")
            try:
                vals.append(float(tok))
            except ValueError:
                tree = ex.parse_expr(tok, n=0, m=0)
                vals.append(float(ex.evaluate_checked(tree, np.zeros((1, 0)))[0]))
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} numbers, got {len(vals)} in {text!r}")
    return np.array(vals, dtype=float)


def parse_region(text, n):
    """Box ``lo1,..,lon:hi1,..,hin`` (or a ``[lo, hi]`` pair from JSON)."""
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        lo, hi = text
    else:
        if ":" not in str(text):
            raise UsageError("region must look like lo1,lo2:hi1,hi2")
        lo, hi = str(text).split(":", 1)
    lo, hi = parse_vector(lo, n), parse_vector(hi, n)
    if np.any(lo >= hi):
        raise UsageError("region needs lo < hi in every coordinate")
    return lo, hi


def parse_target(text, n) -> Polytope:
    """``@origin``, ``@point:x1,..,xn`` or a JSON file (polytope or vertex list)."""
    if isinstance(text, dict):
        return _polytope_from_data(text, n)
    text = str(text)
    if text == "@origin":
        return convex_hull(np.zeros((1, n)), allow_point=True)
    if text.startswith("@point:"):
        return convex_hull(parse_vector(text[7:], n)[None, :], allow_point=True)
    if text.startswith("@"):
        raise UsageError(f"unknown target shorthand {text!r}")
    path = Path(text)
    if not path.exists():
        raise UsageError(f"target file {text!r} not found")
    return _polytope_from_data(json.loads(path.read_text()), n)


def _polytope_from_data(data, n):
    if isinstance(data, list):
        pts = np.asarray(data, dtype=float)
        if pts.size == 0:
            raise EmptyTarget("target has no vertices")
        return convex_hull(pts.reshape(-1, n), allow_point=True)
    if "dim" not in data:
        data = dict(data, dim=n)
    P = Polytope.from_json(data)
    if P.dim != n:
        raise UsageError(f"target dimension {P.dim} does not match the model ({n})")
    return P


def resolve_threads(opt):
    """Flag, then environment, then config; at least 1."""
    if opt.get("threads_flag") is not None:
        return max(1, int(opt["threads_flag"]))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer") from exc
    return max(1, int(opt.get("threads") or 1))


# output helpers

def fmt(x):
    """Round-trip float text (``repr``) for CSV cells."""
    return repr(float(x))


def write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def sha256(path: Path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects output files and timings for the manifest."""

    def __init__(self, command, opt):
        self.command = command
        self.opt = opt
        self.out = Path(opt["out"])
        self.files = []
        self.timings = {}
        self._t0 = time.perf_counter()

    def add(self, path):
        self.files.append(Path(path))

    def time(self, name, fn, *args, **kw):
        t = time.perf_counter()
        res = fn(*args, **kw)
        self.timings[name] = time.perf_counter() - t
        return res

    def manifest(self, threads):
        self.timings["total"] = time.perf_counter() - self._t0
        inputs = {k: v for k, v in self.opt.items() if k not in ("config", "threads_flag")}
        data = {
            "command": self.command,
            "inputs": inputs,
            "threads": threads,
            "versions": {
                "hybrid_reach": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "timings_s": self.timings,
            "outputs": [
                {"path": str(p.relative_to(self.out)), "sha256": sha256(p)}
                for p in sorted(self.files)
            ],
        }
        return write_json(self.out / "manifest.json", data)


# commands

def _automaton(opt):
    model = load_model(opt["model"])
    if opt["h"] is None:
        raise UsageError("--h is required")
    h = float(opt["h"])
    if not h > 0:
        raise UsageError("--h must be positive")
    return model, HybridAutomaton.from_model(model, h)


def _target(opt, model):
    T = parse_target(opt["target"], model.n)
    region = parse_region(opt["region"], model.n)
    if region is not None:
        lo, hi = region
        V = T.vertices
        if np.any(V < lo - 1e-12) or np.any(V > hi + 1e-12):
            raise DomainError("the target is not inside the region")
    return T


def cmd_models(opt, run):
    rows = []
    for name in BUILTINS:
        m = load_model(name)
        rows.append(m.describe())
    text = json.dumps(rows, indent=2)
    print(text)
    run.add(write_json(run.out / "models.json", rows))


def cmd_locate(opt, run):
    model = load_model(opt["model"])
    if opt["x"] is None or opt["h"] is None:
        raise UsageError("locate needs --x and --h")
    X = parse_vector(opt["x"], model.n)
    cfg = MeshConfig(model.n, model.m, float(opt["h"]))
    cells = locate_simplex(X, cfg)
    data = {"x": X.tolist(), "cells": [
        {"id": q.id, "vertices": q.vertices.tolist(), "barycentric": q.barycentric(X).tolist()}
        for q in cells]}
    print(json.dumps(data, indent=2))
    run.add(write_json(run.out / "locate.json", data))


def cmd_hybridize_check(opt, run):
    model = load_model(opt["model"])
    if opt["h"] is None:
        raise UsageError("--h is required")
    region = parse_region(opt["region"], model.n) or (
        parse_region(list(model.region), model.n) if model.region else None)
    if region is None:
        raise UsageError("--region is required for this model")
    rep = run.time("check", hybridize_check, model, float(opt["h"]), region,
                   samples=int(opt["samples"]), seed=int(opt["seed"]))
    print(json.dumps(rep, indent=2))
    run.add(write_json(run.out / "summary.json", rep))


def _export_reach(run, model, H, result, opt):
    pieces_dir = run.out / "pieces"
    rows = []
    verified = []
    for i, p in enumerate(result.pieces):
        ok = verify_piece(p)
        verified.extend(ok)
        if opt["interior"]:
            interior_check(p, seed=int(opt["seed"]))
        data = p.to_json()
        data["index"] = i
        data["witnesses_verified"] = ok
        run.add(write_json(pieces_dir / f"piece_{i:03d}.json", data))
        for v in p.lam.vertices:
            rows.append([i, p.mode.id] + [fmt(c) for c in v])
    header = ["piece", "mode"] + [f"x{j + 1}" for j in range(model.n)]
    run.add(write_csv(run.out / "vertices.csv", header, rows))
    cart = model.extras.get("cartesian")
    if cart is not None and rows:
        V = result.vertices()
        C = cart(V)
        crow = [[r[0], r[1]] + [fmt(c) for c in c_] for r, c_ in zip(rows, C)]
        run.add(write_csv(run.out / "cartesian.csv", ["piece", "mode", "r1", "r2", "v1", "v2"], crow))
    summary = {
        "model": model.name,
        "h": H.h,
        "direction": result.direction,
        "pieces": len(result.pieces),
        "path": [q.id for q in result.path],
        "piece_dims": [p.lam.affine_dim for p in result.pieces],
        "vertices": len(rows),
        "witnesses": len(verified),
        "witnesses_verified": int(sum(verified)),
        "all_verified": bool(all(verified)),
        "hausdorff_bound": result.hausdorff_bound,
        "skipped": [list(s) for s in result.skipped],
        "vertex_evaluations": H.evaluations,
    }
    if opt["interior"]:
        summary["interior_ok"] = [p.interior_ok for p in result.pieces]
    print(json.dumps(summary, indent=2))
    run.add(write_json(run.out / "summary.json", summary))


def cmd_reach_path(opt, run):
    model, H = _automaton(opt)
    T = _target(opt, model)
    pool = make_executor(run.threads)
    try:
        # listing modes implies an explicit path
        kind = "explicit" if opt["modes"] else opt["path"]
        if kind == "auto":
            res = run.time("reach", auto_path, H, T, int(opt["cells"]), opt["direction"],
                           float(opt["t_max"]), pool)
        elif kind == "explicit":
            if not opt["modes"]:
                raise UsageError("--path explicit needs at least one --mode")
            gamma = [cell_from_id(s, H.h) for s in opt["modes"]]
            res = run.time("reach", propagate_path, H, gamma, T, opt["direction"],
                           float(opt["t_max"]), pool)
        else:
            raise UsageError("--path must be auto or explicit")
    finally:
        if pool is not None:
            pool.shutdown()
    _export_reach(run, model, H, res, opt)


def cmd_reach_expand(opt, run):
    model, H = _automaton(opt)
    T = _target(opt, model)
    pool = make_executor(run.threads)
    try:
        res = run.time("reach", expand_from_target, H, T, int(opt["depth"]), opt["direction"],
                       float(opt["t_max"]), pool)
    finally:
        if pool is not None:
            pool.shutdown()
    _export_reach(run, model, H, res, opt)


def cmd_extremal(opt, run):
    model, H = _automaton(opt)
    if opt["x0"] is None:
        raise UsageError("extremal needs --x0")
    X0 = parse_vector(opt["x0"], model.n)
    T = parse_target(opt["target"], model.n) if opt["target"] else None
    if opt["lambda0"] is not None:
        lam0 = parse_vector(opt["lambda0"], model.n)
    elif opt["lambda_dir"] is not None:
        d = parse_vector(opt["lambda_dir"], model.n)
        lam0 = normalize_direction(H, H.locate(X0), X0, model.cost, d)
    else:
        raise UsageError("extremal needs --lambda0 or --lambda-dir")
    region = parse_region(opt["region"], model.n)
    traj = run.time("extremal", simulate_extremal, H, X0, lam0, model.cost, T,
                    float(opt["budget"]), region)
    n, m = model.n, model.m
    header = (["t", "mode"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
              + [f"lambda{i + 1}" for i in range(n)] + ["H"])
    rows = [[fmt(t), q] + [fmt(v) for v in x] + [fmt(v) for v in np.atleast_1d(u)]
            + [fmt(v) for v in lm] + [fmt(hv)] for t, q, x, u, lm, hv in traj.rows()]
    run.add(write_csv(run.out / "trajectory.csv", header, rows))
    cart = model.extras.get("cartesian")
    if cart is not None and rows:
        S = np.array([r[2] for r in traj.rows()])
        C = cart(S)
        crow = [[fmt(r[0])] + [fmt(c) for c in c_] for r, c_ in zip(traj.rows(), C)]
        run.add(write_csv(run.out / "cartesian.csv", ["t", "r1", "r2", "v1", "v2"], crow))
    summary = traj.summary()
    summary.update({"model": model.name, "h": H.h, "x0": X0.tolist(), "lambda0": lam0.tolist()})
    print(json.dumps(summary, indent=2))
    run.add(write_json(run.out / "summary.json", summary))


def _load_set(text):
    path = Path(text)
    if not path.exists():
        raise UsageError(f"file {text!r} not found")
    if path.suffix == ".csv":
        with path.open() as fh:
            rows = list(csv.reader(fh))
        cols = [i for i, c in enumerate(rows[0]) if c.startswith("x")]
        pts = np.array([[float(r[i]) for i in cols] for r in rows[1:]])
        return convex_hull(pts, allow_point=True)
    data = json.loads(path.read_text())
    if isinstance(data, dict) and "polytope" in data:
        data = data["polytope"]
    if isinstance(data, list):
        return convex_hull(np.asarray(data, dtype=float), allow_point=True)
    return Polytope.from_json(data)


def cmd_hausdorff(opt, run):
    if opt["a"] is None or opt["b"] is None:
        raise UsageError("hausdorff needs --a and --b")
    A, B = _load_set(opt["a"]), _load_set(opt["b"])
    data = {"hausdorff": float(hausdorff_distance(A, B))}
    print(json.dumps(data))
    run.add(write_json(run.out / "summary.json", data))


COMMANDS = {
    "models": cmd_models,
    "locate": cmd_locate,
    "hybridize-check": cmd_hybridize_check,
    "reach-path": cmd_reach_path,
    "reach-expand": cmd_reach_expand,
    "extremal": cmd_extremal,
    "hausdorff": cmd_hausdorff,
}


def build_parser():
    p = argparse.ArgumentParser(prog="hybrid-reach",
                                description="Hybridization, reachability and extremals on a simplicial mesh.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mesh=True):
        sp.add_argument("--config", help="JSON file of options; flags win")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int)
        if mesh:
            sp.add_argument("--model", help="built-in name or JSON model file")
            sp.add_argument("--h", type=float, help="mesh step")
        return sp

    common(sub.add_parser("models", help="list built-in models"), mesh=False)
    sp = common(sub.add_parser("locate", help="cells containing a point"))
    sp.add_argument("--x", help="point, comma separated")
    sp = common(sub.add_parser("hybridize-check", help="interpolation error versus its bound"))
    sp.add_argument("--region", help="state box lo1,..:hi1,..")
    sp.add_argument("--samples", type=int)
    for name in ("reach-path", "reach-expand"):
        sp = common(sub.add_parser(name, help="controllable-domain approximation"))
        sp.add_argument("--target", help="@origin, @point:x1,.. or JSON file")
        sp.add_argument("--region", help="state box lo1,..:hi1,.. that must contain the target")
        sp.add_argument("--direction", choices=["backward", "forward"])
        sp.add_argument("--t-max", type=float, dest="t_max")
        sp.add_argument("--threads", type=int, dest="threads_flag")
        sp.add_argument("--interior", action="store_true", default=None,
                        help="also sample interior points of each piece")
        if name == "reach-path":
            sp.add_argument("--cells", type=int)
            sp.add_argument("--path", choices=["auto", "explicit"])
            sp.add_argument("--mode", action="append", dest="modes",
                            help="cell id of the explicit path (repeat, target cell first)")
        else:
            sp.add_argument("--depth", type=int)
    sp = common(sub.add_parser("extremal", help="simulate a hybrid extremal"))
    sp.add_argument("--x0")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--lambda0")
    g.add_argument("--lambda-dir", dest="lambda_dir")
    sp.add_argument("--target")
    sp.add_argument("--region", help="stop when leaving this box")
    sp.add_argument("--budget", type=float, help="time horizon")
    sp = common(sub.add_parser("hausdorff", help="distance between two polytopes"), mesh=False)
    sp.add_argument("--a")
    sp.add_argument("--b")
    return p


def resolve_options(ns):
    """Defaults, overridden by the config file, overridden by flags."""
    opt = dict(DEFAULTS)
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.exists():
            raise UsageError(f"config file {ns.config!r} not found")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opt.update(cfg)
    opt["threads_flag"] = None
    for k, v in vars(ns).items():
        if k != "command" and v is not None:
            opt[k] = v
    return opt


def _error(kind, message, code, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opt = resolve_options(ns)
        r = Run(ns.command, opt)
        r.threads = resolve_threads(opt)
        COMMANDS[ns.command](opt, r)
        r.manifest(r.threads)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _error("UsageError", str(exc), 2)
    except DomainError as exc:
        return _error(type(exc).__name__, str(exc), 1, **_extra(exc))
    return 0


def _extra(exc):
    data = exc.to_json() if hasattr(exc, "to_json") else {}
    return {k: v for k, v in data.items() if k not in ("error", "message")}


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
