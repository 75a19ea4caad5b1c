"""Command-line front end.

Exit codes: 0 success, 1 a check failed (a JSON error report is printed),
2 usage error or unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .billiard import find_critical_configs, write_trajectory_csv
from .capacity import capacity_bracket, report, write_candidates_csv

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
BUILTIN = ("disk", "ellipse", "superellipse", "peanut")


class SpecError(ValueError):
    """Domain spec unreadable or malformed."""


# --------------------------------------------------------------- domain spec


def domain_from_spec(spec: dict) -> geo.ImplicitDomain:
    """Build and validate a domain from its JSON description.

    Builtins: ``{"kind": "disk", "R": 1}``, ``{"kind": "ellipse", "a": 2, "b": 1}``,
    ``{"kind": "superellipse", "p": 4, "scale": 1}``, ``{"kind": "peanut"}``.
    Otherwise ``{"kind": "implicit", "expression": ..., "dimension": n,
    "bbox": [lo, hi]}``.  ``star_center`` and ``tolerances.boundary`` are
    optional overrides.
    """
    if not isinstance(spec, dict):
        raise SpecError("domain spec must be a JSON object")
    kind = spec.get("kind", "implicit")
    kw = {}
    if "name" in spec:
        kw["name"] = str(spec["name"])
    tol = spec.get("tolerances", {}).get("boundary")
    if tol is not None:
        kw["tol_boundary"] = float(tol)
    if "star_center" in spec:
        kw["star_center"] = None if spec["star_center"] is None else np.asarray(spec["star_center"], float)
    try:
        if kind == "disk":
            dom = geo.disk(float(spec.get("R", 1.0)), spec.get("center", (0.0, 0.0)), **kw)
        elif kind == "ellipse":
            dom = geo.ellipse(float(spec.get("a", 2.0)), float(spec.get("b", 1.0)), **kw)
        elif kind == "superellipse":
            dom = geo.superellipse(int(spec.get("p", 4)), float(spec.get("scale", 1.0)), **kw)
        elif kind == "peanut":
            dom = geo.peanut(**kw)
        elif kind == "implicit":
            lo, hi = spec["bbox"]
            dom = geo.from_expression(spec["expression"], lo, hi, spec.get("dimension"), **kw)
        else:
            raise SpecError(f"unknown domain kind {kind!r}; expected one of {BUILTIN + ('implicit',)}")
        dom.validate()
    except SpecError:
        raise
    except (KeyError, TypeError, ValueError, geo.GeometryError) as exc:
        raise SpecError(f"invalid domain spec: {exc}") from exc
    return dom


def load_domain(path) -> geo.ImplicitDomain:
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read domain spec {path}: {exc}") from exc
    return domain_from_spec(spec)


# ------------------------------------------------------------------- output


def fmt(x: float) -> str:
    """Fixed 9-decimal rendering with negative zero folded to zero."""
    v = round(float(x), 9) + 0.0
    return f"{v:.9f}"


def _sig(obj):
    """Round every float to 9 significant digits, recursively."""
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return str(x)
        return float(f"{x:.9g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _sig(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _sig(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sig(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_sig(obj), indent=2, sort_keys=True) + "\n"


def write_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit(obj, out: Optional[str]) -> None:
    text = dumps(obj)
    if out:
        write_atomic(out, text)
    sys.stdout.write(text)


def _fail(message: str, **extra) -> int:
    sys.stdout.write(dumps({"error": message, **extra}))
    return EXIT_CHECK


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BILLIARD_THREADS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------- commands


def cmd_inradius(args) -> int:
    dom = load_domain(args.spec)
    res = geo.inradius(dom)
    c = ", ".join(fmt(v) for v in res.incenter)
    print(f"r={fmt(res.r)} incenter=({c})")
    return EXIT_OK


def cmd_billiard_search(args) -> int:
    dom = load_domain(args.spec)
    found = find_critical_configs(dom, args.k, starts=args.starts, seed=args.seed)
    for i, tr in enumerate(found):
        idx = "-" if tr.morse_index is None else str(tr.morse_index)
        print(
            f"{i} k={tr.k} length={fmt(tr.length)} max_residual={tr.max_residual:.3e} "
            f"index={idx} valid={str(tr.valid).lower()}"
        )
    if args.csv:
        write_trajectory_csv(args.csv, found)
    if not found:
        return _fail(f"no {args.k}-bounce trajectory found", starts=args.starts, seed=args.seed)
    return EXIT_OK


def _parse_schedule(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eps schedule {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty eps schedule")
    return vals


def cmd_billiard_flow(args) -> int:
    from .smoothed_flow import (
        ContinuationError,
        OrbitError,
        continue_to_billiard,
        default_seed,
        write_action_trace_csv,
        write_orbit_csv,
    )

    dom = load_domain(args.spec)
    schedule = args.eps_schedule
    try:
        seed = default_seed(dom, schedule[0])
        tr, trace, orbits = continue_to_billiard(dom, seed, schedule)
    except ContinuationError as exc:
        return _fail(str(exc), last_good_eps=exc.last_good_eps)
    except OrbitError as exc:
        return _fail(str(exc))
    for (eps, tau, A), orb in zip(trace, orbits):
        print(f"eps={eps:.3e} period={fmt(tau)} action={fmt(A)} energy_error={orb.max_energy_error:.3e}")
    print(f"bounces={tr.k} length={fmt(tr.length)} max_residual={tr.max_residual:.3e}")
    if args.csv:
        write_orbit_csv(args.csv, orbits[-1])
    if args.trace_csv:
        write_action_trace_csv(args.trace_csv, trace)
    if args.trajectory_csv:
        write_trajectory_csv(args.trajectory_csv, [tr])
    return EXIT_OK


def cmd_check_liouville(args) -> int:
    from .smoothed_flow import liouville_check

    dom = load_domain(args.spec)
    try:
        rep = liouville_check(dom, args.eps, samples=args.samples, seed=args.seed)
    except geo.GeometryError as exc:
        return _fail(str(exc))
    _emit({"domain": dom.name, **rep.as_dict()}, args.out)
    return EXIT_OK if rep.passed else EXIT_CHECK


def _parse_grid(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected NXxNYxNT")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected NXxNYxNT")
    return vals


def cmd_contract(args) -> int:
    from .contraction import RhoWindowError, certify

    dom = load_domain(args.spec)
    if dom.n != 2:
        return _fail("the contraction certificate is available for planar domains only")
    try:
        cert = certify(dom, args.b, args.grid, seed=args.seed, threads=_threads())
    except RhoWindowError as exc:
        print(str(exc), file=sys.stderr)
        return _fail(str(exc), b=args.b)
    _emit(cert.as_dict(), args.out)
    return EXIT_OK if cert.passed else EXIT_CHECK


def cmd_capacity(args) -> int:
    dom = load_domain(args.spec)
    br = capacity_bracket(dom, starts=args.starts, seed=args.seed, smoothed=args.smoothed)
    cert = None
    if args.certify_b is not None:
        from .contraction import RhoWindowError, certify

        try:
            cert = certify(dom, args.certify_b, seed=args.seed, threads=_threads())
        except RhoWindowError as exc:
            return _fail(str(exc), b=args.certify_b)
    _emit(report(br, cert), args.out)
    if args.csv:
        write_candidates_csv(args.csv, br)
    if cert is not None and not cert.passed:
        return EXIT_CHECK
    return EXIT_OK


# ------------------------------------------------------------------- render


def read_polylines(path) -> list[np.ndarray]:
    """Polylines from a trajectory, loop or orbit CSV.

    Rows are grouped by the first column when it is named ``trajectory``
    or ``loop``; coordinates are the ``x1, x2`` or ``q1, q2`` columns.
    Trajectories and loops are closed.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SpecError(f"{path}: empty CSV")
    head = rows[0]
    for cols in (("x1", "x2"), ("q1", "q2")):
        if all(c in head for c in cols):
            ix, iy = (head.index(c) for c in cols)
            break
    else:
        raise SpecError(f"{path}: no planar coordinate columns")
    closed = head[0] in ("trajectory", "loop")
    groups: dict[str, list] = {}
    for row in rows[1:]:
        key = row[0] if closed else ""
        groups.setdefault(key, []).append((float(row[ix]), float(row[iy])))
    lines = []
    for pts in groups.values():
        P = np.array(pts)
        if closed and len(P) > 1:
            P = np.vstack([P, P[:1]])
        lines.append(P)
    return lines


def boundary_polylines(dom: geo.ImplicitDomain, resolution: int = 300) -> list[np.ndarray]:
    from skimage.measure import find_contours

    xs = np.linspace(dom.lo[0], dom.hi[0], resolution)
    ys = np.linspace(dom.lo[1], dom.hi[1], resolution)
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    vals = dom.values(grid).reshape(resolution, resolution)
    pitch = (dom.hi - dom.lo) / (resolution - 1)
    return [dom.lo + c * pitch for c in find_contours(vals, 0.0)]


def render_svg(lines: Sequence[np.ndarray], boundary: Sequence[np.ndarray] = (), size: int = 600) -> str:
    allpts = np.vstack(list(lines) + list(boundary)) if (lines or boundary) else np.zeros((1, 2))
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 0.05 * span
    scale = size / (span + 2 * pad)

    def path(P):
        Q = (P - lo + pad) * scale
        Q[:, 1] = size - Q[:, 1]
        return " ".join(f"{x:.3f},{y:.3f}" for x, y in Q)

    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for P in boundary:
        out.append(f'<polyline points="{path(P)}" fill="none" stroke="black" stroke-width="1.5"/>')
    for i, P in enumerate(lines):
        c = colors[i % len(colors)]
        out.append(f'<polyline points="{path(P)}" fill="none" stroke="{c}" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_render(args) -> int:
    lines = read_polylines(args.csv)
    boundary = []
    if args.domain:
        dom = load_domain(args.domain)
        if dom.n != 2:
            raise SpecError("render is planar only")
        boundary = boundary_polylines(dom)
    write_atomic(args.out, render_svg(lines, boundary))
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="billiard-capacity", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inradius", help="inradius and incenter of a domain")
    p.add_argument("spec")
    p.set_defaults(func=cmd_inradius)

    bil = sub.add_parser("billiard", help="periodic billiard trajectories")
    bsub = bil.add_subparsers(dest="mode", required=True)
    p = bsub.add_parser("search", help="variational multistart search")
    p.add_argument("spec")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--starts", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write bounce points")
    p.set_defaults(func=cmd_billiard_search)
    p = bsub.add_parser("flow", help="limit of smoothed Hamiltonian orbits")
    p.add_argument("spec")
    p.add_argument("--eps-schedule", type=_parse_schedule, default=(1e-2, 1e-3, 1e-4, 1e-5))
    p.add_argument("--csv", help="write the last orbit")
    p.add_argument("--trace-csv", help="write eps, period, action")
    p.add_argument("--trajectory-csv", help="write the extracted bounce points")
    p.set_defaults(func=cmd_billiard_flow)

    chk = sub.add_parser("check", help="numerical checks")
    csub = chk.add_subparsers(dest="check", required=True)
    p = csub.add_parser("liouville", aliases=["lemma65"], help="Liouville field inequality on samples")
    p.add_argument("spec")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_liouville)

    p = sub.add_parser("contract", help="contraction certificate above the upper bound")
    p.add_argument("spec")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--grid", type=_parse_grid, default=(50, 50, 11))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_contract)

    p = sub.add_parser("capacity", help="bracket report with candidates")
    p.add_argument("spec")
    p.add_argument("--certify-b", type=float)
    p.add_argument("--starts", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smoothed", action="store_true", help="add the smoothed-flow limit")
    p.add_argument("--out")
    p.add_argument("--csv", help="write the candidate table")
    p.set_defaults(func=cmd_capacity)

    p = sub.add_parser("render", help="SVG of a CSV of trajectories, orbits or loops")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--domain", help="domain spec whose boundary is drawn")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
