"""Polyline loops in the closed domain: length, membership, escape, concatenation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import ImplicitDomain

EDGE_SAMPLES = 8
BASEPOINT_TOL = 1e-12

__all__ = [
    "DiscreteLoop",
    "EDGE_SAMPLES",
    "avoids_point",
    "concatenate",
    "constant_loop",
    "escapes",
    "in_closure",
    "loop_length",
    "segment_point_distance",
    "write_loops_csv",
]


@dataclass(frozen=True, eq=False)
class DiscreteLoop:
    """Closed polyline; the last vertex connects back to the first."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or len(v) < 1:
            raise ValueError("a loop needs at least one vertex given as an (m, n) array")
        if not np.all(np.isfinite(v)):
            raise ValueError("loop vertices must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    @property
    def basepoint(self) -> np.ndarray:
        return self.vertices[0]

    @property
    def m(self) -> int:
        return len(self.vertices)

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    def is_constant(self) -> bool:
        return bool(np.all(self.vertices == self.vertices[0]))

    def edges(self):
        v = self.vertices
        return v, np.roll(v, -1, axis=0)

    def __len__(self):
        return self.m


def constant_loop(x, m: int = 1) -> DiscreteLoop:
    x = np.asarray(x, float)
    return DiscreteLoop(np.repeat(x[None], m, axis=0))


def loop_length(loop: DiscreteLoop) -> float:
    a, b = loop.edges()
    return float(np.sum(np.linalg.norm(b - a, axis=1)))


def _samples(loop: DiscreteLoop, per_edge: int) -> np.ndarray:
    a, b = loop.edges()
    t = np.arange(1, per_edge + 1) / (per_edge + 1)
    inner = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return np.concatenate([loop.vertices, inner.reshape(-1, loop.n)])


def in_closure(domain: ImplicitDomain, loop: DiscreteLoop, per_edge: int = EDGE_SAMPLES) -> bool:
    return bool(np.all(domain.values(_samples(loop, per_edge)) <= domain.tol_boundary))


def escapes(domain: ImplicitDomain, loop: DiscreteLoop, per_edge: int = EDGE_SAMPLES) -> bool:
    """True iff the loop touches the boundary, i.e. leaves the open domain."""
    return bool(np.any(domain.values(_samples(loop, per_edge)) >= -domain.tol_boundary))


def concatenate(loops: Sequence[DiscreteLoop]) -> DiscreteLoop:
    """Traverse the loops in order; they must share a basepoint.

    Constant loops add nothing to the traversal and are skipped, so the
    concatenation of constant loops is again the constant loop.
    """
    if not loops:
        raise ValueError("nothing to concatenate")
    x = loops[0].basepoint
    for lp in loops[1:]:
        if lp.n != loops[0].n or np.max(np.abs(lp.basepoint - x)) > BASEPOINT_TOL:
            raise ValueError(
                f"basepoint mismatch: {lp.basepoint.tolist()} vs {x.tolist()}"
            )
    parts = [lp.vertices for lp in loops if not lp.is_constant()]
    if not parts:
        return DiscreteLoop(x[None])
    # Each part starts at (a copy of) the basepoint and closes back to it.
    verts = [x[None]]
    for v in parts:
        verts.append(v[1:])
        verts.append(x[None])
    verts = np.concatenate(verts)[:-1]
    return DiscreteLoop(verts)


def segment_point_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Distance from ``p`` to each segment ``[a_i, b_i]``."""
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(L2 > 0, np.einsum("ij,ij->i", p - a, ab) / L2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(a + t[:, None] * ab - p, axis=1)


def avoids_point(loop: DiscreteLoop, p, clearance: float) -> bool:
    """True iff the whole polyline stays farther than ``clearance`` from ``p``.

    Uses the exact point-to-segment distance, which dominates any finite
    edge sampling.
    """
    a, b = loop.edges()
    return bool(np.min(segment_point_distance(a, b, np.asarray(p, float))) > clearance)


def write_loops_csv(path, loops: Iterable[DiscreteLoop]) -> None:
    """Rows of (loop id, vertex index, coordinates)."""
    loops = list(loops)
    n = loops[0].n if loops else 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loop", "vertex"] + [f"x{i + 1}" for i in range(n)])
        for k, lp in enumerate(loops):
            for i, v in enumerate(lp.vertices):
                w.writerow([k, i] + [f"{c:.17g}" for c in v])
