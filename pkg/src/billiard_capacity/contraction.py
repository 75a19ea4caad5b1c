"""Explicit contraction of the constant-loop family above the upper threshold.

For ``b > 2(n+1) r`` the map ``C(x, t)`` sends each point of the closed
domain to a loop of length below ``b``: a concatenation, over the stars of
a triangulation that contain ``x``, of out-and-back excursions towards the
boundary.  :func:`certify` evaluates ``C`` on a sample grid and records
every property it must satisfy.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import BoundarySampler, ImplicitDomain, ProjectionError, inradius, project_points
from .loops import DiscreteLoop, concatenate, constant_loop, escapes, in_closure, loop_length

ETA_FRACTION = 0.9
ETA_CAP = 0.25
SIGMA_LEG = 4
DEGENERATE_AREA = 1e-12
MERGE_FRACTION = 1e-3
JITTER_FRACTION = 1e-6

__all__ = [
    "DescentError",
    "HomotopyCertificate",
    "RhoWindowError",
    "SigmaFamily",
    "StarCover",
    "build_star_cover",
    "certify",
    "choose_eta",
    "choose_rho",
    "contraction_loop",
    "sigma_p",
]


class RhoWindowError(ValueError):
    """No admissible rho: the construction needs b > 2(n+1)r."""


class DescentError(RuntimeError):
    """The boundary-reaching leg of an excursion could not be built."""


def choose_rho(r: float, n: int, b: float) -> float:
    """Midpoint of the window ``(2r, b/(n+1))``."""
    if not r > 0:
        raise ValueError("inradius must be positive")
    if n < 2:
        raise ValueError("dimension must be at least 2")
    if b <= 2 * (n + 1) * r:
        raise RhoWindowError(
            f"rho window empty: b <= 2(n+1)r ({b!r} <= {2 * (n + 1) * r:.9g})"
        )
    return 0.5 * (2.0 * r + b / (n + 1))


def choose_eta(r: float, rho: float) -> float:
    """Radius of the neighbourhoods on which one excursion family is used."""
    return min(ETA_FRACTION * (0.5 * rho - r), ETA_CAP * r)


# ---------------------------------------------------------------- excursions


def _foot(domain: ImplicitDomain, p: np.ndarray):
    try:
        Y, _, D = project_points(domain, p[None])
    except ProjectionError as exc:
        raise DescentError(f"no boundary leg from {p.tolist()}: {exc}") from exc
    return Y[0], float(D[0])


def sigma_p(
    domain: ImplicitDomain,
    p,
    x,
    t: float,
    rho: float,
    *,
    foot=None,
    eta: Optional[float] = None,
    per_leg: int = SIGMA_LEG,
) -> DiscreteLoop:
    """Out-and-back loop at ``x`` along ``[x, p]`` then the descent leg of ``p``.

    The descent of the distance function from ``p`` runs straight to the
    nearest boundary point, so the path ``Gamma(x)`` is two segments of
    total length ``|x - p| + d(p)``.  The loop follows ``Gamma(x)`` up to the
    fraction ``t`` of its length and returns the same way; its length is
    ``2 t (|x - p| + d(p))``.  ``foot`` is ``(y, d(p))`` when already known.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    p = np.asarray(p, float)
    x = np.asarray(x, float)
    if t == 0.0:
        return constant_loop(x)
    a = float(np.linalg.norm(x - p))
    if eta is not None and a > eta:
        raise ValueError(f"x is {a:.3e} from p, outside the eta = {eta:.3e} neighbourhood")
    y, d = _foot(domain, p) if foot is None else (np.asarray(foot[0], float), float(foot[1]))
    if a + d >= 0.5 * rho:
        raise DescentError(f"path length {a + d:.9g} is not below rho/2 = {0.5 * rho:.9g}")
    total = a + d
    if total == 0.0:
        return constant_loop(x)
    reach = t * total
    s = np.linspace(0.0, reach, per_leg + 1)
    if 0.0 < a < reach:
        s = np.unique(np.append(s, a))
    pts = np.empty((len(s), len(x)))
    first = s <= a
    if a > 0:
        pts[first] = x + (s[first] / a)[:, None] * (p - x)
    else:
        pts[first] = x
    if d > 0:
        pts[~first] = p + ((s[~first] - a) / d)[:, None] * (y - p)
    pts[0] = x
    return DiscreteLoop(np.concatenate([pts, pts[-2:0:-1]]))


# ---------------------------------------------------------------- star cover


@dataclass(eq=False)
class StarCover:
    """Planar triangulation of the closed domain with its hat functions.

    ``vertices`` and ``simplices`` describe the kept triangles.  Points in
    the thin gaps between the polygon and the curved boundary take the hats
    of their nearest polygon point.
    """

    domain: ImplicitDomain
    vertices: np.ndarray
    simplices: np.ndarray
    on_boundary: np.ndarray
    pitch: float
    max_diam: float
    max_simplex_diam: float
    snapped: int
    dropped: int
    _tri: Delaunay = field(repr=False)
    _kept: np.ndarray = field(repr=False)
    _edges: np.ndarray = field(repr=False)
    _edge_tri: np.ndarray = field(repr=False)
    _edge_tree: cKDTree = field(repr=False)

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    @property
    def m(self) -> int:
        return len(self.vertices)

    def _bary(self, s: np.ndarray, X: np.ndarray) -> np.ndarray:
        T = self._tri.transform[s]
        l12 = np.einsum("kij,kj->ki", T[:, :2], X - T[:, 2])
        return np.column_stack([l12, 1.0 - l12.sum(axis=1)])

    def locate(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(vertex ids (N, 3), barycentric weights (N, 3), retracted mask)``."""
        X = np.atleast_2d(np.asarray(X, float))
        s = self._tri.find_simplex(X)
        ok = s >= 0
        ok[ok] = self._kept[s[ok]] >= 0
        P = X.copy()
        if not ok.all():
            miss = np.flatnonzero(~ok)
            k = min(8, len(self._edges))
            _, cand = self._edge_tree.query(X[miss], k=k)
            cand = np.asarray(cand).reshape(len(miss), k)
            A = self.vertices[self._edges[cand, 0]]
            B = self.vertices[self._edges[cand, 1]]
            AB = B - A
            u = np.einsum("mkj,mkj->mk", X[miss, None] - A, AB) / np.einsum("mkj,mkj->mk", AB, AB)
            Q = A + np.clip(u, 0.0, 1.0)[..., None] * AB
            dist = np.linalg.norm(Q - X[miss, None], axis=2)
            best = dist.argmin(axis=1)
            rows = np.arange(len(miss))
            P[miss] = Q[rows, best]
            s[miss] = self._edge_tri[cand[rows, best]]
        lam = np.clip(self._bary(s, P), 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        ids = self._tri.simplices[s]
        return ids, lam, ~ok

    def multiplicity(self, X) -> np.ndarray:
        """Number of open stars containing each point."""
        _, lam, _ = self.locate(X)
        return np.count_nonzero(lam > 0, axis=1)

    def summary(self) -> dict:
        return {
            "vertices": int(self.m),
            "simplices": int(len(self.simplices)),
            "boundary_vertices": int(self.on_boundary.sum()),
            "pitch": self.pitch,
            "max_diam": self.max_diam,
            "max_simplex_diam": self.max_simplex_diam,
            "snapped": int(self.snapped),
            "dropped": int(self.dropped),
        }


def _tri_diam(P: np.ndarray) -> np.ndarray:
    e = [np.linalg.norm(P[:, i] - P[:, j], axis=1) for i, j in ((0, 1), (1, 2), (0, 2))]
    return np.max(e, axis=0)


def build_star_cover(domain: ImplicitDomain, max_diam: float) -> StarCover:
    """Snapped-grid triangulation with simplex diameters below ``max_diam``.

    Grid vertices of pitch ``max_diam / (2 sqrt 2)`` are kept inside the
    domain (moved by at most ``1e-6`` pitch); outside vertices of cells meeting the boundary are projected
    onto it.  The vertex set is joined by a Delaunay triangulation, which
    splits every interior square in two and cannot fold near the boundary.
    Triangles outside the domain, degenerate ones and ones that are too
    large are dropped.
    """
    if domain.n != 2:
        raise ValueError("the star cover is built for planar domains only")
    if not max_diam > 0:
        raise ValueError("max_diam must be positive")
    h = max_diam / (2.0 * math.sqrt(2.0))
    lo = domain.lo - h
    N = np.ceil((domain.hi - domain.lo) / h).astype(int) + 2
    gx = lo[0] + h * np.arange(N[0] + 1)
    gy = lo[1] + h * np.arange(N[1] + 1)
    G = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    out = (domain.values(G) > 0).reshape(N[0] + 1, N[1] + 1)
    corners = np.stack([out[:-1, :-1], out[1:, :-1], out[1:, 1:], out[:-1, 1:]])
    mixed = corners.any(axis=0) & ~corners.all(axis=0)
    touch = np.zeros_like(out)
    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
        touch[di : di + N[0], dj : dj + N[1]] |= mixed
    snap = (out & touch).ravel()
    inside = ~out.ravel()
    Y, _, _ = project_points(domain, G[snap])
    # co-circular grid squares make Qhull slow; a fixed tiny jitter breaks the ties
    jitter = JITTER_FRACTION * h * np.random.default_rng(0).uniform(-1.0, 1.0, (int(inside.sum()), 2))
    P = np.concatenate([G[inside] + jitter, Y])
    bnd = np.concatenate([np.zeros(inside.sum(), bool), np.ones(len(Y), bool)])
    # merge snapped vertices that landed on top of another vertex
    drop = set()
    for i, j in sorted(cKDTree(P).query_pairs(MERGE_FRACTION * h)):
        if i in drop or j in drop:
            continue
        if bnd[j]:
            drop.add(j)
        elif bnd[i]:
            drop.add(i)
    if drop:
        keep = np.setdiff1d(np.arange(len(P)), sorted(drop))
        P, bnd = P[keep], bnd[keep]
    tri = Delaunay(P)
    S = tri.simplices
    V = P[S]
    area = 0.5 * np.abs(
        (V[:, 1, 0] - V[:, 0, 0]) * (V[:, 2, 1] - V[:, 0, 1])
        - (V[:, 2, 0] - V[:, 0, 0]) * (V[:, 1, 1] - V[:, 0, 1])
    )
    diam = _tri_diam(V)
    probes = np.concatenate([V.mean(axis=1), 0.5 * (V[:, 0] + V[:, 1]), 0.5 * (V[:, 1] + V[:, 2]), 0.5 * (V[:, 0] + V[:, 2])])
    inside_ok = (domain.values(probes).reshape(4, -1) <= domain.tol_boundary).all(axis=0)
    ok = inside_ok & (area >= DEGENERATE_AREA * h * h) & (diam < max_diam)
    small = inside_ok & ~ok
    if small.any():
        warnings.warn(f"{domain.name}: dropped {int(small.sum())} degenerate or oversized triangles")
    kept = np.full(len(S), -1)
    kept[ok] = np.arange(ok.sum())
    # edges of kept triangles with no kept neighbour across them
    nb = tri.neighbors
    edges, edge_tri = [], []
    for k in range(3):
        other = nb[:, k]
        border = ok & ((other < 0) | ~ok[np.maximum(other, 0)])
        idx = np.flatnonzero(border)
        a = S[idx, (k + 1) % 3]
        b_ = S[idx, (k + 2) % 3]
        edges.append(np.column_stack([a, b_]))
        edge_tri.append(idx)
    edges = np.concatenate(edges)
    edge_tri = np.concatenate(edge_tri)
    mids = 0.5 * (P[edges[:, 0]] + P[edges[:, 1]])
    return StarCover(
        domain=domain,
        vertices=P,
        simplices=S[ok],
        on_boundary=bnd,
        pitch=h,
        max_diam=float(max_diam),
        max_simplex_diam=float(diam[ok].max()),
        snapped=int(bnd.sum()),
        dropped=int(small.sum()),
        _tri=tri,
        _kept=kept,
        _edges=edges,
        _edge_tri=edge_tri,
        _edge_tree=cKDTree(mids),
    )


class SigmaFamily:
    """Excursion loops ``sigma_j`` anchored at the cover vertices."""

    def __init__(self, cover: StarCover, rho: float, eta: float, per_leg: int = SIGMA_LEG):
        self.cover = cover
        self.rho = rho
        self.eta = eta
        self.per_leg = per_leg
        self._feet: dict[int, tuple[np.ndarray, float]] = {}

    def prepare(self, ids) -> None:
        """Project the anchors ``ids`` in one batch."""
        ids = sorted({int(j) for j in np.ravel(ids)} - self._feet.keys())
        V = self.cover.vertices
        todo = [j for j in ids if not self.cover.on_boundary[j]]
        for j in ids:
            if self.cover.on_boundary[j]:
                self._feet[j] = (V[j], 0.0)
        if todo:
            try:
                Y, _, D = project_points(self.cover.domain, V[todo])
            except ProjectionError as exc:
                raise DescentError(str(exc)) from exc
            for j, y, d in zip(todo, Y, D):
                self._feet[j] = (y, float(d))

    def foot(self, j: int):
        if j not in self._feet:
            self.prepare([j])
        return self._feet[j]

    def __call__(self, j: int, x, t: float) -> DiscreteLoop:
        return sigma_p(
            self.cover.domain, self.cover.vertices[j], x, t, self.rho,
            foot=self.foot(j), eta=self.eta, per_leg=self.per_leg,
        )


def _active(cover: StarCover, x):
    ids, lam, _ = cover.locate(np.asarray(x, float)[None])
    pos = lam[0] > 0
    order = np.argsort(ids[0][pos])
    return ids[0][pos][order], lam[0][pos][order]


def _compose(family: SigmaFamily, x, t, ids, lam) -> DiscreteLoop:
    x = np.asarray(x, float)
    n1 = family.cover.n + 1
    parts = [constant_loop(x)]
    for j, beta in zip(ids, lam):
        chi = min(max(n1 * float(beta), 0.0), 1.0)
        parts.append(family(int(j), x, chi * t))
    return concatenate(parts)


def contraction_loop(cover: StarCover, family: SigmaFamily, x, t: float) -> DiscreteLoop:
    """``C(x, t)``: the excursions of the stars containing ``x``, in index order."""
    ids, lam = _active(cover, x)
    return _compose(family, x, t, ids, lam)


# ---------------------------------------------------------------- certificate


@dataclass
class HomotopyCertificate:
    domain: str
    n: int
    b: float
    r: float
    rho: float
    eta: float
    cover: dict
    grid: dict
    checks: dict
    tolerances: dict
    passed: bool

    def as_dict(self) -> dict:
        return {
            "kind": "homotopy-certificate",
            "domain": self.domain,
            "n": self.n,
            "b": self.b,
            "r": self.r,
            "rho": self.rho,
            "eta": self.eta,
            "cover": self.cover,
            "grid": self.grid,
            "checks": self.checks,
            "tolerances": self.tolerances,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _samples(domain: ImplicitDomain, nx: int, ny: int, nb: int):
    xs = np.linspace(domain.lo[0], domain.hi[0], nx)
    ys = np.linspace(domain.lo[1], domain.hi[1], ny)
    G = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    inner = G[domain.values(G) <= 0]
    S = BoundarySampler(domain).points
    B = S[np.linspace(0, len(S), nb, endpoint=False).astype(int)]
    return inner, B


def _uniform_closure(domain: ImplicitDomain, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out, have = [], 0
    while have < count:
        X = rng.uniform(domain.lo, domain.hi, size=(2 * count, domain.n))
        X = X[domain.values(X) <= 0]
        out.append(X)
        have += len(X)
    return np.concatenate(out)[:count]


def _check(ok: bool, margin: float, violation=None) -> dict:
    out = {"passed": bool(ok), "margin": float(margin)}
    if violation is not None:
        out["violation"] = violation
    return out


def certify(
    domain: ImplicitDomain,
    b: float,
    grid: Sequence[int] = (50, 50, 11),
    *,
    boundary_samples: Optional[int] = None,
    multiplicity_samples: int = 10_000,
    per_leg: int = SIGMA_LEG,
    seed: int = 0,
    threads: int = 1,
    r: Optional[float] = None,
) -> HomotopyCertificate:
    """Build ``C`` for ``b`` and check its properties on a sample grid.

    Checks: ``C(x, 0)`` is the constant loop (bitwise); every sampled
    length is below ``b``; ``C(x, 1)`` escapes everywhere; ``C(x, t)``
    escapes for boundary ``x``; the loops stay in the closed domain; the
    cover has multiplicity at most ``n + 1`` and the sets ``K_j`` cover the
    samples; each active star lies in the ``eta`` neighbourhood of its
    anchor.
    """
    nx, ny, nt = (int(v) for v in grid)
    if min(nx, ny) < 2 or nt < 2:
        raise ValueError("grid needs at least 2 x 2 points and 2 t-values")
    n = domain.n
    if r is None:
        r = inradius(domain).r
    rho = choose_rho(r, n, b)
    eta = choose_eta(r, rho)
    cover = build_star_cover(domain, eta)
    family = SigmaFamily(cover, rho, eta, per_leg)
    nb = boundary_samples if boundary_samples is not None else 2 * (nx + ny)
    inner, bnd = _samples(domain, nx, ny, nb)
    X = np.concatenate([inner, bnd])
    is_bnd = np.r_[np.zeros(len(inner), bool), np.ones(len(bnd), bool)]
    ts = np.linspace(0.0, 1.0, nt)

    ids, lam, retracted = cover.locate(X)
    family.prepare(ids[lam > 0])
    anchors = cover.vertices[ids]
    reach = np.where(lam > 0, np.linalg.norm(anchors - X[:, None], axis=2), 0.0).max(axis=1)

    def run(k):
        pos = lam[k] > 0
        order = np.argsort(ids[k][pos])
        act = (ids[k][pos][order], lam[k][pos][order])
        x = X[k]
        rec = {"const": True, "len": 0.0, "esc1": True, "escb": True, "closure": True}
        for t in ts:
            loop = _compose(family, x, float(t), *act)
            length = loop_length(loop)
            rec["len"] = max(rec["len"], length)
            if t == 0.0:
                rec["const"] = bool(np.all(loop.vertices == x))
            if t == 1.0:
                rec["esc1"] = escapes(domain, loop)
            if is_bnd[k] and not escapes(domain, loop):
                rec["escb"] = False
            if not in_closure(domain, loop):
                rec["closure"] = False
        return rec

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            recs = list(pool.map(run, range(len(X))))
    else:
        recs = [run(k) for k in range(len(X))]

    def first_bad(key):
        for k, rec in enumerate(recs):
            if not rec[key]:
                return {"sample": k, "x": X[k].tolist()}
        return None

    lengths = np.array([rec["len"] for rec in recs])
    worst = int(lengths.argmax())
    M = _uniform_closure(domain, multiplicity_samples, seed)
    _, lam_m, _ = cover.locate(M)
    mult = np.count_nonzero(lam_m > 0, axis=1)
    kmax = np.concatenate([lam_m, lam]).max(axis=1)
    sig_max = 2.0 * max(
        (float(np.linalg.norm(X[k] - cover.vertices[j])) + family.foot(int(j))[1])
        for k in range(len(X)) for j in ids[k][lam[k] > 0]
    )

    checks = {
        "a_constant_at_t0": _check(all(rec["const"] for rec in recs), 0.0, first_bad("const")),
        "length_below_b": _check(
            lengths.max() < b, b - lengths.max(),
            None if lengths.max() < b else {"sample": worst, "x": X[worst].tolist()},
        ),
        "sigma_below_rho": _check(sig_max < rho, rho - sig_max),
        "b1_escape_at_t1": _check(all(rec["esc1"] for rec in recs), 0.0, first_bad("esc1")),
        "b2_boundary_escape": _check(all(rec["escb"] for rec in recs), 0.0, first_bad("escb")),
        "loops_in_closure": _check(all(rec["closure"] for rec in recs), 0.0, first_bad("closure")),
        "multiplicity": _check(mult.max() <= n + 1, n + 1 - int(mult.max())),
        "k_cover": _check(
            kmax.min() >= 1.0 / (n + 1) - 1e-12, float(kmax.min()) - 1.0 / (n + 1)
        ),
        "eta_neighbourhood": _check(reach.max() <= eta, eta - float(reach.max())),
    }
    return HomotopyCertificate(
        domain=domain.name,
        n=n,
        b=float(b),
        r=float(r),
        rho=float(rho),
        eta=float(eta),
        cover=cover.summary(),
        grid={
            "nx": nx,
            "ny": ny,
            "nt": nt,
            "interior_samples": int(len(inner)),
            "boundary_samples": int(len(bnd)),
            "retracted_samples": int(retracted.sum()),
            "multiplicity_samples": int(multiplicity_samples),
            "max_multiplicity": int(mult.max()),
            "max_length": float(lengths.max()),
            "length_bound": float((n + 1) * rho),
            "per_leg": per_leg,
            "seed": seed,
        },
        checks=checks,
        tolerances={"boundary": domain.tol_boundary, "edge_samples": 8, "k_cover": 1e-12},
        passed=all(c["passed"] for c in checks.values()),
    )
