"""Implicit-domain geometry: membership, nearest boundary points, inradius.

A domain is ``V = {F < 0}`` for a smooth defining function ``F`` given as an
:class:`~billiard_capacity.expr.Expression`.  Distances are metric (from an
exact nearest-point projection), never read off ``F`` directly, since ``F``
is not a signed distance in general.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .expr import Expression, parse

TOL_BOUNDARY = 1e-9
RAY_COUNT = 32
RAY_SAMPLES = 32
STAT_TOL = 1e-12

__all__ = [
    "BoundaryPoint",
    "BoundarySampler",
    "GeometryError",
    "ImplicitDomain",
    "InradiusResult",
    "ProjectionError",
    "TOL_BOUNDARY",
    "boundary_feet",
    "contains",
    "disk",
    "distance_to_boundary",
    "distances",
    "ellipse",
    "from_expression",
    "inradius",
    "peanut",
    "polish_projection",
    "project_points",
    "project_to_boundary",
    "segment_in_closure",
    "superellipse",
]


class GeometryError(RuntimeError):
    pass


class ProjectionError(GeometryError):
    """Nearest-point iteration failed; carries the best candidate found."""

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.best = best
        self.residual = residual


@dataclass(frozen=True, eq=False)
class ImplicitDomain:
    """Bounded domain ``{F < 0}`` inside an axis-aligned bounding box."""

    F: Expression
    lo: np.ndarray
    hi: np.ndarray
    name: str = "domain"
    tol_boundary: float = TOL_BOUNDARY
    star_center: Optional[np.ndarray] = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.array(self.lo, dtype=float)
        hi = np.array(self.hi, dtype=float)
        if lo.shape != (self.F.dimension,) or hi.shape != lo.shape:
            raise ValueError("bounding box does not match expression dimension")
        if np.any(hi <= lo):
            raise ValueError("bounding box must have positive extent")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.star_center is not None:
            c = np.array(self.star_center, dtype=float)
            c.flags.writeable = False
            object.__setattr__(self, "star_center", c)

    @property
    def n(self) -> int:
        return self.F.dimension

    @property
    def diameter_bound(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def value(self, x) -> float:
        return self.F.scalar_value(*map(float, x))

    def values(self, X) -> np.ndarray:
        return self.F.values(X)

    def normal(self, x) -> np.ndarray:
        _, g = self.F.scalar_grad(*map(float, x))
        g = np.array(g)
        return g / np.linalg.norm(g)

    def validate(self, samples: int = 24, seed: int = 0) -> None:
        """Check the sampled invariants; raise GeometryError on violation."""
        k = max(samples, 8)
        axes = [np.linspace(a, b, k) for a, b in zip(self.lo, self.hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)
        vals = self.values(grid)
        if not np.any(vals < -self.tol_boundary):
            raise GeometryError(f"{self.name}: no interior point found in bounding box")
        on_box = np.any(np.isclose(grid, self.lo) | np.isclose(grid, self.hi), axis=1)
        if np.any(vals[on_box] <= self.tol_boundary):
            raise GeometryError(f"{self.name}: closure touches the bounding box")
        rng = np.random.default_rng(seed)
        inside = grid[vals < -self.tol_boundary]
        pick = inside[rng.choice(len(inside), size=min(len(inside), samples), replace=False)]
        Y, _, _ = project_points(self, pick)
        _, g = self.F.gradients(Y)
        gnorm = np.linalg.norm(g, axis=1)
        if np.any(gnorm < 1e-6):
            raise GeometryError(f"{self.name}: |grad F| < 1e-6 on the boundary")


@dataclass(frozen=True)
class BoundaryPoint:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        for name in ("point", "normal"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)


class InradiusResult(NamedTuple):
    r: float
    incenter: np.ndarray


# ------------------------------------------------------------------ factories


def from_expression(
    text: str,
    lo,
    hi,
    dimension: int | None = None,
    name: str = "implicit",
    tol_boundary: float = TOL_BOUNDARY,
    star_center=None,
) -> ImplicitDomain:
    n = dimension if dimension is not None else len(lo)
    return ImplicitDomain(
        parse(text, n),
        np.asarray(lo, float),
        np.asarray(hi, float),
        name=name,
        tol_boundary=tol_boundary,
        star_center=star_center,
        source={"expression": text, "dimension": n},
    )


def disk(R: float = 1.0, center=(0.0, 0.0), **kw) -> ImplicitDomain:
    """Ball of radius ``R``; the dimension follows ``center``."""
    c = np.asarray(center, dtype=float)
    names = ["x1", "x2", "x3", "x4", "x5", "x6"][: len(c)]
    terms = [f"({v} - {ci!r})^2" if ci else f"{v}^2" for v, ci in zip(names, c)]
    text = " + ".join(terms) + f" - {float(R) ** 2!r}"
    kw.setdefault("name", "disk")
    kw.setdefault("star_center", c)
    return from_expression(text, c - 1.1 * R, c + 1.1 * R, len(c), **kw)


def ellipse(a: float = 2.0, b: float = 1.0, **kw) -> ImplicitDomain:
    text = f"x^2/{float(a) ** 2!r} + y^2/{float(b) ** 2!r} - 1"
    kw.setdefault("name", "ellipse")
    kw.setdefault("star_center", (0.0, 0.0))
    return from_expression(text, [-1.1 * a, -1.1 * b], [1.1 * a, 1.1 * b], 2, **kw)


def superellipse(p: int = 4, scale: float = 1.0, **kw) -> ImplicitDomain:
    if p < 2 or p % 2:
        raise ValueError("superellipse exponent must be an even integer >= 2")
    if scale == 1.0:
        text = f"x^{p} + y^{p} - 1"
    else:
        text = f"(x/{float(scale)!r})^{p} + (y/{float(scale)!r})^{p} - 1"
    s = 1.1 * scale
    kw.setdefault("name", "superellipse")
    kw.setdefault("star_center", (0.0, 0.0))
    return from_expression(text, [-s, -s], [s, s], 2, **kw)


def peanut(**kw) -> ImplicitDomain:
    """Two-lobed quartic level set; the lobes are separated along x = 0."""
    kw.setdefault("name", "peanut")
    return from_expression(
        "(x^2 + y^2)^2 - x^2 + 0.5*y^2 + 0.05", [-1.2, -1.2], [1.2, 1.2], 2, **kw
    )


# ----------------------------------------------------------------- predicates


def contains(domain: ImplicitDomain, x, closure: bool = False) -> bool:
    f = domain.value(x)
    if closure:
        return f <= domain.tol_boundary
    return f < -domain.tol_boundary


def segment_in_closure(domain: ImplicitDomain, a, b, samples: int = 64) -> bool:
    """True iff F <= tol at ``samples`` equispaced interior points of [a, b]."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    t = np.arange(1, samples + 1) / (samples + 1)
    pts = a + t[:, None] * (b - a)
    return bool(np.all(domain.values(pts) <= domain.tol_boundary))


# ---------------------------------------------------------------- projection


def _solve_small(A, b):
    """Gaussian elimination with partial pivoting on nested lists."""
    m = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for c in range(m):
        p = max(range(c, m), key=lambda r: abs(M[r][c]))
        if M[p][c] == 0.0:
            return None
        if p != c:
            M[c], M[p] = M[p], M[c]
        piv = M[c][c]
        for r in range(c + 1, m):
            f = M[r][c] / piv
            if f:
                Mr, Mc = M[r], M[c]
                for k in range(c, m + 1):
                    Mr[k] -= f * Mc[k]
    out = [0.0] * m
    for r in range(m - 1, -1, -1):
        s = M[r][m] - sum(M[r][k] * out[k] for k in range(r + 1, m))
        out[r] = s / M[r][r]
    return out


def _retract(grad, z, n, iters: int = 12):
    """Pull ``z`` onto F = 0 by Newton steps along grad F."""
    for _ in range(iters):
        F, g = grad(*z)
        gg = sum(gi * gi for gi in g)
        if gg == 0.0:
            break
        if abs(F) <= 1e-16 * (1.0 + max(abs(v) for v in z)) * math.sqrt(gg):
            break
        c = F / gg
        z = [z[i] - c * g[i] for i in range(n)]
    return z


def polish_projection(domain: ImplicitDomain, x, y0, max_iter: int = 60):
    """Local nearest boundary point to ``x``, starting from ``y0``.

    Descent on ``|y - x|^2 / 2`` over the boundary: a tangent-space Newton
    step (constrained Hessian ``P (I + lam Hess F) P``) when it is a descent
    direction, the tangential gradient otherwise, then a retraction back to
    ``F = 0`` and an Armijo test.  Being a descent method it cannot settle on
    the far critical points that plain KKT Newton may find.

    Returns ``(y, grad_F(y), stationarity)`` with plain float lists.
    """
    jet = domain.F.scalar_jet
    grad = domain.F.scalar_grad
    n = domain.n
    x = [float(v) for v in x]
    y = _retract(grad, [float(v) for v in y0], n)
    scale = 1.0 + max(abs(v) for v in x)
    gtn = float("inf")
    for _ in range(max_iter):
        F, g, H = jet(*y)
        gg = sum(gi * gi for gi in g)
        if gg == 0.0:
            raise ProjectionError("vanishing gradient of F on the boundary", y, float("inf"))
        r = [y[i] - x[i] for i in range(n)]
        lam = -sum(r[i] * g[i] for i in range(n)) / gg
        gt = [r[i] + lam * g[i] for i in range(n)]
        gtn = math.sqrt(sum(v * v for v in gt))
        if gtn <= STAT_TOL * scale:
            break
        gn = math.sqrt(gg)
        nu = [gi / gn for gi in g]
        M = [[(1.0 if i == j else 0.0) + lam * H[i][j] for j in range(n)] for i in range(n)]
        Mnu = [sum(M[i][j] * nu[j] for j in range(n)) for i in range(n)]
        nuMnu = sum(nu[i] * Mnu[i] for i in range(n))
        A = [
            [M[i][j] - nu[i] * Mnu[j] - Mnu[i] * nu[j] + (nuMnu + 1.0) * nu[i] * nu[j] for j in range(n)]
            for i in range(n)
        ]
        s = _solve_small(A, [-v for v in gt])
        slope = None if s is None else sum(gt[i] * s[i] for i in range(n))
        newton = s is not None and slope < 0.0
        rn = math.sqrt(sum(v * v for v in r))
        cap = max(rn, 1e-8 * scale)
        if not newton:
            s = [-v * cap / gtn for v in gt]
            slope = -gtn * cap
        sn = math.sqrt(sum(v * v for v in s))
        if sn > cap:
            s = [v * cap / sn for v in s]
            slope *= cap / sn
        phi = 0.5 * rn * rn
        if newton and sn <= cap and gtn <= 1e-6 * scale:
            y = _retract(grad, [y[i] + s[i] for i in range(n)], n)
            continue
        alpha = 1.0
        moved = False
        while alpha > 1e-12:
            yt = _retract(grad, [y[i] + alpha * s[i] for i in range(n)], n)
            phit = 0.5 * sum((yt[i] - x[i]) ** 2 for i in range(n))
            if phit <= phi + 1e-4 * alpha * slope:
                y = yt
                moved = True
                break
            alpha *= 0.5
        if not moved:
            break
    _, g = grad(*y)
    return y, list(g), gtn


def _directions(n: int, count: int) -> np.ndarray:
    if n == 2:
        ang = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # spherical Fibonacci lattice generalised by a fixed Gaussian draw past 3D
    if n == 3:
        k = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * k / count)
        theta = np.pi * (1 + 5**0.5) * k
        return np.stack(
            [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1
        )
    d = np.random.default_rng(12345).normal(size=(max(count, 2 * n), n))
    d = np.concatenate([np.eye(n), -np.eye(n), d])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _ray_seeds(domain: ImplicitDomain, X: np.ndarray):
    """First sign change of F along RAY_COUNT rays from each point."""
    m, n = X.shape
    dirs = _directions(n, RAY_COUNT)
    margin = 0.05 * (domain.hi - domain.lo)
    lo, hi = domain.lo - margin, domain.hi + margin
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 0, (hi - X[:, None, :]) / dirs, np.inf)
        t_lo = np.where(dirs < 0, (lo - X[:, None, :]) / dirs, np.inf)
    t_exit = np.maximum(np.min(np.minimum(t_hi, t_lo), axis=2), 0.0)  # (m, R)
    frac = np.arange(1, RAY_SAMPLES + 1) / RAY_SAMPLES
    T = t_exit[:, :, None] * frac  # (m, R, K)
    P = X[:, None, None, :] + T[..., None] * dirs[None, :, None, :]
    FP = domain.values(P)
    F0 = domain.values(X)
    outside0 = F0 > 0
    flip = (FP > 0) != outside0[:, None, None]
    has = flip.any(axis=2)
    first = np.argmax(flip, axis=2)
    t_b = np.take_along_axis(T, first[..., None], axis=2)[..., 0]
    t_a = np.where(first > 0, np.take_along_axis(T, np.maximum(first - 1, 0)[..., None], axis=2)[..., 0], 0.0)
    pi, ri = np.nonzero(has)
    a, b = t_a[pi, ri], t_b[pi, ri]
    base, u = X[pi], dirs[ri]
    out0 = outside0[pi]
    for _ in range(36):
        mid = 0.5 * (a + b)
        fm = domain.values(base + mid[:, None] * u)
        same = (fm > 0) == out0
        a = np.where(same, mid, a)
        b = np.where(same, b, mid)
    t = 0.5 * (a + b)
    return pi, base + t[:, None] * u, t, t_exit / RAY_SAMPLES, F0


def _retract_batch(domain: ImplicitDomain, Z: np.ndarray, iters: int = 12) -> np.ndarray:
    Z = Z.copy()
    for _ in range(iters):
        F, g = domain.F.gradients(Z)
        gg = np.einsum("bi,bi->b", g, g)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(gg > 0, F / gg, 0.0)
        if np.all(np.abs(F) <= 1e-16 * (1.0 + np.max(np.abs(Z), axis=1)) * np.sqrt(gg)):
            break
        Z -= c[:, None] * g
    return Z


def _descend_batch(domain: ImplicitDomain, X: np.ndarray, Y: np.ndarray, max_iter: int = 60):
    """Vectorized version of :func:`polish_projection`."""
    n = domain.n
    X = np.asarray(X, float)
    Y = _retract_batch(domain, np.asarray(Y, float))
    scale = 1.0 + np.max(np.abs(X), axis=1)
    stat = np.full(len(X), np.inf)
    active = np.ones(len(X), bool)
    eye = np.eye(n)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        F, g, H = domain.F.jets(Y[idx])
        gg = np.einsum("bi,bi->b", g, g)
        r = Y[idx] - X[idx]
        lam = -np.einsum("bi,bi->b", r, g) / gg
        gt = r + lam[:, None] * g
        stat[idx] = np.linalg.norm(gt, axis=1)
        done = stat[idx] <= STAT_TOL * scale[idx]
        active[idx[done]] = False
        keep = ~done
        idx, g, H, gg, r, lam, gt = idx[keep], g[keep], H[keep], gg[keep], r[keep], lam[keep], gt[keep]
        if idx.size == 0:
            break
        nu = g / np.sqrt(gg)[:, None]
        P = eye - nu[:, :, None] * nu[:, None, :]
        M = eye + lam[:, None, None] * H
        A = P @ M @ P + nu[:, :, None] * nu[:, None, :]
        try:
            s = np.linalg.solve(A, -gt[..., None])[..., 0]
        except np.linalg.LinAlgError:
            s = np.stack([np.linalg.lstsq(Ai, -gi, rcond=None)[0] for Ai, gi in zip(A, gt)])
        slope = np.einsum("bi,bi->b", gt, s)
        bad = ~(slope < 0.0) | ~np.all(np.isfinite(s), axis=1)
        rn = np.linalg.norm(r, axis=1)
        cap = np.maximum(rn, 1e-8 * scale[idx])
        # steepest descent has no natural length near focal points, so start
        # the backtracking from the full cap
        gtn = stat[idx]
        s[bad] = -gt[bad] * (cap[bad] / gtn[bad])[:, None]
        slope[bad] = -gtn[bad] * cap[bad]
        sn = np.linalg.norm(s, axis=1)
        shrink = np.where(sn > cap, cap / np.where(sn > 0, sn, 1.0), 1.0)
        s *= shrink[:, None]
        slope *= shrink
        phi = 0.5 * rn * rn
        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, bool)
        # close in, the merit change drops below rounding; trust Newton there
        near = ~bad & (shrink == 1.0) & (stat[idx] <= 1e-6 * scale[idx])
        if near.any():
            Y[idx[near]] = _retract_batch(domain, Y[idx[near]] + s[near])
            pending[near] = False
        for _ in range(30):
            p = np.nonzero(pending)[0]
            if p.size == 0:
                break
            Yt = _retract_batch(domain, Y[idx[p]] + alpha[p, None] * s[p])
            phit = 0.5 * np.einsum("bi,bi->b", Yt - X[idx[p]], Yt - X[idx[p]])
            ok = phit <= phi[p] + 1e-4 * alpha[p] * slope[p]
            Y[idx[p[ok]]] = Yt[ok]
            pending[p[ok]] = False
            alpha[p[~ok]] *= 0.5
        active[idx[pending]] = False
    F, g = domain.F.gradients(Y)
    return Y, g, stat, F


def project_points(domain: ImplicitDomain, X, max_seeds: int = 6, chunk: int = 256):
    """Nearest boundary points for an array of points.

    Seeds come from the first boundary crossing along RAY_COUNT rays (plus
    the point itself when it sits near the boundary); each seed is polished
    by boundary-constrained descent and the closest converged candidate wins.

    Returns ``(Y, normals, distances)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) > chunk:
        parts = [project_points(domain, X[i : i + chunk], max_seeds) for i in range(0, len(X), chunk)]
        return tuple(np.concatenate(p) for p in zip(*parts))
    m, n = X.shape
    pi, hits, t, step, F0 = _ray_seeds(domain, X)
    _, g0 = domain.F.gradients(X)
    g0n = np.linalg.norm(g0, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.abs(F0) / g0n < step.min(axis=1)
    # keep the nearest hits per point: within 2x the first one, at most max_seeds
    t_min = np.full(m, np.inf)
    np.minimum.at(t_min, pi, t)
    order = np.lexsort((t, pi))
    pi, hits, t = pi[order], hits[order], t[order]
    start = np.searchsorted(pi, np.arange(m))
    rank = np.arange(len(pi)) - start[pi]
    keep = (t <= 2.0 * t_min[pi] + 1e-12) & (rank < max_seeds)
    extra = np.nonzero(near | ~np.isfinite(t_min))[0]
    seeds_p = np.concatenate([pi[keep], extra])
    seeds_y = np.concatenate([hits[keep], X[extra]])
    Y, g, res, FY = _descend_batch(domain, X[seeds_p], seeds_y)
    dist = np.linalg.norm(Y - X[seeds_p], axis=1)
    tol = 1e-9 * (1.0 + np.max(np.abs(X[seeds_p]), axis=1))
    gnorm = np.linalg.norm(g, axis=1)
    on_boundary = np.abs(FY) <= 1e-3 * domain.tol_boundary
    good = np.isfinite(res) & (res <= tol) & on_boundary & (gnorm > 0)
    # best good candidate per point; bad ones sort last
    rankd = np.where(good, dist, np.inf)
    order = np.lexsort((np.where(np.isfinite(res), res, np.inf), rankd, seeds_p))
    first = order[np.searchsorted(seeds_p[order], np.arange(m))]
    failed = ~good[first]
    if failed.any():
        i = int(np.nonzero(failed)[0][0])
        j = first[i]
        raise ProjectionError(
            f"projection of {X[i].tolist()} did not converge", Y[j], float(res[j])
        )
    return Y[first], g[first] / gnorm[first, None], dist[first]


def boundary_feet(domain: ImplicitDomain, x, spread: float = 2.0):
    """All distinct local nearest boundary points of ``x``.

    Seeds are the ray hits no farther than ``spread`` times the first one.
    Returns ``(Y, distances)`` sorted by distance.
    """
    x = np.asarray(x, float)[None]
    pi, hits, t, _, _ = _ray_seeds(domain, x)
    if t.size == 0:
        raise ProjectionError(f"no boundary crossing from {x[0].tolist()}")
    sel = t <= spread * t.min() + 1e-12
    Y, g, res, FY = _descend_batch(domain, np.repeat(x, sel.sum(), axis=0), hits[sel])
    ok = (res <= 1e-9 * (1.0 + np.abs(x).max())) & (np.abs(FY) <= 1e-3 * domain.tol_boundary)
    Y = Y[ok]
    dist = np.linalg.norm(Y - x, axis=1)
    order = np.argsort(dist)
    out = []
    for j in order:
        if all(np.linalg.norm(Y[j] - Y[k]) > 1e-7 for k in out):
            out.append(j)
    return Y[out], dist[out]


def project_to_boundary(domain: ImplicitDomain, x) -> BoundaryPoint:
    Y, N, _ = project_points(domain, np.asarray(x, float)[None])
    return BoundaryPoint(Y[0], N[0])


def distance_to_boundary(domain: ImplicitDomain, x) -> float:
    _, _, D = project_points(domain, np.asarray(x, float)[None])
    return float(D[0])


def distances(domain: ImplicitDomain, X) -> np.ndarray:
    return project_points(domain, X)[2]


# -------------------------------------------------------------------- inradius


_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _poll_basis(n: int, level: int) -> np.ndarray:
    if level == 0:
        return np.eye(n)
    if n == 2:
        a = level * _GOLDEN_ANGLE
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    q, r = np.linalg.qr(np.random.default_rng(level).normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def inradius(domain: ImplicitDomain, seed_grid: int = 16, min_step: float = 1e-8) -> InradiusResult:
    """Largest distance to the boundary, by multistart pattern search.

    Seeds are the cell centres of a ``seed_grid``-per-axis lattice over the
    bounding box that lie in V.  Each seed climbs ``distance_to_boundary``
    with a compass poll whose axes are rotated every time the step shrinks,
    so ridges of the (non-smooth) distance field that are not aligned with
    the coordinates cannot stall the search.
    """
    if seed_grid < 8:
        raise ValueError("seed_grid must be at least 8")
    n = domain.n
    axes = [lo + (np.arange(seed_grid) + 0.5) * (hi - lo) / seed_grid for lo, hi in zip(domain.lo, domain.hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    seeds = grid[domain.values(grid) < -domain.tol_boundary]
    if len(seeds) == 0:
        raise GeometryError("no interior seed found; use a finer seed_grid")

    def objective(P):
        out = np.full(len(P), -np.inf)
        inside = domain.values(P) < -domain.tol_boundary
        if inside.any():
            out[inside] = distances(domain, P[inside])
        return out

    x = seeds.copy()
    d = distances(domain, x)
    eye = np.eye(n)
    step0 = domain.diameter_bound / seed_grid
    step = np.full(len(x), step0)
    level = np.zeros(len(x), dtype=int)
    alive = np.ones(len(x), bool)
    while alive.any():
        idx = np.nonzero(alive)[0]
        trials = []
        for i in idx:
            B = _poll_basis(n, level[i] + 1)
            trials.append(x[i] + step[i] * np.concatenate([eye, -eye, B.T, -B.T]))
        trials = np.stack(trials)  # (a, 4n, n)
        vals = objective(trials.reshape(-1, n)).reshape(len(idx), 4 * n)
        best = np.argmax(vals, axis=1)
        bestv = vals[np.arange(len(idx)), best]
        up = bestv > d[idx] + 1e-15
        x[idx[up]] = trials[np.nonzero(up)[0], best[up]]
        d[idx[up]] = bestv[up]
        # expand on success so ridges of the distance field are not crawled
        step[idx[up]] = np.minimum(2.0 * step[idx[up]], step0)
        down = idx[~up]
        step[down] *= 0.5
        level[down] += 1
        alive &= step >= min_step
        # a seed that has settled well below the leader cannot overtake it
        alive &= ~((step <= step0 / 16) & (d < 0.95 * d.max()))
        # seeds closer than their poll radius are climbing the same hill
        live = np.nonzero(alive)[0]
        live = live[np.argsort(-d[live], kind="stable")]
        for a_pos, a in enumerate(live):
            if not alive[a]:
                continue
            rest = live[a_pos + 1 :]
            gap = np.linalg.norm(x[rest] - x[a], axis=1)
            alive[rest[gap <= np.maximum(step[rest], 1e-10)]] = False
    best_c, best_r = None, -np.inf
    for k in np.argsort(-d)[:4]:
        if d[k] < d.max() - 1e-3 * abs(d.max()):
            break
        c, r = _polish_maximin(domain, x[k], d[k], step0)
        if r > best_r:
            best_c, best_r = c, r
    return InradiusResult(best_r, best_c)


def _polish_maximin(domain: ImplicitDomain, c, d, radius: float, max_iter: int = 100):
    """Trust-region LP ascent of ``min_k |c - y_k|`` over the nearby feet.

    The distance field is the lower envelope of the smooth distances to
    each boundary sheet; linearizing all sheets that can become active
    inside the trust region turns one step into a tiny LP, which moves
    along ridges that a compass poll only crosses.
    """
    from scipy.optimize import linprog

    n = domain.n
    c = np.asarray(c, float).copy()
    d = distance_to_boundary(domain, c)
    delta = min(radius, 0.1 * d, 1e-3 * (1.0 + d))
    for _ in range(max_iter):
        if delta < 1e-10 * (1.0 + d):
            break
        Y, dk = boundary_feet(domain, c)
        act = dk <= dk[0] + 2.0 * delta
        U = (c - Y[act]) / dk[act, None]
        # variables (h, t): maximize t with t - u_k.h <= d_k and |h_i| <= delta
        A = np.hstack([-U, np.ones((act.sum(), 1))])
        res = linprog(
            np.r_[np.zeros(n), -1.0],
            A_ub=A,
            b_ub=dk[act],
            bounds=[(-delta, delta)] * n + [(None, None)],
            method="highs",
        )
        if not res.success:
            break
        h, t = res.x[:n], res.x[n]
        gain = t - d
        if gain <= 1e-15 * (1.0 + d):
            break
        trial = c + h
        if domain.value(trial) >= -domain.tol_boundary:
            delta *= 0.25
            continue
        dt = distance_to_boundary(domain, trial)
        ratio = (dt - d) / gain
        if ratio > 0.0:
            c, d = trial, dt
            if ratio > 0.75:
                delta = min(2.0 * delta, radius)
        else:
            delta *= 0.25
    return c, d


# ------------------------------------------------------ fast planar distance


class BoundarySampler:
    """Dense ordered samples of a planar boundary for repeated distance queries.

    Samples come from a marching-squares contour of F = 0, pulled exactly
    onto the curve.  A query takes the discrete local minima of the sample
    distances that could hold the global nearest point (within one sample
    spacing of the best sample) and polishes each one exactly, so the
    answer agrees with :func:`distance_to_boundary` while costing a few
    scalar Newton steps instead of a ray march.
    """

    def __init__(self, domain: ImplicitDomain, resolution: int = 400, max_candidates: int = 6):
        from skimage.measure import find_contours

        if domain.n != 2:
            raise ValueError("BoundarySampler is planar only")
        self.domain = domain
        self.max_candidates = max_candidates
        xs = np.linspace(domain.lo[0], domain.hi[0], resolution)
        ys = np.linspace(domain.lo[1], domain.hi[1], resolution)
        grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        vals = domain.values(grid.reshape(-1, 2)).reshape(resolution, resolution)
        pitch = (domain.hi - domain.lo) / (resolution - 1)
        pts, nxt, prv = [], [], []
        start = 0
        for c in find_contours(vals, 0.0):
            if np.allclose(c[0], c[-1]):
                c = c[:-1]
            if len(c) < 3:
                continue
            P = domain.lo + c * pitch
            m = len(P)
            idx = np.arange(m) + start
            pts.append(P)
            nxt.append(np.roll(idx, -1))
            prv.append(np.roll(idx, 1))
            start += m
        if not pts:
            raise GeometryError(f"{domain.name}: no boundary contour found")
        S = _retract_batch(domain, np.concatenate(pts), iters=30)
        self.points = S
        self._sx = S[:, 0].copy()
        self._sy = S[:, 1].copy()
        self.next = np.concatenate(nxt)
        self.prev = np.concatenate(prv)
        self.spacing = float(np.max(np.linalg.norm(S[self.next] - S, axis=1)))
        self._scale = 1.0 + float(np.max(np.abs(np.concatenate([domain.lo, domain.hi]))))

    def nearest(self, q):
        """``(distance, foot, grad F at foot)`` for one point."""
        qx, qy = float(q[0]), float(q[1])
        D2 = (self._sx - qx) ** 2 + (self._sy - qy) ** 2
        i = int(D2.argmin())
        reach = (math.sqrt(D2[i]) + self.spacing) ** 2
        band = np.flatnonzero(D2 <= reach)
        Db = D2[band]
        local = band[(Db <= D2[self.next[band]]) & (Db <= D2[self.prev[band]])]
        if local.size <= 1:
            local = [i]
        else:
            local = local[np.argsort(D2[local])][: self.max_candidates]
        best = None
        for j in local:
            d, y, g = _polish_planar(self.domain, qx, qy, self._sx[j], self._sy[j], self._scale)
            if best is None or d < best[0]:
                best = (d, y, g)
        return best


def _polish_planar(domain: ImplicitDomain, qx: float, qy: float, yx: float, yy: float, scale: float):
    """Planar special case of :func:`polish_projection` in one tangent variable."""
    jet = domain.F.scalar_jet
    grad = domain.F.scalar_grad

    def retract(x, y):
        for _ in range(20):
            F, (g0, g1) = grad(x, y)
            gg = g0 * g0 + g1 * g1
            if abs(F) <= 1e-16 * scale * math.sqrt(gg):
                break
            c = F / gg
            x, y = x - c * g0, y - c * g1
        return x, y

    yx, yy = retract(yx, yy)
    for _ in range(60):
        _, (g0, g1), ((h00, h01), (_, h11)) = jet(yx, yy)
        gg = g0 * g0 + g1 * g1
        gn = math.sqrt(gg)
        tx, ty = -g1 / gn, g0 / gn
        rx, ry = yx - qx, yy - qy
        gt = rx * tx + ry * ty
        if abs(gt) <= STAT_TOL * scale:
            break
        lam = -(rx * g0 + ry * g1) / gg
        curv = 1.0 + lam * (tx * tx * h00 + 2.0 * tx * ty * h01 + ty * ty * h11)
        rn = math.hypot(rx, ry)
        cap = max(rn, 1e-8 * scale)
        newton = curv > 0.0
        step = -gt / curv if newton else -math.copysign(cap, gt)
        if abs(step) > cap:
            step = math.copysign(cap, step)
        elif newton and abs(gt) <= 1e-6 * scale:
            yx, yy = retract(yx + step * tx, yy + step * ty)
            continue
        phi = rn * rn
        for _ in range(40):
            zx, zy = retract(yx + step * tx, yy + step * ty)
            if (zx - qx) ** 2 + (zy - qy) ** 2 < phi:
                yx, yy = zx, zy
                break
            step *= 0.5
        else:
            break
    _, g = grad(yx, yy)
    return math.hypot(yx - qx, yy - qy), (yx, yy), g
