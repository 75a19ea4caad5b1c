"""Periodic billiard trajectories as critical points of the bounce-point length.

A closed polyline ``x_1 .. x_k`` with every ``x_i`` on the boundary is a
periodic billiard trajectory exactly when the tangential part of
``u_in(i) - u_out(i)`` vanishes at every bounce, i.e. when it is a critical
point of ``L = sum |x_i - x_{i-1}|`` restricted to the boundary.  The solver
hunts for such points by multistart ascent plus Riemannian Newton.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .geometry import ImplicitDomain, project_points, segment_in_closure

TOL_GRAZE = 1e-10
TOL_REFLECT = 1e-8
MIN_CHORD = 1e-6
CHORD_SAMPLES = 64
DEDUP_TOL = 1e-5
NEAR_ZERO_EIG = 1e-7

__all__ = [
    "BilliardPath",
    "BounceConfiguration",
    "GrazingError",
    "PeriodicBilliardTrajectory",
    "find_critical_configs",
    "length_functional",
    "morse_index",
    "reflect",
    "reflection_residual",
    "simulate_billiard",
    "validate",
    "write_trajectory_csv",
]


class GrazingError(ValueError):
    pass


def reflect(u, normal, tol_graze: float = TOL_GRAZE) -> np.ndarray:
    u = np.asarray(u, float)
    nu = np.asarray(normal, float)
    c = float(u @ nu)
    if abs(c) <= tol_graze:
        raise GrazingError(f"grazing incidence: |u.n| = {abs(c):.3e}")
    return u - 2.0 * c * nu


# ------------------------------------------------------------ configurations


def _normals(domain: ImplicitDomain, X: np.ndarray):
    F, g = domain.F.gradients(X)
    return F, g / np.linalg.norm(g, axis=1, keepdims=True)


def _chords(X: np.ndarray):
    """Unit vectors and lengths of the chords x_{i-1} -> x_i."""
    c = X - np.roll(X, 1, axis=0)
    ell = np.linalg.norm(c, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return c / ell[:, None], ell


@dataclass(frozen=True, eq=False)
class BounceConfiguration:
    """Cyclic list of boundary points with their outward normals."""

    domain: ImplicitDomain
    points: np.ndarray
    normals: np.ndarray = field(init=False)
    chords: np.ndarray = field(init=False)
    check: bool = True

    def __post_init__(self):
        X = np.array(self.points, dtype=float)
        if X.ndim != 2 or len(X) < 2 or X.shape[1] != self.domain.n:
            raise ValueError("need k >= 2 points of the domain dimension")
        F, N = _normals(self.domain, X)
        U, ell = _chords(X)
        if self.check:
            if np.min(ell) < MIN_CHORD:
                raise ValueError(f"consecutive bounce points closer than {MIN_CHORD:g}")
            if np.max(np.abs(F)) > self.domain.tol_boundary:
                raise ValueError("bounce point off the boundary")
        for name, a in (("points", X), ("normals", N), ("chords", U)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def k(self) -> int:
        return len(self.points)

    def u_in(self, i: int) -> np.ndarray:
        return self.chords[i % self.k]

    def u_out(self, i: int) -> np.ndarray:
        return self.chords[(i + 1) % self.k]


def _residuals(U: np.ndarray, N: np.ndarray) -> np.ndarray:
    uin, uout = U, np.roll(U, -1, axis=0)
    s = np.einsum("ij,ij->i", uin + uout, N)
    d = uin - uout
    dt = d - np.einsum("ij,ij->i", d, N)[:, None] * N
    return np.abs(s) + np.linalg.norm(dt, axis=1)


def reflection_residual(config: BounceConfiguration, i: int) -> float:
    """``|(u_in + u_out).n| + |tangential part of (u_in - u_out)|`` at x_i."""
    return float(_residuals(config.chords, config.normals)[i % config.k])


def _tangential_gradient(U: np.ndarray, N: np.ndarray) -> np.ndarray:
    g = U - np.roll(U, -1, axis=0)
    return g - np.einsum("ij,ij->i", g, N)[:, None] * N


def length_functional(config: BounceConfiguration):
    """``(L, tangential gradient)``; row i is the gradient at x_i."""
    _, ell = _chords(config.points)
    return float(np.sum(ell)), _tangential_gradient(config.chords, config.normals)


# ------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class PeriodicBilliardTrajectory:
    config: BounceConfiguration
    length: float
    residuals: np.ndarray
    chord_contained: np.ndarray
    tol_reflect: float = TOL_REFLECT
    morse_index: Optional[int] = None
    nullity: Optional[int] = None
    provenance: str = "variational"
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def points(self) -> np.ndarray:
        return self.config.points

    @property
    def valid(self) -> bool:
        return bool(np.all(self.residuals <= self.tol_reflect) and np.all(self.chord_contained))

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))


def validate(
    config: BounceConfiguration,
    tol_reflect: float = TOL_REFLECT,
    tol_graze: float = TOL_GRAZE,
    samples: int = CHORD_SAMPLES,
    provenance: str = "variational",
) -> PeriodicBilliardTrajectory:
    X = config.points
    _, ell = _chords(X)
    res = _residuals(config.chords, config.normals)
    # a bounce needs a nonzero normal jump
    graze = np.abs(np.einsum("ij,ij->i", config.chords, config.normals)) <= tol_graze
    res = np.where(graze, np.inf, res)
    prev = np.roll(X, 1, axis=0)
    inside = np.array([segment_in_closure(config.domain, a, b, samples) for a, b in zip(prev, X)])
    return PeriodicBilliardTrajectory(
        config,
        float(np.sum(ell)),
        res,
        inside,
        tol_reflect=tol_reflect,
        provenance=provenance,
        metadata={"chord_samples": samples, "tol_graze": tol_graze},
    )


# ------------------------------------------------------------------- solver


def _tangent_bases(N: np.ndarray) -> np.ndarray:
    """Orthonormal tangent frames, shape (k, n, n-1)."""
    k, n = N.shape
    if n == 2:
        return np.stack([-N[:, 1], N[:, 0]], axis=1)[:, :, None]
    _, _, vt = np.linalg.svd(N[:, None, :])
    return np.transpose(vt[:, 1:, :], (0, 2, 1))


def _retract(domain: ImplicitDomain, Z: np.ndarray, iters: int = 30) -> np.ndarray:
    Z = Z.copy()
    for _ in range(iters):
        F, g = domain.F.gradients(Z)
        gg = np.einsum("ij,ij->i", g, g)
        if np.all(np.abs(F) <= 1e-15 * np.sqrt(gg)):
            break
        Z -= (F / gg)[:, None] * g
    return Z


def _reduced(domain: ImplicitDomain, X: np.ndarray, hessian: bool = True):
    """Gradient and Riemannian Hessian of L in stacked tangent coordinates."""
    k, n = X.shape
    _, g, H = domain.F.jets(X)
    gn = np.linalg.norm(g, axis=1)
    N = g / gn[:, None]
    U, ell = _chords(X)
    G = U - np.roll(U, -1, axis=0)
    T = _tangent_bases(N)  # (k, n, n-1)
    gr = np.einsum("kni,kn->ki", T, G).reshape(-1)
    if not hessian:
        return gr, T, N, U, ell, None
    m = n - 1
    He = np.zeros((k, n, k, n))
    eye = np.eye(n)
    for i in range(k):  # chord from x_{i-1} to x_i
        A = (eye - np.outer(U[i], U[i])) / ell[i]
        j = (i - 1) % k
        He[i, :, i, :] += A
        He[j, :, j, :] += A
        He[i, :, j, :] -= A
        He[j, :, i, :] -= A
    lam = np.einsum("kn,kn->k", G, g) / gn**2
    for i in range(k):
        He[i, :, i, :] -= lam[i] * H[i]
    Hr = np.einsum("ani,anbm,bmj->aibj", T, He, T).reshape(k * m, k * m)
    return gr, T, N, U, ell, 0.5 * (Hr + Hr.T)


class _Polished(NamedTuple):
    X: np.ndarray
    grad_norm: float
    converged: bool
    index: int
    nullity: int


def _newton(domain: ImplicitDomain, X: np.ndarray, max_iter: int = 60) -> Optional[_Polished]:
    k, n = X.shape
    scale = 1.0 + domain.diameter_bound
    converged = False
    for _ in range(max_iter):
        gr, T, N, U, ell, Hr = _reduced(domain, X)
        if np.min(ell) < MIN_CHORD:
            return None
        gnorm = float(np.linalg.norm(gr))
        if gnorm <= 1e-13 * scale:
            converged = True
            break
        s = -np.linalg.lstsq(Hr, gr, rcond=1e-12)[0]
        alpha = 1.0
        for _ in range(12):
            step = np.einsum("kni,ki->kn", T, (alpha * s).reshape(k, n - 1))
            Xt = _retract(domain, X + step)
            grt = _reduced(domain, Xt, hessian=False)
            if np.min(grt[4]) >= MIN_CHORD and np.linalg.norm(grt[0]) < (1 - 1e-4 * alpha) * gnorm:
                break
            alpha *= 0.5
        X = Xt
    gr, T, N, U, ell, Hr = _reduced(domain, X)
    if np.min(ell) < MIN_CHORD:
        return None
    gnorm = float(np.linalg.norm(gr))
    converged = converged or gnorm <= 1e-11 * scale
    ev = np.linalg.eigvalsh(Hr)
    tol = NEAR_ZERO_EIG * max(1.0, float(np.max(np.abs(ev))))
    return _Polished(X, gnorm, converged, int(np.sum(ev < -tol)), int(np.sum(np.abs(ev) <= tol)))


def _ascend(domain: ImplicitDomain, X: np.ndarray, iters: int = 40) -> np.ndarray:
    step = 0.05 * domain.diameter_bound
    L = np.sum(_chords(X)[1])
    for _ in range(iters):
        F, N = _normals(domain, X)
        U, ell = _chords(X)
        if np.min(ell) < MIN_CHORD:
            return X
        G = _tangential_gradient(U, N)
        Xt = _retract(domain, X + step * G)
        Lt = np.sum(_chords(Xt)[1])
        if Lt > L:
            X, L = Xt, Lt
            step *= 1.2
        else:
            step *= 0.5
    return X


def _dihedral_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Vertex-matching distance minimized over cyclic shifts and reversal."""
    if A.shape != B.shape:
        return math.inf
    best = math.inf
    for C in (B, B[::-1]):
        for s in range(len(C)):
            best = min(best, float(np.max(np.linalg.norm(A - np.roll(C, s, axis=0), axis=1))))
    return best


def _same_class(a: PeriodicBilliardTrajectory, b: PeriodicBilliardTrajectory, tol: float) -> bool:
    if a.k != b.k:
        return False
    if _dihedral_distance(a.points, b.points) <= tol:
        return True
    # members of one degenerate continuum (e.g. rotated diameters of a disk)
    same_len = abs(a.length - b.length) <= 1e-7 * (1.0 + a.length)
    return bool(same_len and a.nullity and b.nullity)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BILLIARD_THREADS", "1")))
    except ValueError:
        return 1


def find_critical_configs(
    domain: ImplicitDomain,
    k: int,
    starts: int = 64,
    seed: int = 0,
    tol_reflect: float = TOL_REFLECT,
    dedup_tol: float = DEDUP_TOL,
    threads: Optional[int] = None,
) -> list[PeriodicBilliardTrajectory]:
    """Multistart search for k-bounce periodic trajectories, sorted by length.

    Odd-numbered starts first climb the length (which spreads the points
    and favours long orbits); every start is then polished by Newton on
    the boundary, so saddles such as the minor axis of an ellipse are
    reached as well as maxima.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if starts < 1:
        raise ValueError("starts must be at least 1")
    rng = np.random.default_rng(seed)
    n = domain.n
    raw = rng.uniform(domain.lo, domain.hi, size=(starts * k, n))
    inits = project_points(domain, raw)[0].reshape(starts, k, n)

    def run(s):
        X = inits[s]
        if s % 2:
            X = _ascend(domain, X)
        return _newton(domain, X)

    nthreads = threads or _threads()
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            polished = list(ex.map(run, range(starts)))
    else:
        polished = [run(s) for s in range(starts)]

    found: list[PeriodicBilliardTrajectory] = []
    any_converged = False
    for p in polished:
        if p is None or not p.converged:
            continue
        any_converged = True
        try:
            cfg = BounceConfiguration(domain, p.X)
        except ValueError:
            continue
        tr = validate(cfg, tol_reflect)
        if not tr.valid:
            continue
        tr = _with_index(tr, p.index, p.nullity)
        for j, other in enumerate(found):
            if _same_class(tr, other, dedup_tol):
                if tr.max_residual < other.max_residual:
                    found[j] = tr
                break
        else:
            found.append(tr)
    if not any_converged:
        warnings.warn(f"Newton polishing did not converge from any of {starts} starts (k={k})")
    found.sort(key=lambda t: t.length)
    return found


def _with_index(tr: PeriodicBilliardTrajectory, index: int, nullity: int) -> PeriodicBilliardTrajectory:
    return PeriodicBilliardTrajectory(
        tr.config,
        tr.length,
        tr.residuals,
        tr.chord_contained,
        tr.tol_reflect,
        index,
        nullity,
        tr.provenance,
        tr.metadata,
    )


def morse_index(traj: PeriodicBilliardTrajectory, h: float = 1e-3, near_zero: float = NEAR_ZERO_EIG):
    """``(index, degeneracy)`` of the length at a trajectory.

    The Hessian is taken by central differences of ``L`` in tangent
    coordinates ``s -> retract(x + T s)``; at a critical point the choice of
    retraction drops out at second order.
    """
    domain = traj.config.domain
    X = traj.points
    k, n = X.shape
    T = _tangent_bases(traj.config.normals)
    m = k * (n - 1)

    def L(s):
        Y = _retract(domain, X + np.einsum("kni,ki->kn", T, s.reshape(k, n - 1)))
        return float(np.sum(_chords(Y)[1]))

    H = np.zeros((m, m))
    E = np.eye(m) * h
    L0 = L(np.zeros(m))
    for a in range(m):
        H[a, a] = (L(E[a]) - 2 * L0 + L(-E[a])) / h**2
        for b in range(a + 1, m):
            H[a, b] = H[b, a] = (L(E[a] + E[b]) - L(E[a] - E[b]) - L(-E[a] + E[b]) + L(-E[a] - E[b])) / (
                4 * h**2
            )
    ev = np.linalg.eigvalsh(H)
    return int(np.sum(ev < -near_zero)), int(np.sum(np.abs(ev) <= near_zero))


# ---------------------------------------------------------------- simulator


class BilliardPath(NamedTuple):
    points: np.ndarray
    grazed: bool


def _first_hit(domain: ImplicitDomain, x: np.ndarray, u: np.ndarray, t_min: float, tol: float = 1e-10):
    """Smallest t > t_min with F(x + t u) = 0, or None if the box is left."""
    span = domain.diameter_bound
    h = span / 512
    ts = t_min + h * np.arange(0, 1025)
    f = domain.values(x + ts[:, None] * u)
    out = np.nonzero(f > 0)[0]
    if out.size == 0:
        return None
    j = int(out[0])
    if j == 0:
        return None
    a, b = ts[j - 1], ts[j]
    for _ in range(60):
        if b - a <= 1e-3 * tol:
            break
        mid = 0.5 * (a + b)
        if domain.value(x + mid * u) > 0:
            b = mid
        else:
            a = mid
    t = 0.5 * (a + b)
    for _ in range(8):  # Newton on F along the ray
        F, g = domain.F.scalar_grad(*(x + t * u))
        d = float(np.dot(g, u))
        if d == 0.0:
            break
        dt = F / d
        t_new = t - dt
        if not (a - tol <= t_new <= b + tol):
            break
        t = t_new
        if abs(dt) <= tol:
            break
    return t


def simulate_billiard(
    domain: ImplicitDomain, x0, direction, max_bounces: int, tol_graze: float = TOL_GRAZE
) -> BilliardPath:
    """Straight flight with specular reflection; stops early on grazing."""
    x = np.asarray(x0, float)
    u = np.asarray(direction, float)
    u = u / np.linalg.norm(u)
    if domain.value(x) >= -domain.tol_boundary:
        raise ValueError("start point must lie in the open domain")
    pts = [x.copy()]
    t_min = 0.0
    for _ in range(max_bounces):
        t = _first_hit(domain, x, u, t_min)
        if t is None:
            raise RuntimeError("ray left the bounding box without meeting the boundary")
        x = x + t * u
        pts.append(x.copy())
        _, g = domain.F.scalar_grad(*x)
        nu = np.asarray(g) / np.linalg.norm(g)
        try:
            u = reflect(u, nu, tol_graze)
        except GrazingError:
            return BilliardPath(np.array(pts), True)
        # leave the boundary before looking for the next crossing
        t_min = 1e-7 * domain.diameter_bound
    return BilliardPath(np.array(pts), False)


def write_trajectory_csv(path, trajectories) -> None:
    """Rows of (trajectory id, bounce index, coordinates, residual)."""
    trajectories = list(trajectories)
    n = trajectories[0].points.shape[1] if trajectories else 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "bounce"] + [f"x{i + 1}" for i in range(n)] + ["residual"])
        for j, tr in enumerate(trajectories):
            for i, (p, r) in enumerate(zip(tr.points, tr.residuals)):
                w.writerow([j, i] + [f"{c:.17g}" for c in p] + [f"{r:.6e}"])
