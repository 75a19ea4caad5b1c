"""Smoothed billiard flow ``H_eps = |p|^2/2 + eps * d(q)^-2`` on the level 1/2.

As ``eps -> 0`` periodic orbits of ``H_eps`` on ``{H_eps = 1/2}`` converge to
periodic billiard trajectories and their action ``int |p|^2 dt`` to the
length.  This module integrates the flow, finds periodic orbits (brake
orbits by symmetric shooting, general ones by a return-map Newton), runs the
``eps`` continuation, and checks the Liouville-field inequality behind the
contact-type argument.
"""

from __future__ import annotations

import csv
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, trapezoid

from .billiard import BounceConfiguration, validate
from .geometry import (
    BoundarySampler,
    GeometryError,
    ImplicitDomain,
    inradius,
    project_points,
    project_to_boundary,
)

LEVEL = 0.5
TOL_ENERGY = 1e-6
SUBSTEP_THRESHOLD = 0.01
ORBIT_THRESHOLD = 0.002
JUMP_TOL = 3e-7
DEFAULT_SCHEDULE = (1e-2, 1e-3, 1e-4, 1e-5)

__all__ = [
    "ContinuationError",
    "FlowTrajectory",
    "IntegrationError",
    "LiouvilleField",
    "LiouvilleReport",
    "OrbitError",
    "SmoothedHamiltonian",
    "SmoothedOrbit",
    "action",
    "action_oracle_disk",
    "brake_seed",
    "build_smoothed_hamiltonian",
    "continue_to_billiard",
    "extract_billiard",
    "find_periodic_orbit",
    "integrate",
    "liouville_check",
    "liouville_field",
    "liouville_terms",
    "write_action_trace_csv",
    "write_orbit_csv",
]


class IntegrationError(RuntimeError):
    """The step left the domain; carries the last valid state."""

    def __init__(self, message, last_state=None, trajectory=None):
        super().__init__(message)
        self.last_state = last_state
        self.trajectory = trajectory


class OrbitError(RuntimeError):
    pass


class ContinuationError(RuntimeError):
    def __init__(self, message, last_good_eps=None, trace=None):
        super().__init__(message)
        self.last_good_eps = last_good_eps
        self.trace = trace or []


# --------------------------------------------------------------- hamiltonian

_SAMPLERS: "weakref.WeakKeyDictionary[ImplicitDomain, BoundarySampler]" = weakref.WeakKeyDictionary()


def _sampler(domain: ImplicitDomain) -> Optional[BoundarySampler]:
    if domain.n != 2:
        return None
    s = _SAMPLERS.get(domain)
    if s is None:
        s = _SAMPLERS[domain] = BoundarySampler(domain)
    return s


@dataclass(frozen=True, eq=False)
class SmoothedHamiltonian:
    domain: ImplicitDomain
    eps: float
    level: float = LEVEL
    _sampler: Optional[BoundarySampler] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def n(self) -> int:
        return self.domain.n

    def foot(self, q):
        """``(d, y)``: distance to the boundary and the nearest boundary point."""
        q = np.asarray(q, float)
        if self._sampler is not None:
            d, y, _ = self._sampler.nearest(q)
            return d, np.asarray(y)
        P = project_to_boundary(self.domain, q)
        return float(np.linalg.norm(q - P.point)), P.point

    def h(self, q) -> float:
        d, _ = self.foot(q)
        return d**-2

    def potential(self, q):
        """``(eps h, grad(eps h), d, foot)``; the gradient uses grad d = (q - y)/d."""
        q = np.asarray(q, float)
        d, y = self.foot(q)
        U = self.eps / (d * d)
        g = (-2.0 * self.eps / d**4) * (q - y)
        return U, g, d, y

    def energy(self, q, p) -> float:
        p = np.asarray(p, float)
        return 0.5 * float(p @ p) + self.eps * self.h(q)


def build_smoothed_hamiltonian(domain: ImplicitDomain, eps: float) -> SmoothedHamiltonian:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return SmoothedHamiltonian(domain, float(eps), LEVEL, _sampler(domain))


# ---------------------------------------------------------------- integrator


@dataclass
class FlowTrajectory:
    """States at every accepted (sub)step, with explicit times."""

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    energy: np.ndarray
    distance: np.ndarray
    substeps: int = 0

    @property
    def max_drift(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))


class _State:
    __slots__ = ("t", "q", "p", "g", "U", "d")

    def __init__(self, t, q, p, g, U, d):
        self.t, self.q, self.p, self.g, self.U, self.d = t, q, p, g, U, d

    def energy(self) -> float:
        return 0.5 * float(self.p @ self.p) + self.U


def _initial(H: SmoothedHamiltonian, q, p, t: float = 0.0) -> _State:
    q = np.asarray(q, float)
    p = np.asarray(p, float)
    if H.domain.value(q) >= -H.domain.tol_boundary:
        raise IntegrationError("initial point is not inside the domain", (q, p))
    U, g, d, _ = H.potential(q)
    return _State(t, q, p, g, U, d)


def _kdk(H: SmoothedHamiltonian, s: _State, h: float) -> Optional[_State]:
    ph = s.p - 0.5 * h * s.g
    q1 = s.q + h * ph
    if H.domain.value(q1) >= -H.domain.tol_boundary:
        return None
    U, g, d, _ = H.potential(q1)
    return _State(s.t + h, q1, ph - 0.5 * h * g, g, U, d)


def _jumped(g0: np.ndarray, g1: np.ndarray, h: float, jump: Optional[float]) -> bool:
    # h |g1 - g0| bounds the energy error of one leapfrog step; it also
    # catches the force discontinuity across the medial axis.
    if jump is None:
        return False
    dg = g1 - g0
    return h * math.sqrt(float(dg @ dg)) > jump


def _steps(
    H: SmoothedHamiltonian,
    s: _State,
    dt: float,
    threshold: float,
    max_depth: int,
    jump: Optional[float] = None,
):
    """Leaf states of one base step, halving while |grad(eps h)| * h > threshold.

    With ``jump`` set, a leaf is also halved while ``h |g1 - g0| > jump``.
    """
    stack = [(dt, 0)]
    while stack:
        h, depth = stack.pop()
        if depth < max_depth and math.sqrt(float(s.g @ s.g)) * h > threshold:
            stack += [(0.5 * h, depth + 1)] * 2
            continue
        nxt = _kdk(H, s, h)
        if nxt is not None and (
            depth >= max_depth
            or (math.sqrt(float(nxt.g @ nxt.g)) * h <= threshold and not _jumped(s.g, nxt.g, h, jump))
        ):
            s = nxt
            yield s, h
            continue
        if depth >= max_depth:
            raise IntegrationError("step left the domain at maximal refinement", (s.q, s.p))
        stack += [(0.5 * h, depth + 1)] * 2


def _pack(states: Sequence[_State], substeps: int = 0) -> FlowTrajectory:
    return FlowTrajectory(
        np.array([s.t for s in states]),
        np.array([s.q for s in states]),
        np.array([s.p for s in states]),
        np.array([s.energy() for s in states]),
        np.array([s.d for s in states]),
        substeps,
    )


def integrate(
    H: SmoothedHamiltonian,
    state,
    dt: float,
    steps: int,
    substep_threshold: float = SUBSTEP_THRESHOLD,
    max_depth: int = 24,
    jump_tol: Optional[float] = None,
) -> FlowTrajectory:
    """Kick-drift-kick leapfrog for the separable ``H``.

    Each of the ``steps`` base steps is split in halves, recursively, while
    ``|grad(eps h)| * dt`` exceeds ``substep_threshold`` at either end.
    ``jump_tol`` adds the per-step energy control used by the orbit finder.
    The level value is not enforced.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = _initial(H, *state)
    out = [s]
    leaves = 0
    try:
        for _ in range(steps):
            for s, _h in _steps(H, s, dt, substep_threshold, max_depth, jump_tol):
                out.append(s)
                leaves += 1
    except IntegrationError as exc:
        exc.trajectory = _pack(out, leaves)
        raise
    return _pack(out, leaves)


# -------------------------------------------------------------------- orbits


@dataclass
class SmoothedOrbit:
    eps: float
    period: float
    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    energy: np.ndarray
    distance: np.ndarray
    action: float
    closure_defect: float
    mode: str
    params: dict = field(default_factory=dict)
    newton_iterations: int = 0

    @property
    def max_energy_error(self) -> float:
        return float(np.max(np.abs(self.energy - LEVEL)))

    def turning_distances(self) -> np.ndarray:
        """Distances to the boundary at the states where |p| is locally minimal."""
        sp = np.linalg.norm(self.p, axis=1)
        i = np.nonzero((sp[1:-1] <= sp[:-2]) & (sp[1:-1] <= sp[2:]))[0] + 1
        return self.distance[i]


def action(orbit) -> float:
    """Trapezoidal ``int |p|^2 dt`` (times may be non-uniform)."""
    p2 = np.einsum("ij,ij->i", orbit.p, orbit.p)
    return float(trapezoid(p2, orbit.t)) if len(p2) > 1 else 0.0


def action_oracle_disk(eps: float, R: float = 1.0) -> float:
    """Action of the diameter brake orbit of the radius-R disk by 1D quadrature."""
    qs = R - math.sqrt(2.0 * eps)
    val, _ = quad(lambda x: math.sqrt(max(0.0, 1.0 - 2.0 * eps / (R - x) ** 2)), 0.0, qs, limit=200)
    return 4.0 * val


def _tangent_basis(nu: np.ndarray) -> np.ndarray:
    n = len(nu)
    if n == 2:
        return np.array([[-nu[1]], [nu[0]]])
    _, _, vt = np.linalg.svd(nu[None, :])
    return vt[1:].T


def _boundary_point(domain: ImplicitDomain, y0, T, s):
    """Retract ``y0 + T s`` onto the boundary; return ``(y, unit normal)``."""
    z = np.asarray(y0, float) + T @ np.atleast_1d(s)
    grad = domain.F.scalar_grad
    for _ in range(50):
        F, g = grad(*z)
        gg = sum(v * v for v in g)
        z = z - (F / gg) * np.asarray(g)
        if abs(F) <= 1e-15 * math.sqrt(gg):
            break
    _, g = grad(*z)
    g = np.asarray(g)
    return z, g / np.linalg.norm(g)


def brake_seed(H: SmoothedHamiltonian, foot):
    """Turning-point state ``(y - sqrt(2 eps) nu(y), 0)`` over a boundary point."""
    y, nu = _boundary_point(H.domain, foot, np.zeros((H.n, 1)), [0.0])
    return y - math.sqrt(2.0 * H.eps) * nu, np.zeros(H.n)


def _refine(H, s: _State, h: float, fn: Callable[[_State], float]) -> _State:
    """State on the leaf step ``s -> s + h`` where ``fn`` crosses zero."""
    a, fa = 0.0, fn(s)
    b = 1.0
    sb = _kdk(H, s, h)
    fb = fn(sb)
    best = sb
    for _ in range(60):
        if fb == fa:
            break
        c = b - fb * (b - a) / (fb - fa)
        if not (a < c < b):
            c = 0.5 * (a + b)
        sc = _kdk(H, s, c * h)
        fc = fn(sc)
        best = sc
        if abs(fc) <= 1e-15 or (b - a) < 1e-15:
            break
        if (fc < 0) == (fa < 0):
            a, fa = c, fc
        else:
            b, fb = c, fc
    return best


def _run_until(H, s0: _State, dt, threshold, t_max, fn, arm: Callable[[_State], bool] = lambda s: True):
    """Integrate until ``fn`` goes from negative to nonnegative (after ``arm``)."""
    states = [s0]
    s = s0
    armed = False
    prev = None
    while s.t < t_max:
        for nxt, h in _steps(H, s, dt, threshold, 24, JUMP_TOL):
            val = fn(nxt)
            armed = armed or arm(nxt)
            if armed and prev is not None and prev < 0 <= val:
                ev = _refine(H, s, h, fn)
                states.append(ev)
                return states
            prev = val if armed else None
            states.append(nxt)
            s = nxt
    return None


def _orbit_from(states, eps, period, defect, mode, params, iters) -> SmoothedOrbit:
    tr = _pack(states)
    A = action(tr)
    return SmoothedOrbit(eps, period, tr.t, tr.q, tr.p, tr.energy, tr.distance, A, defect, mode, params, iters)


def _brake_half(H, y0, T, s, dt, threshold, t_max):
    y, nu = _boundary_point(H.domain, y0, T, s)
    q0 = y - math.sqrt(2.0 * H.eps) * nu
    st = _initial(H, q0, np.zeros(H.n))

    def radial(x: _State) -> float:
        # p . grad d, with grad d = -grad(eps h) / |grad(eps h)|
        gn = math.sqrt(float(x.g @ x.g))
        return -float(x.p @ x.g) / gn if gn > 0 else 0.0

    states = _run_until(H, st, dt, threshold, t_max, radial)
    if states is None:
        raise OrbitError("no return to a turning point within the time budget")
    return states


def _mirror(states):
    """Close a half brake orbit by time reversal about its last state."""
    te = states[-1].t
    back = [
        _State(2.0 * te - s.t, s.q, -s.p, s.g, s.U, s.d) for s in reversed(states[:-1])
    ]
    return list(states) + back


def _section_frame(e: np.ndarray) -> np.ndarray:
    return _tangent_basis(e)


def find_periodic_orbit(
    H: SmoothedHamiltonian,
    seed,
    mode: str = "symmetric",
    dt: float = 1e-3,
    substep_threshold: float = ORBIT_THRESHOLD,
    max_iter: int = 50,
    tol: float = 5e-9,
    fd_step: float = 1e-6,
    t_max: Optional[float] = None,
    section=None,
    returns: int = 1,
    tol_energy: float = TOL_ENERGY,
) -> SmoothedOrbit:
    """Periodic orbit of ``H`` on its level set, from a seed state ``(q, p)``.

    ``symmetric``: the seed is a turning point (``p = 0``); the unknown is
    the boundary point under it, and the orbit closes by time reversal once
    the next turning event has ``p = 0`` too.  ``return-map``: Newton on
    the first return to the section through the seed point normal to the
    seed velocity (or ``section = (c, e)``), in section coordinates and
    direction.  Jacobians are forward differences.
    """
    q_seed, p_seed = (np.asarray(v, float) for v in seed)
    E = 0.5 * float(p_seed @ p_seed) + H.eps * H.h(q_seed)
    if abs(E - H.level) > 1e-9:
        raise ValueError(f"seed is off the level set: H = {E:.12g}")
    t_max = t_max or 8.0 * H.domain.diameter_bound * max(1, returns)
    if mode == "symmetric":
        return _symmetric(H, q_seed, dt, substep_threshold, max_iter, tol, fd_step, t_max, tol_energy)
    if mode in ("return-map", "return-map-newton"):
        return _return_map(
            H, q_seed, p_seed, dt, substep_threshold, max_iter, tol, fd_step, t_max, section, returns, tol_energy
        )
    raise ValueError(f"unknown mode {mode!r}")


def _check_energy(orbit: SmoothedOrbit, tol_energy: float) -> SmoothedOrbit:
    if orbit.max_energy_error > tol_energy:
        raise OrbitError(
            f"energy drift {orbit.max_energy_error:.3e} exceeds {tol_energy:g}; reduce dt or the substep threshold"
        )
    return orbit


def _symmetric(H, q_seed, dt, thr, max_iter, tol, fd_step, t_max, tol_energy):
    _, y0 = H.foot(q_seed)
    _, nu0 = _boundary_point(H.domain, y0, np.zeros((H.n, 1)), [0.0])
    T = _tangent_basis(nu0)
    m = T.shape[1]
    s = np.zeros(m)
    scale = H.domain.diameter_bound

    def residual(s):
        states = _brake_half(H, y0, T, s, dt, thr, t_max)
        return states[-1].p.copy(), states

    r, states = residual(s)
    it = 0
    while np.linalg.norm(r) > tol:
        if it >= max_iter:
            raise OrbitError(f"symmetric shooting did not converge in {max_iter} iterations (|p| = {np.linalg.norm(r):.3e})")
        it += 1
        J = np.empty((len(r), m))
        for j in range(m):
            e = np.zeros(m)
            e[j] = fd_step * scale
            J[:, j] = (residual(s + e)[0] - r) / e[j]
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        lam = 1.0
        for _ in range(10):
            try:
                rt, st = residual(s + lam * step)
            except (OrbitError, IntegrationError):
                rt = None
            if rt is not None and np.linalg.norm(rt) < np.linalg.norm(r):
                break
            lam *= 0.5
        if rt is None:
            raise OrbitError("symmetric shooting lost the orbit")
        s, r, states = s + lam * step, rt, st
    y, _ = _boundary_point(H.domain, y0, T, s)
    full = _mirror(states)
    te = states[-1].t
    orbit = _orbit_from(
        full, H.eps, 2.0 * te, 2.0 * float(np.linalg.norm(r)), "symmetric", {"foot": y}, it
    )
    return _check_energy(orbit, tol_energy)


def _return_map(H, q_seed, p_seed, dt, thr, max_iter, tol, fd_step, t_max, section, returns, tol_energy):
    if section is None:
        if not np.any(p_seed):
            raise ValueError("return-map mode needs a moving seed (p != 0)")
        c, e = q_seed.copy(), p_seed / np.linalg.norm(p_seed)
    else:
        c, e = (np.asarray(v, float) for v in section)
        e = e / np.linalg.norm(e)
    W = _section_frame(e)
    m = W.shape[1]

    def state_of(z):
        a, phi = z[:m], z[m:]
        q = c + W @ a
        U = H.eps * H.h(q)
        if U >= H.level:
            raise OrbitError("section point outside the energy region")
        u = e + W @ phi
        u /= np.linalg.norm(u)
        return q, math.sqrt(2.0 * (H.level - U)) * u

    def coords(q, p):
        a = W.T @ (q - c)
        pe = float(p @ e)
        return np.concatenate([a, (W.T @ p) / pe])

    z = coords(q_seed, p_seed)
    sec = lambda s: float((s.q - c) @ e)

    def flow(z):
        q, p = state_of(z)
        st = _initial(H, q, p)
        states, count = [st], 0
        s = st
        while True:
            # leave the section before arming the crossing test
            part = _run_until(H, s, dt, thr, t_max, sec, arm=lambda x: abs(sec(x)) > 1e-6 * H.domain.diameter_bound)
            if part is None:
                raise OrbitError("section never re-crossed within the time budget")
            states += part[1:]
            s = part[-1]
            count += 1
            if count >= returns:
                break
        end = states[-1]
        return coords(end.q, end.p), states

    def residual(z):
        z1, states = flow(z)
        return z1 - z, states

    r, states = residual(z)
    it = 0
    while np.linalg.norm(r) > tol:
        if it >= max_iter:
            raise OrbitError(f"return-map Newton did not converge in {max_iter} iterations (|r| = {np.linalg.norm(r):.3e})")
        it += 1
        J = np.empty((2 * m, 2 * m))
        for j in range(2 * m):
            dz = np.zeros(2 * m)
            dz[j] = fd_step
            J[:, j] = (residual(z + dz)[0] - r) / fd_step
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        lam = 1.0
        for _ in range(10):
            try:
                rt, st = residual(z + lam * step)
            except (OrbitError, IntegrationError):
                rt = None
            if rt is not None and np.linalg.norm(rt) < np.linalg.norm(r):
                break
            lam *= 0.5
        if rt is None:
            raise OrbitError("return-map Newton lost the orbit")
        z, r, states = z + lam * step, rt, st
    first, last = states[0], states[-1]
    defect = float(np.linalg.norm(np.concatenate([last.q - first.q, last.p - first.p])))
    orbit = _orbit_from(
        states, H.eps, last.t - first.t, defect, "return-map",
        {"section": (c, e), "z": z, "returns": returns}, it,
    )
    return _check_energy(orbit, tol_energy)


# -------------------------------------------------------------- continuation


def extract_billiard(domain: ImplicitDomain, orbit: SmoothedOrbit, tol_reflect: float = 1e-4):
    """Bounce points as the closest approaches of the near-boundary arcs.

    An arc is a maximal run of states with ``d < 3 sqrt(2 eps)``; the orbit
    is periodic, so a run touching both ends is one arc.
    """
    width = 3.0 * math.sqrt(2.0 * orbit.eps)
    near = orbit.distance < width
    idx = np.arange(len(near))
    if near.all():
        raise OrbitError("orbit never leaves the boundary layer")
    # rotate so the sequence starts outside an arc
    k0 = int(np.argmin(near))
    order = np.roll(idx, -k0)
    arcs, cur = [], []
    for i in order:
        if near[i]:
            cur.append(i)
        elif cur:
            arcs.append(cur)
            cur = []
    if cur:
        arcs.append(cur)
    feet = []
    for arc in arcs:
        j = arc[int(np.argmin(orbit.distance[arc]))]
        feet.append(project_to_boundary(domain, orbit.q[j]).point)
    if len(feet) < 2:
        raise OrbitError(f"only {len(feet)} near-boundary arc(s) found")
    cfg = BounceConfiguration(domain, np.array(feet))
    return validate(cfg, tol_reflect=tol_reflect, provenance="smoothed-limit"), len(arcs)


def _seed_at(H: SmoothedHamiltonian, orbit: SmoothedOrbit):
    if orbit.mode == "symmetric":
        return brake_seed(H, orbit.params["foot"]), {}
    c, e = orbit.params["section"]
    z = orbit.params["z"]
    W = _section_frame(e)
    m = W.shape[1]
    q = c + W @ z[:m]
    u = e + W @ z[m:]
    u /= np.linalg.norm(u)
    U = H.eps * H.h(q)
    if U >= H.level:
        raise OrbitError("warm start outside the energy region")
    return (q, math.sqrt(2.0 * (H.level - U)) * u), {"section": (c, e), "returns": orbit.params["returns"]}


def continue_to_billiard(
    domain: ImplicitDomain,
    seed_orbit: SmoothedOrbit,
    schedule: Sequence[float] = DEFAULT_SCHEDULE,
    tol_reflect: float = 1e-4,
    **orbit_kw,
):
    """Follow a periodic orbit down the ``eps`` schedule and read off the billiard limit.

    Returns ``(trajectory, trace, orbits)``; ``trace`` rows are
    ``(eps, period, action)``.
    """
    schedule = [float(e) for e in schedule]
    if not schedule:
        raise ValueError("empty eps schedule")
    if any(e <= 0 for e in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("eps schedule must be positive and strictly decreasing")
    if not math.isclose(seed_orbit.eps, schedule[0], rel_tol=1e-12):
        raise ValueError("seed orbit must belong to the first eps of the schedule")
    orbit = seed_orbit
    trace = [(orbit.eps, orbit.period, orbit.action)]
    orbits = [orbit]
    for eps in schedule[1:]:
        H = build_smoothed_hamiltonian(domain, eps)
        try:
            seed, extra = _seed_at(H, orbit)
            orbit = find_periodic_orbit(H, seed, mode=orbit.mode, **extra, **orbit_kw)
        except (OrbitError, IntegrationError) as exc:
            raise ContinuationError(f"orbit lost at eps={eps:g}: {exc}", trace[-1][0], trace) from exc
        trace.append((orbit.eps, orbit.period, orbit.action))
        orbits.append(orbit)
    traj, _ = extract_billiard(domain, orbit, tol_reflect)
    if not traj.valid:
        raise ContinuationError(
            f"extracted trajectory fails validation (residuals {np.array2string(traj.residuals, precision=3)})",
            trace[-1][0],
            trace,
        )
    return traj, trace, orbits


def default_seed(domain: ImplicitDomain, eps: float, **orbit_kw) -> SmoothedOrbit:
    """Brake orbit over the boundary point nearest the incenter."""
    H = build_smoothed_hamiltonian(domain, eps)
    c = inradius(domain).incenter
    y = project_to_boundary(domain, c).point
    return find_periodic_orbit(H, brake_seed(H, y), mode="symmetric", **orbit_kw)


__all__.append("default_seed")


# ------------------------------------------------------------------ liouville


def _bump(s: np.ndarray) -> np.ndarray:
    """Smooth step: 1 for s <= 0, 0 for s >= 1, C-infinity in between."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1 - s, 1.0)), 0.0)
        b = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True, eq=False)
class LiouvilleField:
    """``Z(q) = chi(q) (q - c) / (2n)`` with chi = 1 on the box, 0 beyond twice it."""

    center: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n(self) -> int:
        return len(self.center)

    def _chi(self, Q):
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        s = np.abs(Q - mid) / half - 1.0  # 0 on the box face, 1 on the doubled box
        return np.prod(_bump(s), axis=-1)

    def __call__(self, Q) -> np.ndarray:
        Q = np.asarray(Q, float)
        return self._chi(Q)[..., None] * (Q - self.center) / (2 * self.n)

    def jacobian(self, Q, h: float = 1e-6) -> np.ndarray:
        """``J[..., i, j] = d Z_j / d q_i`` by central differences."""
        Q = np.asarray(Q, float)
        J = np.empty(Q.shape + (self.n,))
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = h
            J[..., i, :] = (self(Q + e) - self(Q - e)) / (2 * h)
        return J


def liouville_field(domain: ImplicitDomain) -> LiouvilleField:
    if domain.star_center is None:
        raise GeometryError(f"{domain.name}: no star center declared; the radial field needs one")
    return LiouvilleField(np.array(domain.star_center, float), domain.lo, domain.hi)


def liouville_terms(eps: float, Zf: LiouvilleField, Q, P, Y):
    """``(dH_eps(Zbar), dh(Z), sum p_i dp_i(Zbar))`` at states with feet ``Y``."""
    Q, P, Y = (np.atleast_2d(np.asarray(v, float)) for v in (Q, P, Y))
    J = Zf.jacobian(Q)
    kin = np.einsum("bi,bi->b", P, P) - np.einsum("bi,bij,bj->b", P, J, P)
    d = np.linalg.norm(Q - Y, axis=1)
    grad_h = -2.0 * (Q - Y) / d[:, None] ** 4
    dhZ = np.einsum("bi,bi->b", grad_h, Zf(Q))
    return kin + eps * dhZ, dhZ, kin


@dataclass
class LiouvilleReport:
    eps: float
    samples: int
    min_slack: float
    min_dH: float
    min_dhZ: float
    max_dZ: float
    min_outward: float
    dZ_bound: float
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return (
            self.min_slack >= -self.tol
            and self.min_dhZ >= -self.tol
            and self.max_dZ <= self.dZ_bound + self.tol
            and self.min_outward > 0
        )

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["passed"] = self.passed
        return d


def liouville_check(domain: ImplicitDomain, eps: float, samples: int = 10_000, seed: int = 0) -> LiouvilleReport:
    """Sample ``{H_eps = 1/2}`` and report the slack of ``dH_eps(Zbar) >= |p|^2/2``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    Zf = liouville_field(domain)
    n = domain.n
    rng = np.random.default_rng(seed)
    Q = np.empty((0, n))
    Y = np.empty((0, n))
    while len(Q) < samples:
        cand = rng.uniform(domain.lo, domain.hi, size=(2 * samples, n))
        cand = cand[domain.values(cand) < -domain.tol_boundary]
        Yc, _, dc = project_points(domain, cand)
        ok = eps / dc**2 <= LEVEL
        Q = np.concatenate([Q, cand[ok]])
        Y = np.concatenate([Y, Yc[ok]])
    Q, Y = Q[:samples], Y[:samples]
    d = np.linalg.norm(Q - Y, axis=1)
    speed = np.sqrt(np.maximum(0.0, 2.0 * (LEVEL - eps / d**2)))
    u = rng.normal(size=(samples, n))
    P = speed[:, None] * u / np.linalg.norm(u, axis=1, keepdims=True)
    dH, dhZ, _ = liouville_terms(eps, Zf, Q, P, Y)
    slack = dH - 0.5 * np.einsum("bi,bi->b", P, P)
    J = Zf.jacobian(Q)
    # outwardness on boundary points under the samples
    _, N = domain.F.gradients(Y)
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    outward = np.einsum("bi,bi->b", Zf(Y), N)
    return LiouvilleReport(
        eps,
        samples,
        float(slack.min()),
        float(dH.min()),
        float(dhZ.min()),
        float(np.abs(J).max()),
        float(outward.min()),
        1.0 / (2 * n),
    )


# ------------------------------------------------------------------------ io


def write_orbit_csv(path, orbit) -> None:
    n = orbit.q.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + ["H"])
        for t, q, p, E in zip(orbit.t, orbit.q, orbit.p, orbit.energy):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in q] + [f"{v:.17g}" for v in p] + [f"{E:.17g}"])


def write_action_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "tau", "action"])
        for eps, tau, A in trace:
            w.writerow([f"{eps:.17g}", f"{tau:.17g}", f"{A:.17g}"])
