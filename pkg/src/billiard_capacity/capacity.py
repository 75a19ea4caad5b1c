"""Inradius bracket for the capacity together with its billiard candidates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .billiard import TOL_REFLECT, PeriodicBilliardTrajectory, find_critical_configs
from .geometry import ImplicitDomain, inradius

SCHEMA = "billiard-capacity/1"
WITNESS_TOL = 1e-6
CROSS_CHECK_TOL = 0.02
STATEMENT = (
    "c_FH(D*V) lies in [lower, upper] and equals the length of some periodic "
    "billiard trajectory with at most n+1 bounces"
)

__all__ = [
    "Candidate",
    "CapacityBracket",
    "capacity_bracket",
    "report",
    "write_candidates_csv",
]


@dataclass(frozen=True)
class Candidate:
    id: str
    length: float
    bounces: int
    provenance: str
    in_bracket: bool
    max_residual: float
    morse_index: Optional[int]
    points: tuple

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "length": self.length,
            "bounces": self.bounces,
            "provenance": self.provenance,
            "in_bracket": self.in_bracket,
            "max_residual": self.max_residual,
            "morse_index": self.morse_index,
            "points": [list(p) for p in self.points],
        }


@dataclass
class CapacityBracket:
    domain: str
    n: int
    r: float
    incenter: tuple
    lower: float
    upper: float
    candidates: list = field(default_factory=list)
    cross_checks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    budgets: dict = field(default_factory=dict)

    @property
    def in_bracket(self) -> list:
        return [c for c in self.candidates if c.in_bracket]

    @property
    def excluded(self) -> list:
        return [c for c in self.candidates if not c.in_bracket]

    @property
    def witness(self) -> bool:
        return bool(self.in_bracket)


def _candidate(tr: PeriodicBilliardTrajectory, ident: str, lower: float, upper: float, tol: float) -> Candidate:
    return Candidate(
        id=ident,
        length=float(tr.length),
        bounces=tr.k,
        provenance=tr.provenance,
        in_bracket=bool(lower - tol <= tr.length <= upper + tol),
        max_residual=tr.max_residual,
        morse_index=tr.morse_index,
        points=tuple(tuple(float(c) for c in p) for p in tr.points),
    )


def capacity_bracket(
    domain: ImplicitDomain,
    starts: int = 128,
    seed: int = 0,
    k_max: Optional[int] = None,
    smoothed: bool = False,
    eps_schedule: Optional[Sequence[float]] = None,
    tol_reflect: float = TOL_REFLECT,
    witness_tol: float = WITNESS_TOL,
    threads: Optional[int] = None,
) -> CapacityBracket:
    """Bracket ``[2r, 2(n+1)r]`` and periodic trajectories with ``2..n+1`` bounces.

    With ``smoothed`` the limit of smoothed orbits is added and matched
    against the variational lengths (within 0.02).
    """
    n = domain.n
    res = inradius(domain)
    r = float(res.r)
    lower, upper = 2.0 * r, 2.0 * (n + 1) * r
    k_max = n + 1 if k_max is None else min(k_max, n + 1)
    out = CapacityBracket(
        domain=domain.name,
        n=n,
        r=r,
        incenter=tuple(float(c) for c in res.incenter),
        lower=lower,
        upper=upper,
        budgets={
            "starts": starts,
            "seed": seed,
            "k": list(range(2, k_max + 1)),
            "tol_reflect": tol_reflect,
            "witness_tol": witness_tol,
            "smoothed": smoothed,
        },
    )
    for k in range(2, k_max + 1):
        found = find_critical_configs(domain, k, starts=starts, seed=seed, tol_reflect=tol_reflect, threads=threads)
        for i, tr in enumerate(found):
            if tr.valid:
                out.candidates.append(_candidate(tr, f"variational-k{k}-{i}", lower, upper, witness_tol))
    if smoothed:
        _add_smoothed(domain, out, eps_schedule, witness_tol)
    if not out.witness:
        out.warnings.append(
            "no candidate trajectory with at most n+1 bounces was found in the bracket; "
            "the search may be incomplete"
        )
    return out


def _add_smoothed(domain, out: CapacityBracket, eps_schedule, witness_tol) -> None:
    from .smoothed_flow import DEFAULT_SCHEDULE, ContinuationError, OrbitError, continue_to_billiard, default_seed

    schedule = tuple(eps_schedule) if eps_schedule else DEFAULT_SCHEDULE
    out.budgets["eps_schedule"] = list(schedule)
    try:
        seed = default_seed(domain, schedule[0])
        tr, trace, _ = continue_to_billiard(domain, seed, schedule)
    except (ContinuationError, OrbitError) as exc:
        out.warnings.append(f"smoothed continuation failed: {exc}")
        return
    if tr.k > out.n + 1 or not tr.valid:
        out.warnings.append(f"smoothed limit has {tr.k} bounces or failed validation; not listed")
        return
    cand = _candidate(tr, f"smoothed-k{tr.k}-0", out.lower, out.upper, witness_tol)
    var = [c for c in out.candidates if c.provenance == "variational" and c.bounces == tr.k]
    best = min(var, key=lambda c: abs(c.length - tr.length), default=None)
    gap = abs(best.length - tr.length) if best else float("inf")
    out.cross_checks.append(
        {
            "smoothed": cand.id,
            "length": cand.length,
            "matched": best.id if best else None,
            "difference": gap,
            "agree": bool(gap <= CROSS_CHECK_TOL),
            "action_trace": [[float(e), float(a)] for e, _, a in trace],
        }
    )
    if gap > CROSS_CHECK_TOL:
        out.warnings.append(f"smoothed limit length {tr.length:.9g} matches no variational candidate")
    out.candidates.append(cand)


def report(bracket: CapacityBracket, certificate=None) -> dict:
    """Merged report: bracket, candidates, optional contraction certificate."""
    out = {
        "schema": SCHEMA,
        "domain": bracket.domain,
        "n": bracket.n,
        "inradius": bracket.r,
        "incenter": list(bracket.incenter),
        "bracket": {"lower": bracket.lower, "upper": bracket.upper},
        "statement": STATEMENT,
        "candidates": [c.as_dict() for c in bracket.in_bracket],
        "excluded": [c.as_dict() for c in bracket.excluded],
        "witness": bracket.witness,
        "cross_checks": bracket.cross_checks,
        "warnings": list(bracket.warnings),
        "budgets": bracket.budgets,
    }
    if certificate is not None:
        out["certificate"] = certificate.as_dict()
        out["certificate_passed"] = bool(certificate.passed)
    return out


def write_candidates_csv(path, bracket: CapacityBracket) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "length", "bounces", "provenance", "in_bracket", "max_residual"])
        for c in bracket.candidates:
            w.writerow([c.id, f"{c.length:.9g}", c.bounces, c.provenance, int(c.in_bracket), f"{c.max_residual:.3g}"])
