import csv
import math

import numpy as np
import pytest

from billiard_capacity import geometry as geo
from billiard_capacity.smoothed_flow import (
    DEFAULT_SCHEDULE,
    ContinuationError,
    IntegrationError,
    SmoothedOrbit,
    action,
    action_oracle_disk,
    brake_seed,
    build_smoothed_hamiltonian,
    continue_to_billiard,
    default_seed,
    extract_billiard,
    find_periodic_orbit,
    integrate,
    liouville_check,
    liouville_field,
    liouville_terms,
    write_action_trace_csv,
    write_orbit_csv,
)


# -------------------------------------------------------------- hamiltonian


@pytest.mark.parametrize("eps", [1e-2, 1e-4])
def test_hamiltonian_examples(unit_disk, eps):
    H = build_smoothed_hamiltonian(unit_disk, eps)
    assert H.energy((0, 0), (0, 0)) == pytest.approx(eps, rel=1e-12)
    r = 1 - math.sqrt(2 * eps)
    assert H.energy((r, 0), (0, 0)) == pytest.approx(0.5, abs=1e-12)
    assert H.energy((0, 0), (0.6, 0.8)) == pytest.approx(0.5 + eps, rel=1e-12)


def test_hamiltonian_rejects_nonpositive_eps(unit_disk):
    for eps in (0.0, -1e-3):
        with pytest.raises(ValueError):
            build_smoothed_hamiltonian(unit_disk, eps)


def test_potential_gradient_matches_fd(ellipse21):
    H = build_smoothed_hamiltonian(ellipse21, 1e-3)
    rng = np.random.default_rng(2)
    h = 1e-7
    for q in rng.uniform([-1.5, -0.6], [1.5, 0.6], (40, 2)):
        _, g, d, _ = H.potential(q)
        if d < 0.05 or abs(q[0]) < 0.05:  # stay off the medial axis
            continue
        fd = [(H.eps * H.h(q + h * e) - H.eps * H.h(q - h * e)) / (2 * h) for e in np.eye(2)]
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-9)


# --------------------------------------------------------------- integrator


def test_integrate_example_energy_drift(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    run = integrate(H, ((0, 0), (1, 0)), 1e-4, 10_000, jump_tol=1e-8)
    assert run.max_drift <= 1e-8
    # the |grad| dt rule alone never substeps here and leaps across the turn
    plain = integrate(H, ((0, 0), (1, 0)), 1e-4, 10_000)
    assert plain.substeps == 10_000
    assert 1e-6 < plain.max_drift < 1e-5


def test_integrate_doubling_dt(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    fine = integrate(H, ((0, 0), (1, 0)), 1e-4, 10_000)
    coarse = integrate(H, ((0, 0), (1, 0)), 2e-4, 5_000)
    assert 2 <= coarse.max_drift / fine.max_drift <= 8


def test_integrate_is_level_agnostic(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    p = math.sqrt(2 * (0.8 - 1e-4))
    run = integrate(H, ((0, 0), (p, 0)), 1e-4, 5_000, jump_tol=1e-8)
    assert run.energy[0] == pytest.approx(0.8, abs=1e-12)
    assert run.max_drift <= 1e-7


def test_integrate_errors(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    with pytest.raises(ValueError):
        integrate(H, ((0, 0), (1, 0)), 0.0, 10)
    with pytest.raises(IntegrationError):
        integrate(H, ((1.0, 0), (1, 0)), 1e-4, 10)


def test_equation_of_motion_residual(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-3)
    dt = 1e-3
    run = integrate(H, ((0.1, 0.2), (0.6, 0.5)), dt, 3_000)
    uniform = np.isclose(np.diff(run.t), dt, rtol=1e-9, atol=0)
    idx = np.nonzero(uniform[:-1] & uniform[1:])[0] + 1
    assert len(idx) > 1000
    worst = 0.0
    for i in idx:
        _, g, _, _ = H.potential(run.q[i])
        acc = (run.q[i + 1] - 2 * run.q[i] + run.q[i - 1]) / dt**2
        worst = max(worst, np.linalg.norm(acc + g) / (1 + np.linalg.norm(g)))
    assert worst <= 10 * dt**2


# ------------------------------------------------------------------- orbits


def test_disk_brake_orbit(disk_orbit, frozen):
    o = disk_orbit
    assert o.max_energy_error <= 1e-6
    assert o.closure_defect <= 1e-7
    # the orbit starts at one turning point; the other is interior
    turning = np.concatenate([[o.distance[0]], o.turning_distances()])
    assert len(turning) == 2
    assert np.allclose(1 - turning, 1 - math.sqrt(2e-4), atol=1e-4)
    assert abs(o.action - 4) <= 0.05 * 4
    assert o.action == pytest.approx(frozen["disk_action"]["1e-04"], rel=1e-6)


def test_halving_dt_is_second_order(unit_disk, disk_orbit):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    drifts = []
    for dt in (1e-3, 5e-4):
        run = integrate(H, (disk_orbit.q[0], disk_orbit.p[0]), dt, int(round(disk_orbit.period / dt)),
                        substep_threshold=2 * dt)
        drifts.append(run.max_drift)
    assert 3 <= drifts[0] / drifts[1] <= 5


def test_seed_off_level_is_rejected(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    q, p = brake_seed(H, np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="off the level"):
        find_periodic_orbit(H, (q, p + np.array([math.sqrt(0.2), 0])))


def test_unknown_mode(unit_disk):
    H = build_smoothed_hamiltonian(unit_disk, 1e-4)
    with pytest.raises(ValueError):
        find_periodic_orbit(H, brake_seed(H, np.array([1.0, 0.0])), mode="bogus")


def _fake_orbit(t, p):
    t = np.asarray(t, float)
    p = np.asarray(p, float)
    zeros = np.zeros_like(p)
    return SmoothedOrbit(1e-3, float(t[-1] - t[0]), t, zeros, p, np.zeros(len(t)), np.ones(len(t)), 0.0, 0.0, "symmetric")


def test_action_trivia():
    t = np.linspace(0, 2.5, 101)
    assert action(_fake_orbit(t, np.zeros((101, 2)))) == 0
    u = np.column_stack([np.cos(t), np.sin(t)])
    assert action(_fake_orbit(t, u)) == pytest.approx(2.5, abs=1e-14)


def test_action_oracles_agree(frozen):
    for key, ref in frozen["disk_action"].items():
        assert action_oracle_disk(float(key)) == pytest.approx(ref, rel=1e-9)
    vals = [frozen["disk_action"][k] for k in ("1e-02", "1e-03", "1e-04", "1e-05")]
    assert all(a < b < 4 for a, b in zip(vals, vals[1:]))


# -------------------------------------------------------------- continuation


def test_disk_continuation(disk_continuation, frozen):
    traj, trace, orbits, _ = disk_continuation
    assert traj.k == 2 and abs(traj.length - 4) <= 0.02
    assert traj.max_residual <= 1e-4
    eps = [row[0] for row in trace]
    assert eps == list(DEFAULT_SCHEDULE)
    for e, _, A in trace:
        ref = frozen["disk_action"][f"{e:.0e}"]
        assert abs(A - ref) <= 0.01 * ref
    acts = [row[2] for row in trace]
    assert all(a < b for a, b in zip(acts, acts[1:]))
    # |A - 4| <= C sqrt(eps) with a modest constant
    C = max(abs(A - 4) / math.sqrt(e) for e, _, A in trace)
    assert C <= 10


def test_bounce_count_matches_arcs(disk_continuation):
    traj, _, orbits, _ = disk_continuation
    tr, arcs = extract_billiard(geo.disk(), orbits[-1])
    assert arcs == tr.k == traj.k


def test_equation_of_motion_on_orbit(unit_disk, disk_continuation):
    orbit = disk_continuation[2][1]  # eps = 1e-3
    H = build_smoothed_hamiltonian(unit_disk, orbit.eps)
    dt = np.diff(orbit.t)
    worst = 0.0
    for i in range(1, len(orbit.t) - 1):
        h = dt[i]
        if not math.isclose(dt[i - 1], h, rel_tol=1e-9):
            continue
        _, g, d, _ = H.potential(orbit.q[i])
        acc = (orbit.q[i + 1] - 2 * orbit.q[i] + orbit.q[i - 1]) / h**2
        worst = max(worst, np.linalg.norm(acc + g) / (1 + np.linalg.norm(g)))
    assert worst <= 10 * 1e-3**2


def test_ellipse_minor_axis_continuation(ellipse21):
    seed = default_seed(ellipse21, DEFAULT_SCHEDULE[0])
    traj, trace, _ = continue_to_billiard(ellipse21, seed, DEFAULT_SCHEDULE)
    assert traj.k == 2 and abs(traj.length - 4) <= 0.02
    assert np.allclose(np.abs(traj.points[:, 1]), 1, atol=1e-3)


def test_continuation_preconditions(unit_disk, disk_continuation):
    seed = disk_continuation[2][0]
    with pytest.raises(ValueError, match="empty"):
        continue_to_billiard(unit_disk, seed, [])
    with pytest.raises(ValueError):
        continue_to_billiard(unit_disk, seed, [1e-2, 1e-2])
    with pytest.raises(ValueError):
        continue_to_billiard(unit_disk, seed, [1e-3, 1e-4])


def test_continuation_reports_last_good_eps(unit_disk, disk_continuation):
    seed = disk_continuation[2][0]
    with pytest.raises(ContinuationError) as exc:
        # an unreachable Newton tolerance with no iterations allowed
        continue_to_billiard(unit_disk, seed, [1e-2, 1e-3], max_iter=0, tol=0.0)
    assert exc.value.last_good_eps == 1e-2


# ------------------------------------------------------------------ liouville


@pytest.mark.parametrize("fixture", ["unit_disk", "super4"])
def test_liouville_inequality(fixture, request):
    rep = liouville_check(request.getfixturevalue(fixture), 1e-3, 10_000, seed=0)
    assert rep.min_slack >= -1e-9
    assert rep.min_dhZ >= -1e-9
    assert rep.max_dZ <= 1 / 4 + 1e-9
    assert rep.min_outward > 0
    assert rep.passed


def test_liouville_superellipse_oracle(super4, frozen):
    # the oracle evaluates dH(Zbar) by differencing H itself; the two minima
    # come from different samples, so compare the guaranteed bound
    assert frozen["superellipse_liouville_min_slack"] >= -1e-9
    rep = liouville_check(super4, 1e-3, 200, seed=1)
    assert rep.min_slack >= -1e-9
    assert rep.min_slack == pytest.approx(frozen["superellipse_liouville_min_slack"], abs=0.1)


def test_liouville_at_rest(unit_disk):
    Zf = liouville_field(unit_disk)
    Q = np.array([[0.3, 0.2], [0.0, 0.0], [-0.5, 0.1]])
    Y, _, _ = geo.project_points(unit_disk, Q)
    dH, dhZ, kin = liouville_terms(1e-3, Zf, Q, np.zeros_like(Q), Y)
    assert np.all(kin == 0)
    assert np.all(dH >= 0) and np.allclose(dH, 1e-3 * dhZ)


def test_liouville_needs_star_center(peanut_domain):
    with pytest.raises(geo.GeometryError, match="star center"):
        liouville_check(peanut_domain, 1e-3, 10)


# ------------------------------------------------------------------------ io


def test_orbit_and_trace_csv(tmp_path, disk_continuation):
    _, trace, orbits, _ = disk_continuation
    write_orbit_csv(tmp_path / "o.csv", orbits[0])
    write_action_trace_csv(tmp_path / "a.csv", trace)
    rows = list(csv.reader((tmp_path / "o.csv").open()))
    assert rows[0] == ["t", "q1", "q2", "p1", "p2", "H"]
    assert len(rows) == len(orbits[0].t) + 1
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0] == ["eps", "tau", "action"] and len(rows) == 5
