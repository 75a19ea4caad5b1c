import csv
import math

import numpy as np
import pytest

from billiard_capacity import geometry as geo
from billiard_capacity.billiard import (
    BounceConfiguration,
    GrazingError,
    find_critical_configs,
    length_functional,
    morse_index,
    reflect,
    reflection_residual,
    simulate_billiard,
    validate,
    write_trajectory_csv,
)

S2 = math.sqrt(2) / 2


def circle(theta):
    theta = np.asarray(theta, float)
    return np.column_stack([np.cos(theta), np.sin(theta)])


def regular(k, phase=0.0):
    return circle(phase + 2 * np.pi * np.arange(k) / k)


# ------------------------------------------------------------------ reflect


def test_reflect_examples():
    assert np.allclose(reflect((1, 0), (1, 0)), (-1, 0))
    assert np.allclose(reflect((S2, S2), (0, 1)), (S2, -S2))
    with pytest.raises(GrazingError):
        reflect((1, 0), (0, 1))


def test_reflect_is_an_involutive_isometry():
    rng = np.random.default_rng(0)
    U = rng.normal(size=(100_000, 3))
    N = rng.normal(size=(100_000, 3))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    worst_inv = worst_norm = 0.0
    for u, nu in zip(U, N):
        if abs(u @ nu) <= 1e-10:
            continue
        v = reflect(u, nu)
        worst_norm = max(worst_norm, abs(np.linalg.norm(v) - 1))
        worst_inv = max(worst_inv, np.max(np.abs(reflect(v, nu) - u)))
    assert worst_norm <= 1e-14
    assert worst_inv <= 1e-14


# ------------------------------------------------------- residual, gradient


def test_residual_examples(unit_disk, frozen):
    diam = BounceConfiguration(unit_disk, [(1, 0), (-1, 0)])
    assert reflection_residual(diam, 1) == pytest.approx(0, abs=1e-15)
    tri = BounceConfiguration(unit_disk, regular(3))
    assert max(reflection_residual(tri, i) for i in range(3)) <= 1e-15
    skew = BounceConfiguration(unit_disk, [(1, 0), (0, 1)])
    for i, ref in enumerate(frozen["disk_two_bounce_residual"]):
        assert reflection_residual(skew, i) == pytest.approx(ref, abs=1e-12)
    assert min(frozen["disk_two_bounce_residual"]) > 0


def test_length_functional_examples(unit_disk):
    L, g = length_functional(BounceConfiguration(unit_disk, [(1, 0), (-1, 0)]))
    assert L == pytest.approx(4, abs=1e-15) and np.max(np.abs(g)) <= 1e-15
    L, g = length_functional(BounceConfiguration(unit_disk, regular(3)))
    assert L == pytest.approx(3 * math.sqrt(3), abs=1e-12) and np.max(np.abs(g)) <= 1e-12


def test_gradient_of_perturbed_diameter(unit_disk, frozen):
    theta = np.array([0.1, np.pi])
    _, g = length_functional(BounceConfiguration(unit_disk, circle(theta)))
    tangents = np.column_stack([-np.sin(theta), np.cos(theta)])
    dtheta = np.einsum("ij,ij->i", g, tangents)
    ref = np.array(frozen["disk_perturbed_diameter_gradient"])
    assert np.max(np.abs(dtheta - ref) / np.abs(ref)) <= 1e-5


def test_gradient_matches_finite_differences(ellipse21):
    # boundary chart of the ellipse: theta -> (2 cos, sin); dL/dtheta = g . x'(theta)
    rng = np.random.default_rng(4)
    h = 1e-6
    point = lambda t: np.column_stack([2 * np.cos(t), np.sin(t)])
    length = lambda t: float(np.sum(np.linalg.norm(point(t) - np.roll(point(t), 1, axis=0), axis=1)))
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        theta = np.sort(rng.uniform(0, 2 * np.pi, k))
        cfg = BounceConfiguration(ellipse21, point(theta), check=False)
        if np.min(np.linalg.norm(cfg.points - np.roll(cfg.points, 1, axis=0), axis=1)) < 1e-2:
            continue
        _, g = length_functional(cfg)
        dx = np.column_stack([-2 * np.sin(theta), np.cos(theta)])
        analytic = np.einsum("ij,ij->i", g, dx)
        fd = np.array([(length(theta + h * e) - length(theta - h * e)) / (2 * h) for e in np.eye(k)])
        assert np.max(np.abs(analytic - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))


def _critical_and_random_configs(rng, count):
    disk = geo.disk()
    ell = geo.ellipse(2.0, 1.0)
    out = []
    for j in range(count):
        kind = j % 4
        if kind == 0:
            out.append(BounceConfiguration(disk, regular(int(rng.integers(2, 7)), rng.uniform(0, 2 * np.pi))))
        elif kind == 1:
            axis = [(2, 0), (-2, 0)] if rng.random() < 0.5 else [(0, 1), (0, -1)]
            out.append(BounceConfiguration(ell, axis))
        else:
            dom = disk if kind == 2 else ell
            k = int(rng.integers(2, 6))
            theta = np.sort(rng.uniform(0, 2 * np.pi, k))
            X = circle(theta) * (1 if kind == 2 else np.array([2.0, 1.0]))
            out.append(BounceConfiguration(dom, X, check=False))
    return out


def test_reflection_law_iff_critical():
    rng = np.random.default_rng(5)
    agree = critical = 0
    for cfg in _critical_and_random_configs(rng, 1000):
        res = np.array([reflection_residual(cfg, i) for i in range(cfg.k)])
        _, g = length_functional(cfg)
        law = bool(np.all(res <= 1e-10))
        crit = bool(np.all(np.linalg.norm(g, axis=1) <= 1e-10))
        assert law == crit
        agree += 1
        critical += crit
    assert agree == 1000 and 400 <= critical <= 600


def test_configuration_invariants(unit_disk):
    with pytest.raises(ValueError):
        BounceConfiguration(unit_disk, [(1, 0), (1, 0)])
    with pytest.raises(ValueError):
        BounceConfiguration(unit_disk, [(0.5, 0), (-1, 0)])
    with pytest.raises(ValueError):
        BounceConfiguration(unit_disk, [(1, 0)])


# ----------------------------------------------------------------- validate


def test_validate_flags():
    tr = validate(BounceConfiguration(geo.disk(), [(1, 0), (-1, 0)]))
    assert tr.valid and tr.length == pytest.approx(4, abs=1e-15)
    skew = validate(BounceConfiguration(geo.disk(), [(1, 0), (0, 1)]))
    assert not skew.valid
    # the chord between the lobes of the peanut leaves the closure
    pea = geo.peanut()
    Y = geo.project_points(pea, np.array([[1.5, 0.0], [-1.5, 0.0]]))[0]
    tr = validate(BounceConfiguration(pea, Y))
    assert tr.max_residual <= 1e-8
    assert not tr.chord_contained.all() and not tr.valid


# ------------------------------------------------------------------- search


def test_search_examples(unit_disk, ellipse21):
    two = find_critical_configs(unit_disk, 2, 64, seed=0)
    assert len(two) == 1 and two[0].length == pytest.approx(4, abs=1e-9)
    three = find_critical_configs(unit_disk, 3, 128, seed=0)
    assert any(abs(t.length - 3 * math.sqrt(3)) <= 1e-9 for t in three)
    lengths = sorted(t.length for t in find_critical_configs(ellipse21, 2, 128, seed=0))
    assert np.allclose(lengths, [4, 8], atol=1e-9)


@pytest.mark.parametrize("fixture", ["unit_disk", "ellipse21", "super4"])
def test_returned_trajectories_validate(fixture, request):
    dom = request.getfixturevalue(fixture)
    for k in (2, 3):
        for tr in find_critical_configs(dom, k, 48, seed=1):
            again = validate(tr.config)
            assert again.valid
            assert np.max(tr.residuals) <= 1e-8
            chords = np.linalg.norm(tr.points - np.roll(tr.points, 1, axis=0), axis=1)
            assert abs(tr.length - chords.sum()) <= 1e-12


@pytest.mark.parametrize("fixture", ["unit_disk", "ellipse21", "super4"])
def test_bracket_witness_exists(fixture, request):
    dom = request.getfixturevalue(fixture)
    r = geo.inradius(dom).r
    lo, hi = 2 * r - 1e-6, 2 * (dom.n + 1) * r + 1e-6
    found = [t for k in (2, 3) for t in find_critical_configs(dom, k, 64, seed=0)]
    assert any(lo <= t.length <= hi for t in found)


def test_morse_index(unit_disk, ellipse21, frozen):
    diam = validate(BounceConfiguration(unit_disk, [(1, 0), (-1, 0)]))
    _, null = morse_index(diam)
    assert null >= 1
    major = validate(BounceConfiguration(ellipse21, [(2, 0), (-2, 0)]))
    minor = validate(BounceConfiguration(ellipse21, [(0, 1), (0, -1)]))
    assert list(morse_index(major)) == frozen["ellipse_major_morse"]
    assert list(morse_index(minor)) == frozen["ellipse_minor_morse"]


# ---------------------------------------------------------------- simulator


def test_simulate_examples(unit_disk, ellipse21):
    path = simulate_billiard(unit_disk, (0, 0), (1, 0), 4)
    assert not path.grazed
    assert np.allclose(path.points, [(0, 0), (1, 0), (-1, 0), (1, 0), (-1, 0)], atol=1e-10)
    path = simulate_billiard(unit_disk, (0, 0), (math.cos(math.pi / 3), math.sin(math.pi / 3)), 3)
    hits = path.points[1:]
    assert np.allclose(np.linalg.norm(hits, axis=1), 1, atol=1e-10)
    chords = np.linalg.norm(np.diff(hits, axis=0), axis=1)
    assert np.allclose(chords, chords[0], atol=1e-9)
    path = simulate_billiard(ellipse21, (0, 0), (0, 1), 4)
    assert np.allclose(path.points[1:], [(0, 1), (0, -1), (0, 1), (0, -1)], atol=1e-10)


def test_simulate_keeps_angle_in_disk():
    # chord angle is conserved in a circle
    path = simulate_billiard(geo.disk(), (0.3, 0.1), (0.6, 0.8), 30)
    hits = path.points[1:]
    chords = np.linalg.norm(np.diff(hits, axis=0), axis=1)
    assert np.allclose(chords, chords[0], atol=1e-8)


def test_simulate_rejects_boundary_start(unit_disk):
    with pytest.raises(ValueError):
        simulate_billiard(unit_disk, (1, 0), (1, 0), 2)


def test_trajectory_csv(tmp_path, unit_disk):
    tr = validate(BounceConfiguration(unit_disk, [(1, 0), (-1, 0)]))
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, [tr])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["trajectory", "bounce", "x1", "x2", "residual"]
    assert [r[:4] for r in rows[1:]] == [["0", "0", "1", "0"], ["0", "1", "-1", "0"]]
