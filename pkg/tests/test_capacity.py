import csv
import json
import math

import numpy as np
import pytest

from billiard_capacity import geometry as geo
from billiard_capacity.capacity import (
    SCHEMA,
    CapacityBracket,
    capacity_bracket,
    report,
    write_candidates_csv,
)
from billiard_capacity.contraction import certify


@pytest.fixture(scope="module")
def disk_bracket(unit_disk):
    return capacity_bracket(unit_disk, starts=128, seed=0)


def test_disk_bracket(disk_bracket):
    b = disk_bracket
    assert b.lower == pytest.approx(2, abs=1e-6) and b.upper == pytest.approx(6, abs=1e-6)
    assert b.upper / b.lower == b.n + 1
    lengths = sorted(c.length for c in b.in_bracket)
    assert any(abs(L - 4) <= 1e-9 for L in lengths)
    assert any(abs(L - 3 * math.sqrt(3)) <= 1e-9 for L in lengths)
    assert b.witness and not b.warnings
    assert all(c.bounces <= b.n + 1 for c in b.candidates)


def test_ellipse_bracket_excludes_major_axis(ellipse21):
    b = capacity_bracket(ellipse21, starts=128, seed=0)
    assert b.lower == pytest.approx(2, abs=1e-6) and b.upper == pytest.approx(6, abs=1e-6)
    inside = [c for c in b.in_bracket if c.bounces == 2]
    assert [round(c.length, 6) for c in inside] == [4.0]
    assert any(abs(c.length - 8) <= 1e-6 and c.bounces == 2 for c in b.excluded)
    assert all(c.length > b.upper for c in b.excluded)


def test_superellipse_bracket(super4, frozen):
    b = capacity_bracket(super4, starts=64, seed=0)
    r_ref = frozen["superellipse_inradius"]["r"]
    assert b.lower == pytest.approx(2 * r_ref, abs=2e-4)
    assert b.upper == pytest.approx(6 * r_ref, abs=6e-4)
    assert min(abs(c.length - 4) for c in b.in_bracket) <= 1e-4


def test_candidate_lengths_match_chords(disk_bracket):
    for c in disk_bracket.candidates:
        P = np.array(c.points)
        chords = np.linalg.norm(P - np.roll(P, 1, axis=0), axis=1).sum()
        assert abs(c.length - chords) <= 1e-12
        assert c.max_residual <= 1e-8


def test_report_sections(disk_bracket):
    rep = report(disk_bracket)
    assert rep["schema"] == SCHEMA
    assert "certificate" not in rep and "certificate_passed" not in rep
    assert rep["bracket"] == {"lower": disk_bracket.lower, "upper": disk_bracket.upper}
    assert rep["witness"] is True
    assert "budgets" in rep and rep["budgets"]["tol_reflect"] == 1e-8
    json.dumps(rep)  # serializable


def test_report_with_certificate(disk_bracket, unit_disk):
    cert = certify(unit_disk, 7.0, (12, 12, 3), multiplicity_samples=500)
    rep = report(disk_bracket, cert)
    assert rep["certificate_passed"] is True
    assert rep["certificate"]["b"] == 7.0
    assert rep["certificate"]["passed"] is True


def test_warning_passes_through():
    msg = "no candidate trajectory was found; the search may be incomplete"
    b = CapacityBracket("box", 2, 1.0, (0.0, 0.0), 2.0, 6.0, warnings=[msg])
    rep = report(b)
    assert rep["warnings"] == [msg] and rep["witness"] is False


def test_missing_witness_is_flagged_not_raised(unit_disk, monkeypatch):
    import billiard_capacity.capacity as cap

    monkeypatch.setattr(cap, "find_critical_configs", lambda *a, **k: [])
    b = cap.capacity_bracket(unit_disk, starts=4)
    assert not b.witness and len(b.warnings) == 1
    assert report(b)["warnings"] == b.warnings


def test_smoothed_cross_check(unit_disk):
    b = capacity_bracket(unit_disk, starts=32, seed=0, k_max=2, smoothed=True)
    assert len(b.cross_checks) == 1
    cc = b.cross_checks[0]
    assert cc["agree"] and cc["difference"] <= 0.02
    assert any(c.provenance == "smoothed-limit" for c in b.candidates)


def test_candidates_csv(tmp_path, disk_bracket):
    path = tmp_path / "c.csv"
    write_candidates_csv(path, disk_bracket)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["id", "length", "bounces", "provenance", "in_bracket", "max_residual"]
    assert len(rows) == len(disk_bracket.candidates) + 1
    assert rows[1][0].startswith("variational-k2")


def test_three_dimensional_bracket():
    b = capacity_bracket(geo.from_expression("x^2 + y^2 + z^2 - 1", [-1.2] * 3, [1.2] * 3), starts=32, seed=0)
    assert b.n == 3
    assert b.lower == pytest.approx(2, abs=1e-6) and b.upper == pytest.approx(8, abs=1e-5)
    assert b.witness
