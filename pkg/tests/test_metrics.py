import json

import numpy as np
import pytest

from helpers import make_candidate_set
from voiplace.errors import DataError
from voiplace.geometry import OrientedBox, overlap
from voiplace.metrics import (MetricsReport, csv_columns, evaluate_metrics, read_report, to_csv, write_report)
from voiplace.objective import builtin_profiles, evaluate
from voiplace.volume import Label, tissue_volume

CUBE_COVER = OrientedBox((8.0, -6.0, 4.0), (24.0, 24.0, 24.0))


@pytest.fixture(scope="module")
def report(cube):
    v, d = cube
    boxes = [CUBE_COVER, OrientedBox((8.0, -6.0, 4.0), (20.0, 30.0, 25.0)),
             OrientedBox((2.0, -8.0, 9.0), (30.0, 14.0, 18.0), (0.3, -0.2, 0.5))]
    cs = make_candidate_set(v, d, boxes)
    return cs, evaluate_metrics(cs, v, d)


def test_exact_cover_row(report):
    r = report[1].row("c0")
    assert r.fVOI_solid == 1.0 and r.fSolid_outside == 0.0 and r.vVOI_necrosis_ml == 0.0
    assert r.provenance == "reference:balanced"


def test_volume_arithmetic(report):
    assert report[1].row("c1").voi_volume_ml == pytest.approx(15.0)


def test_rows_consistent_with_volume_and_objective(cube, report):
    v, d = cube
    cs, rep = report
    solid = tissue_volume(v, Label.SOLID_TUMOR)
    assert len(rep) == len(cs.candidates)
    assert rep.profiles == ("balanced", "large_voi")
    for row in rep.rows:
        assert abs(row.fSolid_outside - (1 - row.solid_in_voi_ml / solid)) <= 0.01
        ov = overlap(row.theta, v, d, 4)
        for name, p in builtin_profiles().items():
            assert row.objectives[name] == pytest.approx(evaluate(ov, p).total, abs=1e-9)
        for f in ("fVOI_solid", "fSolid_outside", "fVOI_periphery", "fVOI_necrosis", "fVOI_normal"):
            assert 0 <= getattr(row, f) <= 1


def test_recomputation_identical(cube, report):
    v, d = cube
    assert evaluate_metrics(report[0], v, d) == report[1]


def test_balanced_always_scored(cube, report):
    v, d = cube
    rep = evaluate_metrics(report[0], v, d, [builtin_profiles()["large_voi"]])
    assert rep.profiles == ("balanced", "large_voi")


def test_digest_mismatch(small_tumor, report):
    v, d = small_tumor
    with pytest.raises(DataError, match="digest"):
        evaluate_metrics(report[0], v, d)


def test_json_round_trip(tmp_path, report):
    rep = report[1]
    write_report(rep, "json", tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.ids() == rep.ids() and back.profiles == rep.profiles
    for a, b in zip(rep.rows, back.rows):
        assert np.allclose(a.theta.vector, b.theta.vector, atol=1e-12, rtol=0)
        assert a.to_json() == b.to_json()


def test_csv_shape_and_dialect(tmp_path, report):
    rep = report[1]
    write_report(rep, "csv", tmp_path / "r.csv")
    raw = (tmp_path / "r.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert len(lines) == len(rep) + 1
    assert lines[0].split(",") == csv_columns(rep.profiles)
    assert lines[1].startswith("c0,reference:balanced,1.0000,0.0000")


def test_empty_report(tmp_path):
    empty = MetricsReport((), ("balanced",), None)
    write_report(empty, "json", tmp_path / "e.json")
    assert json.loads((tmp_path / "e.json").read_text())["rows"] == []
    assert to_csv(empty).splitlines() == [",".join(csv_columns(("balanced",)))]
    with pytest.raises(ValueError):
        write_report(empty, "xml", tmp_path / "e.xml")
