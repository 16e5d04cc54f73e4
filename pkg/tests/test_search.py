import json
import math

import numpy as np
import pytest

from helpers import forty_ml_spec
from voiplace.errors import NoSolidTumorError
from voiplace.geometry import OrientedBox, overlap
from voiplace.objective import builtin_profiles, evaluate
from voiplace.phantom import PhantomSpec, generate_phantom
from voiplace.search import (CandidateSet, SearchConfig, center_bounds, generate_candidates, lattice_spacing,
                             pattern_search, same_theta, sample_centers, search_conditioned, search_full)
from voiplace.volume import Label, LabelVolume, skull_distance_map

BAL = builtin_profiles()["balanced"]
LV = builtin_profiles()["large_voi"]


@pytest.fixture(scope="module")
def cube_full(cube):
    v, d = cube
    return search_full(v, d, BAL)


@pytest.fixture(scope="module")
def big_solid():
    v = generate_phantom(forty_ml_spec())
    return v, skull_distance_map(v)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(shrink=1.5)
    with pytest.raises(ValueError):
        SearchConfig(center_step=0)
    with pytest.raises(ValueError):
        SearchConfig(len_min=60)
    cfg = SearchConfig(len_min=20, len_max=35)
    assert cfg.length_grid == (24.0, 32.0)
    assert SearchConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_pattern_search_finds_quadratic_optimum():
    f = lambda x: -((x[0] - 1.3) ** 2 + (x[1] + 0.6) ** 2)
    x, fx = pattern_search(f, (0.0, 0.0), [0, 1], [1.0, 1.0], [0.01, 0.01], [-5, -5], [5, 5])
    assert abs(x[0] - 1.3) <= 0.01 and abs(x[1] + 0.6) <= 0.01


def test_pattern_search_respects_bounds_and_frozen_axes():
    f = lambda x: x[0] + x[1]
    x, _ = pattern_search(f, (0.0, 0.0), [0], [1.0, 1.0], [0.1, 0.1], [-1, -1], [2, 2])
    assert x == (2.0, 0.0)


def test_cube_full_search_covers_cube(cube, cube_full):
    r = cube_full
    assert r.overlap.fVOI_solid >= 0.90 and r.overlap.fSolid_outside <= 0.10
    assert r.total >= r.coarse_total
    v, d = cube
    assert evaluate(overlap(r.theta, v, d, 4), BAL).total == pytest.approx(r.total, abs=1e-9)


def test_result_respects_bounds(small_tumor):
    v, d = small_tumor
    cfg = SearchConfig()
    for p in (BAL, LV):
        r = search_full(v, d, p, cfg)
        assert all(cfg.len_min <= L <= cfg.len_max for L in r.theta.lengths)
        lo, hi = center_bounds(v, cfg)
        assert np.all(np.asarray(r.theta.center) >= lo - 1e-9) and np.all(np.asarray(r.theta.center) <= hi + 1e-9)
        assert all(abs(a) <= math.radians(cfg.angle_limit_deg) + 1e-12 for a in r.theta.angles)
        assert r.total >= r.coarse_total
        assert r.provenance == {"kind": "full", "profile": p.name}


def test_no_solid_tumor_errors():
    labels = np.full((20, 20, 20), Label.NORMAL_BRAIN, np.uint8)
    labels[0] = Label.NON_BRAIN
    v = LabelVolume(labels, (2, 2, 2))
    d = skull_distance_map(v)
    with pytest.raises(NoSolidTumorError):
        search_full(v, d, BAL)
    with pytest.raises(NoSolidTumorError):
        search_conditioned(v, d, BAL, (0, 0, 0))
    with pytest.raises(NoSolidTumorError):
        sample_centers(v)


def test_conditioned_at_full_optimum(cube, cube_full):
    v, d = cube
    r = search_conditioned(v, d, BAL, cube_full.theta.center, seeds=(cube_full.theta,))
    assert r.total >= cube_full.total - 1e-9
    assert abs(r.total - cube_full.total) <= 1e-9


def test_conditioned_at_corner_is_worse(cube, cube_full):
    v, d = cube
    corner = (8.0 - 11.0, -6.0 - 11.0, 4.0 - 11.0)        # a voxel center in the cube's corner voxel
    assert v.label_at(corner) == Label.SOLID_TUMOR
    r = search_conditioned(v, d, BAL, corner)
    assert r.overlap.fVOI_solid < cube_full.overlap.fVOI_solid
    assert r.theta.center == corner
    assert r.provenance["kind"] == "conditioned"


def test_search_is_deterministic(small_tumor):
    v, d = small_tumor
    a = search_conditioned(v, d, LV, (4.0, -2.0, 6.0), center_index=3)
    b = search_conditioned(v, d, LV, (4.0, -2.0, 6.0), center_index=3)
    assert a == b
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


def test_lattice_spacing():
    assert lattice_spacing(0.5) == pytest.approx(7.937, abs=1e-3)
    assert lattice_spacing(0.8) == pytest.approx(9.283, abs=1e-3)


def test_sample_centers_single_voxel():
    labels = np.full((20, 20, 20), Label.NORMAL_BRAIN, np.uint8)
    labels[7, 11, 5] = Label.SOLID_TUMOR
    v = LabelVolume(labels, (2, 2, 2), (-3, 1, 4))
    s = sample_centers(v, 0.5, 50)
    assert s.centers == (tuple(v.index_to_world((7, 11, 5))),)


def test_sample_centers_adapts_on_large_tumor(big_solid):
    v, _ = big_solid
    solid_ml = v.class_counts[Label.SOLID_TUMOR] * v.voxel_volume_ml
    assert solid_ml == pytest.approx(40.0, abs=1e-9)
    s = sample_centers(v, 0.5, 50)
    assert s.initial_count > 50
    assert len(s.centers) <= 50
    assert s.effective_interval_ml >= 0.8
    assert s.pitch_mm == pytest.approx(lattice_spacing(s.effective_interval_ml))
    assert list(s.centers) == sorted(s.centers)
    assert all(v.label_at(c) == Label.SOLID_TUMOR for c in s.centers)


def test_sample_centers_without_adaptation(small_tumor):
    v, _ = small_tumor
    s = sample_centers(v, 0.5, 50)
    assert s.adaptations == 0 and s.effective_interval_ml == 0.5
    assert len(s.centers) == s.initial_count >= 1


def test_sample_centers_rejects_bad_args(small_tumor):
    with pytest.raises(ValueError):
        sample_centers(small_tumor[0], 0.0)
    with pytest.raises(ValueError):
        sample_centers(small_tumor[0], 0.5, 0)


def test_same_theta_tolerances():
    a = OrientedBox((0, 0, 0), (20, 20, 20), (0, 0, 0))
    assert same_theta(a, OrientedBox((0.05, 0, 0), (20.09, 20, 20), (math.radians(0.09), 0, 0)))
    assert not same_theta(a, OrientedBox((0.2, 0, 0), (20, 20, 20)))
    # angles compare on the circle
    assert same_theta(OrientedBox((0, 0, 0), (1, 1, 1), (math.pi, 0, 0)),
                      OrientedBox((0, 0, 0), (1, 1, 1), (-math.pi + 1e-4, 0, 0)))


def test_candidates_cube_counting_bound(cube):
    v, d = cube
    cs = generate_candidates(v, d, cap=10)
    assert len(cs.sampling.centers) <= 10
    assert len(cs.candidates) <= 1 + 2 * len(cs.sampling.centers)
    assert cs.ids() == [f"c{i}" for i in range(len(cs.candidates))]
    ref = cs.by_id(cs.reference_id).result
    assert ref.provenance["kind"] == "full" and ref.provenance["profile"] == "balanced"
    for c in cs.candidates[1:]:
        if c.result.provenance["profile"] == "balanced":
            assert ref.total >= c.result.total - 1e-12


def test_candidates_no_duplicates_and_thread_invariance(small_tumor):
    v, d = small_tumor
    a = generate_candidates(v, d, cap=4, threads=1)
    b = generate_candidates(v, d, cap=4, threads=4)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    thetas = [c.result.theta for c in a.candidates]
    for i in range(len(thetas)):
        for j in range(i):
            assert not same_theta(thetas[i], thetas[j])
    back = CandidateSet.from_json(json.loads(json.dumps(a.to_json())))
    assert back == a


def test_large_voi_candidates_are_larger(big_solid):
    v, d = big_solid
    cs = generate_candidates(v, d, cap=6)
    vols = {"balanced": [], "large_voi": []}
    for c in cs.candidates:
        if c.result.provenance["kind"] == "conditioned":
            vols[c.result.provenance["profile"]].append(c.result.theta.volume_ml)
    assert vols["balanced"] and vols["large_voi"]
    assert np.mean(vols["large_voi"]) > np.mean(vols["balanced"])
