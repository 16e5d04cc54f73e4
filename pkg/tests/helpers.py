"""Shared fixture builders for the test modules."""

import numpy as np

from voiplace.geometry import OrientedBox
from voiplace.phantom import generate_phantom, random_suite
from voiplace.volume import skull_distance_map


def random_box(rng, center, spread=8.0, lmin=12.0, lmax=50.0):
    c = np.asarray(center) + rng.normal(0.0, spread, 3)
    return OrientedBox(tuple(c), tuple(rng.uniform(lmin, lmax, 3)), tuple(rng.uniform(-np.pi, np.pi, 3)))


def random_box_pairs(n=20, seed=11):
    """Seeded (box, volume, distance) triples over the random phantom suite."""
    rng = np.random.default_rng(seed)
    specs = random_suite(n)
    out = []
    for spec in specs:
        v = generate_phantom(spec)
        out.append((random_box(rng, spec.tumor_center), v, skull_distance_map(v)))
    return out


def forty_ml_spec():
    """Solid box of 40 x 50 x 20 mm (5000 voxels = 40 mL) with faces on voxel boundaries."""
    from voiplace.phantom import PhantomSpec

    return PhantomSpec(brain_radius=80.0, tumor_center=(0.0, 1.0, 0.0), tumor_radii=(20.0, 25.0, 10.0),
                       tumor_shape="box")


def make_candidate_set(v, d, boxes, profile_names=("balanced", "large_voi")):
    """Hand-built candidate set: first box is the reference, the rest conditioned."""
    from voiplace.geometry import overlap
    from voiplace.objective import builtin_profiles, evaluate
    from voiplace.search import Candidate, CandidateSet, PlacementResult, grid_descriptor, sample_centers

    bal = builtin_profiles()["balanced"]
    cands = []
    for i, b in enumerate(boxes):
        ov = overlap(b, v, d, 4)
        prov = {"kind": "full", "profile": "balanced"} if i == 0 else \
            {"kind": "conditioned", "profile": "balanced", "center_index": i - 1}
        res = PlacementResult(b, evaluate(ov, bal), ov, prov, 1, b, 0.0)
        cands.append(Candidate(f"c{i}", res))
    return CandidateSet(tuple(cands), "c0", sample_centers(v), tuple(profile_names), v.digest, grid_descriptor(v))


def make_row(cid, theta=None, balanced=0.5, **metrics):
    """Metric row with neutral defaults, for selector fixtures."""
    from voiplace.geometry import OrientedBox
    from voiplace.metrics import MetricRow

    base = dict(fVOI_solid=0.5, fSolid_outside=0.5, fVOI_periphery=0.1, fVOI_necrosis=0.1, fVOI_normal=0.3,
                vVOI_necrosis_ml=0.5, voi_volume_ml=10.0, solid_in_voi_ml=5.0, skull_distance_mm=20.0)
    base.update(metrics)
    theta = theta or OrientedBox((0.0, 0.0, float(cid[1:]) if cid[1:].isdigit() else 0.0), (20, 20, 20))
    prov = "reference:balanced" if cid == "c0" else "conditioned:balanced:0"
    return MetricRow(id=cid, provenance=prov, theta=theta, objectives={"balanced": balanced, "large_voi": 0.2},
                     **base)


def make_report(rows):
    from voiplace.metrics import MetricsReport

    return MetricsReport(tuple(rows), ("balanced", "large_voi"), "c0")
