"""Synthetic tumor phantoms and brute-force oracles used by tests and benchmarks.

Phantom grids are centered on world zero.  A phantom is a brain sphere holding
a tumor (ellipsoid, or an oriented box in box-tumor mode), an optional
concentric necrotic core and an optional periphery shell grown outward from
the tumor surface.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from voiplace.errors import DataError, NoSolidTumorError
from voiplace.geometry import OrientedBox, TissueOverlap, contains_points, overlap, rotation_matrix
from voiplace.objective import PreferenceProfile, TERMS, evaluate, total_array
from voiplace.volume import DistanceMap, Label, LabelVolume, N_LABELS, skull_distance_map

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class PhantomSpec:
    brain_center: Vec3 = (0.0, 0.0, 0.0)
    brain_radius: float = 70.0
    tumor_center: Vec3 = (0.0, 0.0, 0.0)
    tumor_radii: Vec3 = (15.0, 12.0, 10.0)
    tumor_angles: Vec3 = (0.0, 0.0, 0.0)
    tumor_shape: str = "ellipsoid"          # "ellipsoid" or "box"; box radii are half side lengths
    core_radii: Optional[Vec3] = None
    shell_mm: Optional[float] = None
    dims: Tuple[int, int, int] = (128, 128, 128)
    spacing: Vec3 = (2.0, 2.0, 2.0)
    seed: int = 0

    def validate(self) -> None:
        if self.tumor_shape not in ("ellipsoid", "box"):
            raise DataError(f"unknown tumor shape {self.tumor_shape!r}")
        if min(self.dims) <= 0 or min(self.spacing) <= 0 or self.brain_radius <= 0:
            raise DataError("phantom grid and brain radius must be positive")
        if min(self.tumor_radii) <= 0:
            raise DataError("tumor radii must be positive")
        if self.core_radii is not None and any(c >= t for c, t in zip(self.core_radii, self.tumor_radii)):
            raise DataError("necrotic core radii must be smaller than tumor radii")
        if self.shell_mm is not None and self.shell_mm < 0:
            raise DataError("periphery shell thickness must be non-negative")
        reach = (math.sqrt(3) if self.tumor_shape == "box" else 1.0) * max(self.tumor_radii)
        reach += self.shell_mm or 0.0
        offset = np.linalg.norm(np.subtract(self.tumor_center, self.brain_center))
        if offset + reach > self.brain_radius:
            raise DataError("tumor (with periphery shell) must lie inside the brain sphere")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomSpec":
        kw = dict(obj)
        for key in ("brain_center", "tumor_center", "tumor_radii", "tumor_angles", "spacing"):
            if key in kw:
                kw[key] = tuple(float(x) for x in kw[key])
        if "dims" in kw:
            kw["dims"] = tuple(int(x) for x in kw["dims"])
        if kw.get("core_radii") is not None:
            kw["core_radii"] = tuple(float(x) for x in kw["core_radii"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise DataError(f"invalid phantom spec: {exc}") from exc


def grid_origin(dims, spacing) -> Vec3:
    return tuple(-(n - 1) * s / 2.0 for n, s in zip(dims, spacing))


def _local(spec: PhantomSpec, origin):
    axes = [origin[a] + np.arange(spec.dims[a]) * spec.spacing[a] - spec.tumor_center[a] for a in range(3)]
    rot = rotation_matrix(spec.tumor_angles)
    return [rot[0, i] * axes[0][:, None, None] + rot[1, i] * axes[1][None, :, None]
            + rot[2, i] * axes[2][None, None, :] for i in range(3)]


def _inside(q, radii, shape) -> np.ndarray:
    if shape == "box":
        return (np.abs(q[0]) <= radii[0]) & (np.abs(q[1]) <= radii[1]) & (np.abs(q[2]) <= radii[2])
    return (q[0] / radii[0]) ** 2 + (q[1] / radii[1]) ** 2 + (q[2] / radii[2]) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> LabelVolume:
    spec.validate()
    origin = grid_origin(spec.dims, spec.spacing)
    axes = [origin[a] + np.arange(spec.dims[a]) * spec.spacing[a] - spec.brain_center[a] for a in range(3)]
    r2 = axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2
    labels = np.where(r2 <= spec.brain_radius ** 2, Label.NORMAL_BRAIN, Label.NON_BRAIN).astype(np.uint8)
    q = _local(spec, origin)
    tumor = _inside(q, spec.tumor_radii, spec.tumor_shape)
    if spec.shell_mm:
        dist = ndimage.distance_transform_edt(~tumor, sampling=spec.spacing)
        labels[(dist <= spec.shell_mm) & ~tumor] = Label.PERIPHERY
    labels[tumor] = Label.SOLID_TUMOR
    if spec.core_radii is not None:
        labels[_inside(q, spec.core_radii, spec.tumor_shape)] = Label.NECROSIS
    return LabelVolume(labels, spec.spacing, origin)


def cube_phantom_spec() -> PhantomSpec:
    """24 mm solid cube (faces on voxel boundaries) inside a large brain sphere."""
    return PhantomSpec(brain_radius=80.0, tumor_center=(8.0, -6.0, 4.0), tumor_radii=(12.0, 12.0, 12.0),
                       tumor_shape="box")


def random_suite(n: int = 20, seed: int = 2024, dims=(128, 128, 128), spacing=(2.0, 2.0, 2.0)) -> List[PhantomSpec]:
    """Seeded ellipsoid tumors with random size, pose, necrotic core and periphery."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        radii = tuple(float(r) for r in np.round(rng.uniform(9.0, 20.0, 3), 1))
        angles = tuple(float(a) for a in np.round(rng.uniform(-math.pi / 2, math.pi / 2, 3), 3))
        core = None
        if rng.random() < 0.6:
            frac = rng.uniform(0.3, 0.6)
            core = tuple(round(r * frac, 1) for r in radii)
        shell = float(round(rng.uniform(3.0, 8.0), 1)) if rng.random() < 0.75 else None
        room = 72.0 - max(radii) - (shell or 0.0) - 4.0
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = tuple(float(c) for c in np.round(direction * rng.uniform(0.0, room), 1))
        specs.append(PhantomSpec(brain_radius=72.0, tumor_center=center, tumor_radii=radii,
                                 tumor_angles=angles, core_radii=core, shell_mm=shell,
                                 dims=tuple(dims), spacing=tuple(spacing), seed=seed * 1000 + i))
    return specs


def box_tumor_suite(n: int = 10, seed: int = 7) -> List[PhantomSpec]:
    """Axis-aligned box tumors with faces on voxel boundaries (2 mm grid)."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        half = tuple(float(v) for v in rng.integers(8, 15, 3))     # half-lengths, even-mm sides
        shell = float(rng.choice([0.0, 4.0, 6.0]))
        # voxel centers sit at odd world coordinates, boundaries at even ones
        center = tuple(float(2 * c + h % 2) for c, h in zip(rng.integers(-10, 10, 3), half))
        specs.append(PhantomSpec(brain_radius=80.0, tumor_center=center, tumor_radii=half,
                                 tumor_shape="box", shell_mm=shell or None, seed=seed * 1000 + i))
    return specs


def spec_with_center(spec: PhantomSpec, center) -> PhantomSpec:
    kw = asdict(spec)
    kw["tumor_center"] = tuple(center)
    return PhantomSpec.from_json(kw)


@dataclass(frozen=True)
class OracleGrid:
    """Enumeration lattice of the brute-force axis-aligned oracle."""

    lengths: Optional[Tuple[float, ...]] = None
    """Side lengths to enumerate.  Default: multiples of the voxel pitch from
    ``len_min`` up to the solid extent plus twice ``margin`` (capped at ``len_max``)."""
    len_min: float = 10.0
    len_max: float = 50.0
    center_step: Optional[float] = None     # default: half the voxel spacing
    margin: float = 4.0                     # center region = solid bounding box grown by this
    supersample: int = 4
    max_evaluations: int = 2.0e8


@dataclass
class OracleResult:
    theta: OrientedBox
    overlap: TissueOverlap
    total: float
    evaluations: int


def _default_lengths(v: LabelVolume, solid: np.ndarray, grid: OracleGrid) -> Tuple[float, ...]:
    pitch = float(min(v.spacing))
    extent = float(np.max((solid.max(axis=0) - solid.min(axis=0) + 1) * np.asarray(v.spacing)))
    top = min(grid.len_max, extent + 2 * grid.margin)
    first = math.ceil(grid.len_min / pitch - 1e-9) * pitch
    return tuple(float(x) for x in np.arange(first, top + 1e-9, pitch))


def brute_force_best_axis_aligned(v: LabelVolume, p: PreferenceProfile, grid: OracleGrid = OracleGrid(),
                                  d: Optional[DistanceMap] = None) -> OracleResult:
    """Exhaustive argmax of the objective over an axis-aligned box lattice.

    Counts come from 3-D cumulative sums over the supersampled label grid, so
    every lattice box is scored exactly at ``grid.supersample``.  Equal
    scores resolve to the lexicographically smallest box.
    """
    solid = np.argwhere(v.labels == Label.SOLID_TUMOR)
    if solid.size == 0:
        raise NoSolidTumorError("volume contains no SolidTumor voxel")
    if d is None:
        d = skull_distance_map(v)
    s = grid.supersample
    sp = np.asarray(v.spacing)
    step = grid.center_step or float(min(sp)) / 2.0
    lo_w = v.index_to_world(solid.min(axis=0)) - grid.margin
    hi_w = v.index_to_world(solid.max(axis=0)) + grid.margin
    centers = [np.arange(lo_w[a], hi_w[a] + 1e-9, step) for a in range(3)]
    lengths = np.asarray(grid.lengths if grid.lengths is not None else _default_lengths(v, solid, grid), dtype=float)
    n_eval = int(np.prod([len(c) for c in centers])) * len(lengths) ** 3
    if n_eval > grid.max_evaluations:
        raise DataError(f"oracle instance too large: {n_eval} boxes > {int(grid.max_evaluations)}")

    # fine sample coordinates along each axis over the whole grid
    fine = [(v.origin[a] + np.repeat(np.arange(v.dims[a]), s) * sp[a]
             + np.tile(((np.arange(s) + 0.5) / s - 0.5) * sp[a], v.dims[a])) for a in range(3)]
    vox = [v.axis_coords(a) for a in range(3)]
    half_max = lengths.max() / 2.0
    crop = []
    for a in range(3):
        i0 = max(int(np.searchsorted(vox[a], lo_w[a] - half_max - sp[a])), 0)
        i1 = min(int(np.searchsorted(vox[a], hi_w[a] + half_max + sp[a])) + 1, v.dims[a])
        crop.append((i0, i1))
    sub = v.labels[crop[0][0]:crop[0][1], crop[1][0]:crop[1][1], crop[2][0]:crop[2][1]]
    fine = [fine[a][crop[a][0] * s:crop[a][1] * s] for a in range(3)]
    labels_f = sub.repeat(s, 0).repeat(s, 1).repeat(s, 2)
    classes = {"solid": Label.SOLID_TUMOR, "periphery": Label.PERIPHERY,
               "necrosis": Label.NECROSIS, "normal": Label.NORMAL_BRAIN}
    tables = {}
    for key, lab in classes.items():
        t = np.zeros(tuple(n + 1 for n in labels_f.shape), dtype=np.int32)
        t[1:, 1:, 1:] = (labels_f == lab).cumsum(0, dtype=np.int32).cumsum(1).cumsum(2)
        tables[key] = t
    del labels_f

    sample_ml = v.voxel_volume_ml / s ** 3
    solid_total = int(v.class_counts[Label.SOLID_TUMOR]) * s ** 3

    def bounds(a, L, coords):
        c = centers[a]
        return (np.searchsorted(coords, c - L / 2.0, "left"), np.searchsorted(coords, c + L / 2.0, "right"))

    ranges = {(a, L): bounds(a, L, fine[a]) for a in range(3) for L in lengths}
    vranges = {(a, L): bounds(a, L, vox[a]) for a in range(3) for L in lengths}

    def skull_min(idx, Ls):
        sl = []
        for a in range(3):
            lo, hi = vranges[(a, Ls[a])]
            sl.append(slice(int(lo[idx[a]]), int(hi[idx[a]])))
        if any(x.stop <= x.start for x in sl):
            return math.inf
        return float(d.values[tuple(sl)].min())

    best_score, best_key = -1.0, None
    for Lx in lengths:
        lx, hx = ranges[(0, Lx)]
        # inclusion-exclusion applied one axis at a time
        sx = {k: t[hx] - t[lx] for k, t in tables.items()}
        for Ly in lengths:
            ly, hy = ranges[(1, Ly)]
            sxy = {k: a[:, hy] - a[:, ly] for k, a in sx.items()}
            for Lz in lengths:
                lz, hz = ranges[(2, Lz)]
                cnt = {k: (a[:, :, hz] - a[:, :, lz]).astype(np.int64) for k, a in sxy.items()}
                total = ((hx - lx)[:, None, None] * (hy - ly)[None, :, None] * (hz - lz)[None, None, :])
                safe = np.maximum(total, 1)
                fr = {"fVOI_solid": cnt["solid"] / safe, "fVOI_periphery": cnt["periphery"] / safe,
                      "fVOI_necrosis": cnt["necrosis"] / safe, "fVOI_normal": cnt["normal"] / safe,
                      "fSolid_outside": ((solid_total - cnt["solid"]) / solid_total) if solid_total
                      else np.zeros(total.shape)}
                V = cnt["solid"] * sample_ml
                no_skull = total_array(fr, V, np.full(total.shape, 1e300), p)
                no_skull = np.where(total > 0, no_skull, 0.0)
                # skull factor <= 1: only boxes that could beat the incumbent need their distance
                hopeful = np.argwhere(no_skull >= best_score)
                if hopeful.size == 0:
                    continue
                order = np.argsort(-no_skull[tuple(hopeful.T)], kind="stable")
                for idx in hopeful[order]:
                    ub = no_skull[tuple(idx)]
                    if ub < best_score:
                        break
                    D = skull_min(idx, (Lx, Ly, Lz))
                    score = float(total_array({k: np.asarray(fr[k][tuple(idx)]) for k in TERMS},
                                              np.asarray(V[tuple(idx)]), np.asarray(D), p))
                    key = (centers[0][idx[0]], centers[1][idx[1]], centers[2][idx[2]], Lx, Ly, Lz)
                    if score > best_score or (score == best_score and best_key is not None and key < best_key):
                        best_score, best_key = score, key
    box = OrientedBox(best_key[:3], best_key[3:6], (0.0, 0.0, 0.0))
    ov = overlap(box, v, d, supersample=s)
    return OracleResult(box, ov, evaluate(ov, p).total, n_eval)


@dataclass(frozen=True)
class MonteCarloOverlap:
    overlap: TissueOverlap
    stderr: dict
    n: int


def monte_carlo_overlap(b: OrientedBox, v: LabelVolume, n: int = 1_000_000, seed: int = 0,
                        per_solid_voxel: int = 64, d: Optional[DistanceMap] = None) -> MonteCarloOverlap:
    """Uniform-sampling estimate of a box's tissue content.

    Fractions classify uniform points inside the box by the voxel containing
    them (points off the grid are discarded).  ``fSolid_outside`` jitters
    ``per_solid_voxel`` uniform points inside every solid voxel and counts the
    ones outside the box.  ``D`` is filled only when a distance map is given,
    by testing every voxel center of the grid against the box.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    local = (rng.random((n, 3)) - 0.5) * np.asarray(b.lengths)
    pts = np.asarray(b.center) + local @ b.rotation.T
    idx = np.floor((pts - np.asarray(v.origin)) / np.asarray(v.spacing) + 0.5).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(v.dims)), axis=1)
    labels = v.labels[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    m = int(ok.sum())
    counts = np.bincount(labels, minlength=N_LABELS)

    solid = np.argwhere(v.labels == Label.SOLID_TUMOR)
    outside = 0.0
    n_solid = 0
    if len(solid):
        centers = v.index_to_world(solid)
        jitter = (rng.random((len(solid), per_solid_voxel, 3)) - 0.5) * np.asarray(v.spacing)
        sp = (centers[:, None, :] + jitter).reshape(-1, 3)
        q = (sp - np.asarray(b.center)) @ b.rotation
        inside = np.all(np.abs(q) <= np.asarray(b.lengths) / 2.0, axis=1)
        n_solid = inside.size
        outside = 1.0 - inside.mean()

    D = math.inf
    if d is not None:
        grids = np.meshgrid(*[v.axis_coords(a) for a in range(3)], indexing="ij")
        inside = contains_points(b, np.stack([g.ravel() for g in grids], axis=1))
        if inside.any():
            D = float(d.values.ravel()[inside].min())
    if m == 0:
        frac = dict.fromkeys(["fVOI_solid", "fVOI_periphery", "fVOI_necrosis", "fVOI_normal"], 0.0)
        in_grid_ml = 0.0
    else:
        frac = {"fVOI_solid": counts[Label.SOLID_TUMOR] / m, "fVOI_periphery": counts[Label.PERIPHERY] / m,
                "fVOI_necrosis": counts[Label.NECROSIS] / m, "fVOI_normal": counts[Label.NORMAL_BRAIN] / m}
        in_grid_ml = b.volume_ml * m / n
    ov = TissueOverlap(fVOI_solid=float(frac["fVOI_solid"]), fVOI_periphery=float(frac["fVOI_periphery"]),
                       fVOI_necrosis=float(frac["fVOI_necrosis"]), fVOI_normal=float(frac["fVOI_normal"]),
                       fSolid_outside=float(outside), V=float(frac["fVOI_solid"]) * in_grid_ml,
                       vVOI_necrosis=float(frac["fVOI_necrosis"]) * in_grid_ml, D=D)
    se = {k: math.sqrt(max(f * (1 - f), 0.0) / max(m, 1)) for k, f in frac.items()}
    se["fSolid_outside"] = math.sqrt(outside * (1 - outside) / max(n_solid, 1))
    return MonteCarloOverlap(ov, se, n)
