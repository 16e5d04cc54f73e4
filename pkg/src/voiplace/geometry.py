"""Oriented boxes and box-versus-label-grid measurements.

Angles use the intrinsic Z-Y-X convention: the box axes are the columns of
``R = Rz(a_z) @ Ry(a_y) @ Rx(a_x)``. A world point ``p`` has box-frame
coordinates ``R.T @ (p - center)`` and lies inside when every coordinate is
within half the matching side length.

Overlap is measured on sample points: each voxel is split into ``s**3``
equal sub-cells whose centers are the samples.  Voxels that lie entirely
inside or entirely outside the box are resolved in one step from their
box-frame extent; only voxels straddling a face are sampled point by point.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from voiplace.volume import DistanceMap, Label, LabelVolume, N_LABELS

_EPS = 1e-9


def normalize_angle(a: float) -> float:
    """Map an angle in radians onto (-pi, pi]."""
    a = math.fmod(float(a), 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """Intrinsic Z-Y-X rotation; columns are the box axes in world coordinates."""
    az, ay, ax = angles
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    return rz @ ry @ rx


@dataclass(frozen=True, order=True)
class OrientedBox:
    """A VOI: center (mm), full side lengths (mm), Z-Y-X Euler angles (rad).

    Ordering is lexicographic on ``(center, lengths, angles)`` and is the
    tie-break used by the searches.
    """

    center: Tuple[float, float, float]
    lengths: Tuple[float, float, float]
    angles: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        lengths = tuple(float(v) for v in self.lengths)
        if len(lengths) != 3 or min(lengths) <= 0:
            raise ValueError(f"box side lengths must be 3 positive values, got {lengths}")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "angles", tuple(normalize_angle(a) for a in self.angles))

    @classmethod
    def from_vector(cls, theta: Sequence[float]) -> "OrientedBox":
        theta = [float(t) for t in theta]
        return cls(tuple(theta[0:3]), tuple(theta[3:6]), tuple(theta[6:9]))

    @property
    def vector(self) -> Tuple[float, ...]:
        return self.center + self.lengths + self.angles

    @property
    def volume_ml(self) -> float:
        a, b, c = self.lengths
        return a * b * c / 1000.0

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.angles)

    def to_json(self) -> dict:
        return {
            "center_mm": list(self.center),
            "lengths_mm": list(self.lengths),
            "angles_deg": [math.degrees(a) for a in self.angles],
            "convention": "intrinsic-ZYX",
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OrientedBox":
        if obj.get("convention", "intrinsic-ZYX") != "intrinsic-ZYX":
            raise ValueError(f"unsupported Euler convention {obj.get('convention')!r}")
        return cls(tuple(obj["center_mm"]), tuple(obj["lengths_mm"]),
                   tuple(math.radians(a) for a in obj["angles_deg"]))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * (np.asarray(self.lengths) / 2.0)
        return np.asarray(self.center) + local @ self.rotation.T


def contains_point(b: OrientedBox, p) -> bool:
    q = b.rotation.T @ (np.asarray(p, dtype=float) - np.asarray(b.center))
    return bool(np.all(np.abs(q) <= np.asarray(b.lengths) / 2.0))


def contains_points(b: OrientedBox, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    q = (pts - np.asarray(b.center)) @ b.rotation
    return np.all(np.abs(q) <= np.asarray(b.lengths) / 2.0, axis=1)


@dataclass(frozen=True)
class TissueOverlap:
    """Tissue content of one VOI.

    ``D`` is ``inf`` when no sample point of the box falls inside the grid.
    """

    fVOI_solid: float
    fVOI_periphery: float
    fVOI_necrosis: float
    fVOI_normal: float
    fSolid_outside: float
    V: float
    vVOI_necrosis: float
    D: float

    @property
    def empty(self) -> bool:
        return math.isinf(self.D)

    def fraction(self, term: str) -> float:
        return float(getattr(self, term))

    def to_json(self) -> dict:
        out = {k: float(getattr(self, k)) for k in self.__dataclass_fields__}
        if math.isinf(out["D"]):
            out["D"] = None
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TissueOverlap":
        vals = dict(obj)
        if vals.get("D") is None:
            vals["D"] = math.inf
        return cls(**{k: float(vals[k]) for k in cls.__dataclass_fields__})


EMPTY_OVERLAP = TissueOverlap(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, math.inf)


@lru_cache(maxsize=64)
def _subsample_offsets(spacing, s: int) -> np.ndarray:
    """World offsets of the ``s**3`` sample points relative to a voxel center."""
    ticks = [((np.arange(s) + 0.5) / s - 0.5) * sp for sp in spacing]
    gx, gy, gz = np.meshgrid(*ticks, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class _BoxVoxels:
    """Per-voxel classification of the grid voxels near a box."""

    slices: Tuple[slice, slice, slice]
    weights: np.ndarray      # sample points inside the box, per voxel in the slab
    center_inside: np.ndarray


def _box_voxels(b: OrientedBox, dims, spacing, origin, s: int) -> Optional[_BoxVoxels]:
    rot = b.rotation
    half = np.asarray(b.lengths) / 2.0
    center = np.asarray(b.center)
    sp = np.asarray(spacing)
    org = np.asarray(origin)
    ext = np.abs(rot) @ half
    lo = np.floor((center - ext - org) / sp + 0.5).astype(np.int64)
    hi = np.floor((center + ext - org) / sp + 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(dims) - 1)
    if np.any(hi < lo):
        return None
    axes = [org[a] + np.arange(lo[a], hi[a] + 1) * sp[a] - center[a] for a in range(3)]
    # box-frame coordinate q_i = sum_j R[j, i] * (p_j - c_j), built separably
    q = [
        rot[0, i] * axes[0][:, None, None] + rot[1, i] * axes[1][None, :, None]
        + rot[2, i] * axes[2][None, None, :]
        for i in range(3)
    ]
    center_inside = (np.abs(q[0]) <= half[0]) & (np.abs(q[1]) <= half[1]) & (np.abs(q[2]) <= half[2])
    slices = tuple(slice(int(lo[a]), int(hi[a]) + 1) for a in range(3))
    if s == 1:
        return _BoxVoxels(slices, center_inside.astype(np.int64), center_inside)

    # half-extent of an (axis-aligned) voxel measured along each box axis
    reach = np.abs(rot).T @ (sp / 2.0)
    full = None
    out = None
    for i in range(3):
        aq = np.abs(q[i])
        f_i = aq <= half[i] - _EPS - reach[i]
        o_i = aq > half[i] + _EPS + reach[i]
        full = f_i if full is None else full & f_i
        out = o_i if out is None else out | o_i
    weights = np.where(full, s ** 3, 0).astype(np.int64)
    partial = ~(full | out)
    if partial.any():
        qoff = _subsample_offsets(tuple(float(x) for x in spacing), s) @ rot
        inside = None
        for i in range(3):
            hit = np.abs(q[i][partial][:, None] + qoff[None, :, i]) <= half[i]
            inside = hit if inside is None else inside & hit
        weights[partial] = np.count_nonzero(inside, axis=1)
    return _BoxVoxels(slices, weights, center_inside)


def overlap(b: OrientedBox, v: LabelVolume, d: DistanceMap, supersample: int = 4) -> TissueOverlap:
    """Tissue fractions, solid/necrosis volumes and skull distance of a box.

    Fractions are class sample points inside the box over all in-grid sample
    points inside the box.  ``D`` is the smallest distance-map value over
    voxel centers inside the box; a box too thin to contain any voxel center
    falls back to the voxels holding its sample points.
    """
    if supersample < 1:
        raise ValueError(f"supersample must be a positive integer, got {supersample}")
    s = int(supersample)
    bv = _box_voxels(b, v.dims, v.spacing, v.origin, s)
    if bv is None:
        return EMPTY_OVERLAP
    w = bv.weights
    total = int(w.sum())
    if total == 0:
        return EMPTY_OVERLAP
    labels = v.labels[bv.slices]
    counts = np.bincount(labels.ravel(), weights=w.ravel(), minlength=N_LABELS)
    counts = np.rint(counts).astype(np.int64)
    dist = d.values[bv.slices]
    if bv.center_inside.any():
        D = float(dist[bv.center_inside].min())
    else:
        D = float(dist[w > 0].min())
    return _assemble(counts, total, v, s, D)


def _assemble(counts, total: int, v: LabelVolume, s: int, D: float) -> TissueOverlap:
    sample_ml = v.voxel_volume_ml / s ** 3
    solid_total = int(v.class_counts[Label.SOLID_TUMOR]) * s ** 3
    solid_in = int(counts[Label.SOLID_TUMOR])
    outside = (solid_total - solid_in) / solid_total if solid_total > 0 else 0.0
    return TissueOverlap(
        fVOI_solid=solid_in / total,
        fVOI_periphery=int(counts[Label.PERIPHERY]) / total,
        fVOI_necrosis=int(counts[Label.NECROSIS]) / total,
        fVOI_normal=int(counts[Label.NORMAL_BRAIN]) / total,
        fSolid_outside=outside,
        V=solid_in * sample_ml,
        vVOI_necrosis=int(counts[Label.NECROSIS]) * sample_ml,
        D=D,
    )


def rasterize(b: OrientedBox, grid: LabelVolume) -> np.ndarray:
    """Binary mask (uint8) of voxels whose center lies inside the box."""
    mask = np.zeros(grid.dims, dtype=np.uint8)
    bv = _box_voxels(b, grid.dims, grid.spacing, grid.origin, 1)
    if bv is not None:
        mask[bv.slices] = bv.center_inside
    return mask
