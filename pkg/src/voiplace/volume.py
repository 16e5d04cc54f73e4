"""Labeled brain volumes: canonical labels, resampling, skull distance and class volumes.

Voxel ``(i, j, k)`` has its center at ``origin + (i, j, k) * spacing`` in world
millimetres; there is no rotation between the voxel and world frames.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from voiplace.errors import DataError

log = logging.getLogger(__name__)

STANDARD_SPACING = (2.0, 2.0, 2.0)
STANDARD_DIMS = (128, 128, 128)

Vec3 = Tuple[float, float, float]


class Label(enum.IntEnum):
    NON_BRAIN = 0
    NORMAL_BRAIN = 1
    PERIPHERY = 2
    SOLID_TUMOR = 3
    NECROSIS = 4


N_LABELS = len(Label)


def _vec3(values, kind=float) -> tuple:
    out = tuple(kind(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"expected 3 components, got {len(out)}")
    return out


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Immutable 3-D grid of canonical tissue labels indexed ``[x, y, z]``."""

    labels: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if labels.ndim != 3:
            raise DataError(f"label volume must be 3-D, got shape {labels.shape}")
        if labels.size and labels.max() >= N_LABELS:
            raise DataError(f"label {int(labels.max())} outside canonical range 0..{N_LABELS - 1}")
        labels.setflags(write=False)
        spacing = _vec3(self.spacing)
        if min(spacing) <= 0:
            raise DataError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _vec3(self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @property
    def voxel_volume_ml(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz / 1000.0

    @property
    def center(self) -> np.ndarray:
        """World coordinate of the middle of the field of view."""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def world_to_index(self, points) -> np.ndarray:
        """Nearest voxel index for each world point (may fall outside the grid)."""
        p = np.asarray(points, dtype=float)
        return np.floor((p - np.asarray(self.origin)) / np.asarray(self.spacing) + 0.5).astype(np.int64)

    def index_to_world(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def label_at(self, point) -> int:
        idx = self.world_to_index(point)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return int(Label.NON_BRAIN)
        return int(self.labels[tuple(idx)])

    @cached_property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=N_LABELS).astype(np.int64)

    @cached_property
    def digest(self) -> str:
        """Content hash over geometry and labels."""
        h = hashlib.sha256()
        h.update(np.asarray(self.dims, dtype="<i8").tobytes())
        h.update(np.asarray(self.spacing, dtype="<f8").tobytes())
        h.update(np.asarray(self.origin, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes(order="F"))
        return h.hexdigest()

    def same_grid(self, other: "LabelVolume") -> bool:
        return (self.dims == other.dims and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class DistanceMap:
    """Distance in mm from each voxel center to the nearest NonBrain voxel center."""

    values: np.ndarray
    spacing: Vec3
    origin: Vec3

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _vec3(self.spacing))
        object.__setattr__(self, "origin", _vec3(self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)


@dataclass(frozen=True)
class LabelMap:
    """Total mapping from raw integer codes to canonical labels."""

    codes: Mapping[int, Label] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "codes", {int(k): Label(int(v)) for k, v in self.codes.items()})

    @classmethod
    def canonical(cls) -> "LabelMap":
        return cls({int(lab): lab for lab in Label}, name="canonical")

    @classmethod
    def brats(cls) -> "LabelMap":
        """BraTS codes: 0 background, 1 necrotic core, 2 edema, 4 enhancing tumor."""
        return cls({0: Label.NON_BRAIN, 1: Label.NECROSIS, 2: Label.PERIPHERY, 4: Label.SOLID_TUMOR},
                   name="brats")

    @classmethod
    def from_json(cls, obj: Mapping) -> "LabelMap":
        names = {lab.name.lower(): lab for lab in Label}
        codes = {}
        for raw, target in obj.items():
            if isinstance(target, str):
                key = target.lower().replace("-", "_")
                if key not in names:
                    raise DataError(f"unknown canonical label {target!r}")
                codes[int(raw)] = names[key]
            else:
                codes[int(raw)] = Label(int(target))
        return cls(codes, name="custom")

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw)
        values, counts = np.unique(raw, return_counts=True)
        missing = [(int(v), int(c)) for v, c in zip(values, counts) if int(v) not in self.codes]
        if missing:
            desc = ", ".join(f"code {v} ({c} voxels)" for v, c in missing)
            raise DataError(f"raw label codes not covered by the {self.name} label map: {desc}")
        lut_lo = int(min(values.min(), 0))
        lut = np.zeros(int(values.max()) - lut_lo + 1, dtype=np.uint8)
        for code, lab in self.codes.items():
            if lut_lo <= code < lut_lo + lut.size:
                lut[code - lut_lo] = int(lab)
        return lut[raw.astype(np.int64) - lut_lo]


def resolve_label_map(spec: Union[None, str, LabelMap, Mapping]) -> LabelMap:
    if spec is None or spec == "canonical":
        return LabelMap.canonical()
    if isinstance(spec, LabelMap):
        return spec
    if spec == "brats":
        return LabelMap.brats()
    if isinstance(spec, Mapping):
        return LabelMap.from_json(spec)
    import json
    with open(spec, "r", encoding="utf-8") as fh:
        return LabelMap.from_json(json.load(fh))


def load_label_volume(path, label_map: Union[None, str, LabelMap, Mapping] = None,
                      brain_mask=None) -> LabelVolume:
    """Read a NIfTI-1 or raw+json volume and map its codes onto canonical labels.

    With the BraTS map, code-0 voxels become NormalBrain where ``brain_mask``
    (a path or boolean array on the same grid) is set and NonBrain elsewhere.
    Without a mask every code-0 voxel is NonBrain and a warning is issued.
    When a BraTS volume has no enhancing tumor, the non-enhancing region takes
    the SolidTumor role.
    """
    from voiplace import io as vio

    lmap = resolve_label_map(label_map)
    raw, spacing, origin = vio.read_raw_volume(path)
    labels = lmap.apply(raw)
    if lmap.name == "brats":
        labels = _brats_postprocess(raw, labels, spacing, origin, brain_mask)
    elif brain_mask is not None:
        mask = _load_mask(brain_mask, labels.shape)
        labels = np.where((labels == Label.NON_BRAIN) & mask, Label.NORMAL_BRAIN, labels)
    return LabelVolume(labels, spacing, origin)


def _load_mask(brain_mask, shape) -> np.ndarray:
    from voiplace import io as vio

    if isinstance(brain_mask, (str, Path)):
        mask, _, _ = vio.read_raw_volume(brain_mask)
    else:
        mask = np.asarray(brain_mask)
    if mask.shape != tuple(shape):
        raise DataError(f"brain mask shape {mask.shape} does not match volume shape {tuple(shape)}")
    return mask.astype(bool)


def _brats_postprocess(raw, labels, spacing, origin, brain_mask) -> np.ndarray:
    labels = labels.copy()
    if not np.any(raw == 4) and np.any(raw == 2):
        # no enhancing tumor: the non-enhancing region becomes the solid target
        labels[raw == 2] = Label.SOLID_TUMOR
    if brain_mask is None:
        warnings.warn("BraTS volume without a brain mask: all code-0 voxels treated as NonBrain",
                      stacklevel=3)
    else:
        mask = _load_mask(brain_mask, labels.shape)
        labels[(raw == 0) & mask] = Label.NORMAL_BRAIN
    return labels


def resample_nearest(v: LabelVolume, spacing: Sequence[float], dims: Sequence[int]) -> LabelVolume:
    """Nearest-neighbor resampling onto a grid sharing the source field-of-view center.

    Output voxels whose nearest source voxel lies outside the source grid get NonBrain.
    """
    spacing = _vec3(spacing)
    dims = _vec3(dims, int)
    if min(spacing) <= 0 or min(dims) <= 0:
        raise ValueError(f"resample targets must be positive, got spacing={spacing} dims={dims}")
    center = v.center
    new_origin = center - (np.asarray(dims) - 1) * np.asarray(spacing) / 2.0
    idx = []
    for axis in range(3):
        world = new_origin[axis] + np.arange(dims[axis]) * spacing[axis]
        frac = (world - v.origin[axis]) / v.spacing[axis]
        idx.append(np.floor(frac + 0.5).astype(np.int64))
    valid = [(i >= 0) & (i < n) for i, n in zip(idx, v.dims)]
    clipped = [np.clip(i, 0, n - 1) for i, n in zip(idx, v.dims)]
    out = v.labels[np.ix_(*clipped)].copy()
    inside = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]
    out[~inside] = Label.NON_BRAIN
    return LabelVolume(out, spacing, tuple(new_origin))


def standardize(v: LabelVolume) -> LabelVolume:
    """Resample to the working grid: 2 mm isotropic, 128 voxels per axis."""
    return resample_nearest(v, STANDARD_SPACING, STANDARD_DIMS)


def skull_distance_map(v: LabelVolume) -> DistanceMap:
    """Exact anisotropic Euclidean distance (mm) to the nearest NonBrain voxel center."""
    brain = v.labels != Label.NON_BRAIN
    if brain.all():
        raise DataError("volume has no NonBrain voxel; cannot define skull distance (malformed mask?)")
    dist = ndimage.distance_transform_edt(brain, sampling=v.spacing)
    return DistanceMap(dist, v.spacing, v.origin)


def tissue_volume(v: LabelVolume, label: Label) -> float:
    """Whole-volume extent of one class, in mL."""
    return float(v.class_counts[int(label)]) * v.voxel_volume_ml
