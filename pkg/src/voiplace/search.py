"""Coarse-to-fine discrete search for VOI placements.

Both searches (free 9-D and center-conditioned 6-D) run the same pipeline:

1. Axis-aligned coarse grid: every center on the coarse lattice combined with
   every side-length triple from ``length_grid``, scored from summed-area
   tables over the supersampled label grid.
2. Angle grid: the ``angle_seeds`` best axis-aligned boxes are re-scored at
   every combination of the coarse angles.
3. Pattern search from the best coarse box: try +/- the current step on each
   free parameter, move to the best improving neighbor, halve the steps on
   failure, stop once no move helps at minimum step sizes.

Equal scores always resolve to the lexicographically smallest parameter vector.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from voiplace.errors import NoSolidTumorError
from voiplace.geometry import OrientedBox, TissueOverlap, overlap
from voiplace.objective import (ObjectiveBreakdown, PreferenceProfile, TERMS, builtin_profiles, evaluate,
                                total_array)
from voiplace.volume import DistanceMap, Label, LabelVolume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    len_min: float = 10.0
    len_max: float = 50.0
    center_step: float = 8.0
    length_grid: Tuple[float, ...] = (16.0, 24.0, 32.0, 40.0)
    angle_grid_deg: Tuple[float, ...] = (-30.0, -15.0, 0.0, 15.0, 30.0)
    angle_limit_deg: float = 45.0
    angle_seeds: int = 3
    length_step: float = 8.0
    angle_step_deg: float = 15.0
    shrink: float = 0.5
    min_center_step: float = 1.0
    min_length_step: float = 1.0
    min_angle_step_deg: float = 2.0
    max_passes: int = 200
    coarse_supersample: int = 2
    refine_supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        steps = (self.center_step, self.length_step, self.angle_step_deg, self.min_center_step,
                 self.min_length_step, self.min_angle_step_deg)
        if min(steps) <= 0:
            raise ValueError("search steps must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        if not 0 < self.len_min < self.len_max:
            raise ValueError("length bounds must satisfy 0 < len_min < len_max")
        if min(self.coarse_supersample, self.refine_supersample, self.angle_seeds, self.max_passes) < 1:
            raise ValueError("supersample factors, seeds and passes must be >= 1")
        object.__setattr__(self, "length_grid", tuple(
            float(x) for x in self.length_grid if self.len_min <= x <= self.len_max))
        if not self.length_grid:
            raise ValueError("length grid has no value inside the length bounds")
        object.__setattr__(self, "angle_grid_deg", tuple(float(a) for a in self.angle_grid_deg))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SearchConfig":
        kw = dict(obj)
        for key in ("length_grid", "angle_grid_deg"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class PlacementResult:
    theta: OrientedBox
    breakdown: ObjectiveBreakdown
    overlap: TissueOverlap
    provenance: Dict
    evaluations: int
    coarse_theta: OrientedBox
    coarse_total: float

    @property
    def total(self) -> float:
        return self.breakdown.total

    def to_json(self) -> dict:
        return {
            "theta": self.theta.to_json(),
            "objective": self.breakdown.to_json(),
            "overlap": self.overlap.to_json(),
            "provenance": dict(self.provenance),
            "evaluations": self.evaluations,
            "coarse": {"theta": self.coarse_theta.to_json(), "total": self.coarse_total},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlacementResult":
        return cls(OrientedBox.from_json(obj["theta"]), ObjectiveBreakdown.from_json(obj["objective"]),
                   TissueOverlap.from_json(obj["overlap"]), dict(obj["provenance"]), int(obj["evaluations"]),
                   OrientedBox.from_json(obj["coarse"]["theta"]), float(obj["coarse"]["total"]))


def _solid_indices(v: LabelVolume) -> np.ndarray:
    solid = np.argwhere(v.labels == Label.SOLID_TUMOR)
    if solid.size == 0:
        raise NoSolidTumorError("volume contains no SolidTumor voxel; segmentation unusable for placement")
    return solid


def center_bounds(v: LabelVolume, cfg: SearchConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Solid-tumor bounding box (voxel centers) grown by half the maximum side length."""
    solid = _solid_indices(v)
    lo = v.index_to_world(solid.min(axis=0)) - cfg.len_max / 2.0
    hi = v.index_to_world(solid.max(axis=0)) + cfg.len_max / 2.0
    return lo, hi


class _AxisAlignedScorer:
    """Summed-area tables over a supersampled crop of the label grid."""

    _CLASSES = (("fVOI_solid", Label.SOLID_TUMOR), ("fVOI_periphery", Label.PERIPHERY),
                ("fVOI_necrosis", Label.NECROSIS), ("fVOI_normal", Label.NORMAL_BRAIN))

    def __init__(self, v: LabelVolume, d: DistanceMap, lo_world, hi_world, s: int):
        self.v, self.d, self.s = v, d, s
        sp = np.asarray(v.spacing)
        i0 = np.clip(np.floor((np.asarray(lo_world) - v.origin) / sp + 0.5).astype(int) - 1, 0, None)
        i1 = np.minimum(np.floor((np.asarray(hi_world) - v.origin) / sp + 0.5).astype(int) + 2,
                        np.asarray(v.dims))
        self.i0, self.i1 = i0, i1
        sub = v.labels[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]]
        offs = [((np.arange(s) + 0.5) / s - 0.5) * sp[a] for a in range(3)]
        self.fine = [(v.origin[a] + np.arange(i0[a], i1[a])[:, None] * sp[a] + offs[a][None, :]).ravel()
                     for a in range(3)]
        self.vox = [v.axis_coords(a) for a in range(3)]
        up = sub.repeat(s, 0).repeat(s, 1).repeat(s, 2)
        self.tables = {}
        for name, lab in self._CLASSES:
            t = np.zeros(tuple(n + 1 for n in up.shape), dtype=np.int32)
            t[1:, 1:, 1:] = (up == lab).cumsum(0, dtype=np.int32).cumsum(1).cumsum(2)
            self.tables[name] = t
        self.sample_ml = v.voxel_volume_ml / s ** 3
        self.solid_total = int(v.class_counts[Label.SOLID_TUMOR]) * s ** 3

    def best(self, centers: Sequence[np.ndarray], lengths: Sequence[float], p: PreferenceProfile,
             k: int) -> List[Tuple[float, Tuple[float, ...]]]:
        """Top ``k`` ``(score, (cx, cy, cz, Lx, Ly, Lz))`` over the center lattice x length triples."""
        lengths = np.asarray(lengths, dtype=float)
        fr_idx = {}
        vx_idx = {}
        for a in range(3):
            for L in lengths:
                c = centers[a]
                fr_idx[a, L] = (np.searchsorted(self.fine[a], c - L / 2, "left"),
                                np.searchsorted(self.fine[a], c + L / 2, "right"))
                vx_idx[a, L] = (np.searchsorted(self.vox[a], c - L / 2, "left"),
                                np.searchsorted(self.vox[a], c + L / 2, "right"))
        scored = []
        for Lx, Ly, Lz in itertools.product(lengths, repeat=3):
            (lx, hx), (ly, hy), (lz, hz) = fr_idx[0, Lx], fr_idx[1, Ly], fr_idx[2, Lz]
            ix = np.ix_
            cnt = {}
            for name, t in self.tables.items():
                cnt[name] = (t[ix(hx, hy, hz)] - t[ix(lx, hy, hz)] - t[ix(hx, ly, hz)] - t[ix(hx, hy, lz)]
                             + t[ix(lx, ly, hz)] + t[ix(lx, hy, lz)] + t[ix(hx, ly, lz)]
                             - t[ix(lx, ly, lz)]).astype(np.int64)
            n = (hx - lx)[:, None, None] * (hy - ly)[None, :, None] * (hz - lz)[None, None, :]
            safe = np.maximum(n, 1)
            fr = {name: c / safe for name, c in cnt.items()}
            if self.solid_total:
                fr["fSolid_outside"] = (self.solid_total - cnt["fVOI_solid"]) / self.solid_total
            else:
                fr["fSolid_outside"] = np.zeros(n.shape)
            V = cnt["fVOI_solid"] * self.sample_ml
            ub = np.where(n > 0, total_array(fr, V, np.full(n.shape, 1e300), p), 0.0)
            scored.append(((Lx, Ly, Lz), fr, V, ub))

        # branch and bound: the skull factor never exceeds 1
        ubs = np.stack([e[3] for e in scored])                   # (n_lengths, cx, cy, cz)
        li, jx, jy, jz = np.nonzero(ubs > 0)
        Ls = np.asarray([e[0] for e in scored])
        cx, cy, cz = centers[0][jx], centers[1][jy], centers[2][jz]
        order = np.lexsort((Ls[li, 2], Ls[li, 1], Ls[li, 0], cz, cy, cx, -ubs[li, jx, jy, jz]))
        flat = [(-float(ubs[li[o], jx[o], jy[o], jz[o]]), int(li[o]), (int(jx[o]), int(jy[o]), int(jz[o])))
                for o in order[:4096]]
        found: List[Tuple[float, Tuple[float, ...]]] = []
        for neg_ub, li, j in flat:
            if len(found) >= k and -neg_ub < found[k - 1][0]:
                break
            Ls, fr, V, _ = scored[li]
            sl = []
            for a in range(3):
                lo, hi = vx_idx[a, Ls[a]]
                sl.append(slice(int(lo[j[a]]), int(hi[j[a]])))
            if any(x.stop <= x.start for x in sl):
                D = math.inf
            else:
                D = float(self.d.values[tuple(sl)].min())
            score = float(total_array({t: np.asarray(fr[t][j]) for t in TERMS}, np.asarray(V[j]),
                                      np.asarray(D), p))
            found.append((score, self._key(Ls, j, centers)))
            found.sort(key=lambda e: (-e[0], e[1]))
        return found[:k]

    @staticmethod
    def _key(Ls, j, centers) -> Tuple[float, ...]:
        return (float(centers[0][j[0]]), float(centers[1][j[1]]), float(centers[2][j[2]]),
                float(Ls[0]), float(Ls[1]), float(Ls[2]))


class _Evaluator:
    """Memoized objective over parameter vectors at a fixed supersample."""

    def __init__(self, v: LabelVolume, d: DistanceMap, p: PreferenceProfile, s: int):
        self.v, self.d, self.p, self.s = v, d, p, s
        self.cache: Dict[Tuple[float, ...], Tuple[float, TissueOverlap, ObjectiveBreakdown]] = {}

    def __call__(self, x: Tuple[float, ...]) -> float:
        return self.full(x)[0]

    def full(self, x: Tuple[float, ...]):
        hit = self.cache.get(x)
        if hit is None:
            box = OrientedBox.from_vector(x)
            ov = overlap(box, self.v, self.d, self.s)
            br = evaluate(ov, self.p)
            hit = (br.total, ov, br)
            self.cache[x] = hit
        return hit


def pattern_search(f: Callable[[Tuple[float, ...]], float], x0: Sequence[float], free: Sequence[int],
                   steps: Sequence[float], min_steps: Sequence[float], lower: Sequence[float],
                   upper: Sequence[float], shrink: float = 0.5, max_passes: int = 200):
    """Maximize ``f`` by coordinate-wise +/- step moves with step shrinking on failure.

    Returns ``(x, fx)``.  Each pass moves to the best strictly improving
    neighbor (ties to the lexicographically smaller vector).
    """
    x = tuple(float(t) for t in x0)
    fx = f(x)
    steps = [float(s) for s in steps]
    for _ in range(max_passes):
        best_x, best_f = None, fx
        for i in free:
            for sign in (-1.0, 1.0):
                xi = min(max(x[i] + sign * steps[i], lower[i]), upper[i])
                if xi == x[i]:
                    continue
                y = x[:i] + (xi,) + x[i + 1:]
                fy = f(y)
                if fy > best_f or (best_x is not None and fy == best_f and y < best_x):
                    best_x, best_f = y, fy
        if best_x is not None and best_f > fx:
            x, fx = best_x, best_f
            continue
        if all(steps[i] <= min_steps[i] for i in free):
            break
        steps = [max(s * shrink, m) for s, m in zip(steps, min_steps)]
    return x, fx


def _lattice(lo: float, hi: float, anchor: float, step: float) -> np.ndarray:
    k0 = math.ceil((lo - anchor) / step - 1e-9)
    k1 = math.floor((hi - anchor) / step + 1e-9)
    return anchor + np.arange(k0, k1 + 1) * step


def _run(v: LabelVolume, d: DistanceMap, p: PreferenceProfile, cfg: SearchConfig,
         centers: Sequence[np.ndarray], free: Sequence[int], lower, upper,
         seeds: Sequence[OrientedBox], provenance: Dict) -> PlacementResult:
    reach = cfg.len_max / 2.0
    lo_w = np.array([c.min() for c in centers]) - reach
    hi_w = np.array([c.max() for c in centers]) + reach
    scorer = _AxisAlignedScorer(v, d, lo_w, hi_w, cfg.coarse_supersample)
    aligned = scorer.best(centers, cfg.length_grid, p, cfg.angle_seeds)
    n_eval = int(np.prod([len(c) for c in centers])) * len(cfg.length_grid) ** 3

    coarse = _Evaluator(v, d, p, cfg.coarse_supersample)
    angles = [math.radians(a) for a in cfg.angle_grid_deg
              if abs(a) <= cfg.angle_limit_deg + 1e-9]
    candidates = []
    for _, key in aligned:
        for ang in itertools.product(angles, repeat=3):
            x = tuple(key) + tuple(ang)
            candidates.append((coarse(x), x))
    n_eval += len(coarse.cache)
    candidates.sort(key=lambda e: (-e[0], e[1]))
    if not candidates:
        raise NoSolidTumorError("coarse search produced no candidate box")

    fine = _Evaluator(v, d, p, cfg.refine_supersample)
    start = candidates[0][1]
    starts = [start] + [s.vector for s in seeds]
    start = max(starts, key=lambda x: (fine(x), tuple(-t for t in x)))
    coarse_theta = OrientedBox.from_vector(candidates[0][1])
    coarse_total = fine(candidates[0][1])

    steps = [cfg.center_step / 2] * 3 + [cfg.length_step / 2] * 3 + [math.radians(cfg.angle_step_deg) / 2] * 3
    mins = [cfg.min_center_step] * 3 + [cfg.min_length_step] * 3 + [math.radians(cfg.min_angle_step_deg)] * 3
    x, fx = pattern_search(fine, start, free, steps, mins, lower, upper, cfg.shrink, cfg.max_passes)
    total, ov, br = fine.full(x)
    n_eval += len(fine.cache)
    return PlacementResult(OrientedBox.from_vector(x), br, ov, dict(provenance, profile=p.name), n_eval,
                           coarse_theta, coarse_total)


def _bounds(center_lo, center_hi, cfg: SearchConfig):
    lim = math.radians(cfg.angle_limit_deg)
    lower = list(center_lo) + [cfg.len_min] * 3 + [-lim] * 3
    upper = list(center_hi) + [cfg.len_max] * 3 + [lim] * 3
    return lower, upper


def search_full(v: LabelVolume, d: DistanceMap, p: PreferenceProfile,
                cfg: SearchConfig = SearchConfig()) -> PlacementResult:
    """Best 9-parameter box found by the coarse-to-fine search."""
    lo, hi = center_bounds(v, cfg)
    solid = _solid_indices(v)
    mid = v.index_to_world((solid.min(axis=0) + solid.max(axis=0)) / 2.0)
    centers = [_lattice(lo[a], hi[a], mid[a], cfg.center_step) for a in range(3)]
    lower, upper = _bounds(lo, hi, cfg)
    return _run(v, d, p, cfg, centers, range(9), lower, upper, (), {"kind": "full"})


def search_conditioned(v: LabelVolume, d: DistanceMap, p: PreferenceProfile, center,
                       cfg: SearchConfig = SearchConfig(), seeds: Sequence[OrientedBox] = (),
                       center_index: Optional[int] = None) -> PlacementResult:
    """Best side lengths and angles for a box pinned at ``center``.

    ``seeds`` are extra starting shapes (their centers are replaced by
    ``center``); a seed taken from a full-search result guarantees the
    conditioned optimum at that result's center is no worse.
    """
    _solid_indices(v)
    c = tuple(float(x) for x in center)
    centers = [np.array([c[a]]) for a in range(3)]
    lower, upper = _bounds(c, c, cfg)
    pinned = [OrientedBox(c, s.lengths, s.angles) for s in seeds]
    prov = {"kind": "conditioned"}
    if center_index is not None:
        prov["center_index"] = int(center_index)
    return _run(v, d, p, cfg, centers, range(3, 9), lower, upper, pinned, prov)


def lattice_spacing(interval_ml: float) -> float:
    """Cubic lattice pitch (mm) that gives each point ``interval_ml`` of volume."""
    return (1000.0 * interval_ml) ** (1.0 / 3.0)


def _lattice_hits(v: LabelVolume, solid: np.ndarray, anchor: np.ndarray, pitch: float) -> np.ndarray:
    lo = v.index_to_world(solid.min(axis=0)) - np.asarray(v.spacing)
    hi = v.index_to_world(solid.max(axis=0)) + np.asarray(v.spacing)
    axes = [_lattice(lo[a], hi[a], anchor[a], pitch) for a in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    idx = v.world_to_index(grid)
    ok = np.all((idx >= 0) & (idx < np.asarray(v.dims)), axis=1)
    grid, idx = grid[ok], idx[ok]
    keep = v.labels[idx[:, 0], idx[:, 1], idx[:, 2]] == Label.SOLID_TUMOR
    return grid[keep]


@dataclass(frozen=True)
class CenterSample:
    centers: Tuple[Tuple[float, float, float], ...]
    interval_ml: float
    effective_interval_ml: float
    pitch_mm: float
    initial_count: int
    adaptations: int


ADAPT_GROWTH = 1.05


def sample_centers(v: LabelVolume, interval_ml: float = 0.5, cap: int = 50) -> CenterSample:
    """Lattice points inside the solid tumor, at most ``cap`` of them.

    The lattice is anchored at the solid-tumor centroid.  While more than
    ``cap`` points land in solid tumor, the interval grows: first to
    ``solid volume / cap``, then in steps of 5 %, so the final count sits
    just under the cap instead of overshooting on lattice aliasing.
    """
    if interval_ml <= 0 or cap < 1:
        raise ValueError("interval must be > 0 and cap >= 1")
    solid = _solid_indices(v)
    anchor = v.index_to_world(solid.mean(axis=0))
    solid_ml = len(solid) * v.voxel_volume_ml
    interval = float(interval_ml)
    pts = _lattice_hits(v, solid, anchor, lattice_spacing(interval))
    initial = len(pts)
    adaptations = 0
    while len(pts) > cap:
        grown = solid_ml / cap if adaptations == 0 else interval * ADAPT_GROWTH
        interval = max(grown, interval * (1.0 + 1e-6))
        pts = _lattice_hits(v, solid, anchor, lattice_spacing(interval))
        adaptations += 1
    if len(pts) == 0:
        # centroid outside the solid region (non-convex tumor): use the nearest solid voxel
        world = v.index_to_world(solid)
        pts = world[[int(np.argmin(np.linalg.norm(world - anchor, axis=1)))]]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]
    return CenterSample(tuple(tuple(float(c) for c in p) for p in pts), float(interval_ml), interval,
                        lattice_spacing(interval), initial, adaptations)


@dataclass(frozen=True)
class Candidate:
    id: str
    result: PlacementResult

    def to_json(self) -> dict:
        return {"id": self.id, **self.result.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "Candidate":
        return cls(obj["id"], PlacementResult.from_json(obj))


@dataclass(frozen=True)
class CandidateSet:
    candidates: Tuple[Candidate, ...]
    reference_id: str
    sampling: CenterSample
    profiles: Tuple[str, ...]
    volume_digest: str
    grid: Dict

    def by_id(self, cid: str) -> Candidate:
        for c in self.candidates:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def ids(self) -> List[str]:
        return [c.id for c in self.candidates]

    def to_json(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "profiles": list(self.profiles),
            "volume_digest": self.volume_digest,
            "grid": self.grid,
            "sampling": asdict(self.sampling),
            "candidates": [c.to_json() for c in self.candidates],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateSet":
        smp = dict(obj["sampling"])
        smp["centers"] = tuple(tuple(c) for c in smp["centers"])
        return cls(tuple(Candidate.from_json(c) for c in obj["candidates"]), obj["reference_id"],
                   CenterSample(**smp), tuple(obj["profiles"]), obj["volume_digest"], dict(obj["grid"]))


def grid_descriptor(v: LabelVolume) -> Dict:
    return {"dims": list(v.dims), "spacing_mm": list(v.spacing), "origin_mm": list(v.origin)}


def same_theta(a: OrientedBox, b: OrientedBox, mm: float = 0.1, deg: float = 0.1) -> bool:
    rad = math.radians(deg)
    return (max(abs(x - y) for x, y in zip(a.center, b.center)) <= mm
            and max(abs(x - y) for x, y in zip(a.lengths, b.lengths)) <= mm
            and max(abs(math.remainder(x - y, 2 * math.pi)) for x, y in zip(a.angles, b.angles)) <= rad)


def generate_candidates(v: LabelVolume, d: DistanceMap, profiles: Optional[Sequence[PreferenceProfile]] = None,
                        cfg: SearchConfig = SearchConfig(), interval_ml: float = 0.5, cap: int = 50,
                        threads: int = 1, reference_profile: Optional[PreferenceProfile] = None) -> CandidateSet:
    """Reference full-search placement plus one conditioned placement per (profile, sampled center).

    Conditioned searches are warm-started with the reference shape.  Results
    are assembled in (profile, center) order whatever the thread count, and
    near-identical boxes are collapsed onto the first occurrence.
    """
    builtin = builtin_profiles()
    if profiles is None:
        profiles = [builtin["balanced"], builtin["large_voi"]]
    ref_profile = reference_profile or builtin["balanced"]
    reference = search_full(v, d, ref_profile, cfg)
    sample = sample_centers(v, interval_ml, cap)
    jobs = [(p, i, c) for p in profiles for i, c in enumerate(sample.centers)]

    def run(job):
        p, i, c = job
        return search_conditioned(v, d, p, c, cfg, seeds=(reference.theta,), center_index=i)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    kept: List[PlacementResult] = []
    for r in [reference] + results:
        if not any(same_theta(r.theta, k.theta) for k in kept):
            kept.append(r)
    cands = tuple(Candidate(f"c{i}", r) for i, r in enumerate(kept))
    return CandidateSet(cands, "c0", sample, tuple(p.name for p in profiles), v.digest, grid_descriptor(v))
