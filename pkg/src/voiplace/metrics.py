"""Per-candidate metric tables: the quantitative view the selectors reason over."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from voiplace.errors import DataError
from voiplace.geometry import OrientedBox, overlap
from voiplace.objective import PreferenceProfile, builtin_profiles, evaluate
from voiplace.search import CandidateSet
from voiplace.volume import DistanceMap, LabelVolume

FRACTIONS = ("fVOI_solid", "fSolid_outside", "fVOI_periphery", "fVOI_necrosis", "fVOI_normal")
SCORING_SUPERSAMPLE = 4


@dataclass(frozen=True)
class MetricRow:
    id: str
    provenance: str
    theta: OrientedBox
    fVOI_solid: float
    fSolid_outside: float
    fVOI_periphery: float
    fVOI_necrosis: float
    fVOI_normal: float
    vVOI_necrosis_ml: float
    voi_volume_ml: float
    solid_in_voi_ml: float
    skull_distance_mm: float
    objectives: Dict[str, float]

    def metric(self, name: str) -> float:
        if name.startswith("objective:"):
            return self.objectives[name.split(":", 1)[1]]
        return float(getattr(self, name))

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "provenance": self.provenance,
            "theta": self.theta.to_json(),
        }
        for name in FRACTIONS + ("vVOI_necrosis_ml", "voi_volume_ml", "solid_in_voi_ml"):
            out[name] = getattr(self, name)
        out["skull_distance_mm"] = None if math.isinf(self.skull_distance_mm) else self.skull_distance_mm
        out["objectives"] = dict(self.objectives)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "MetricRow":
        kw = {k: obj[k] for k in FRACTIONS + ("vVOI_necrosis_ml", "voi_volume_ml", "solid_in_voi_ml")}
        D = obj["skull_distance_mm"]
        return cls(id=obj["id"], provenance=obj["provenance"], theta=OrientedBox.from_json(obj["theta"]),
                   skull_distance_mm=math.inf if D is None else float(D),
                   objectives={k: float(v) for k, v in obj["objectives"].items()}, **kw)


@dataclass(frozen=True)
class MetricsReport:
    rows: Tuple[MetricRow, ...]
    profiles: Tuple[str, ...]
    reference_id: Optional[str] = None

    def __len__(self):
        return len(self.rows)

    def ids(self) -> List[str]:
        return [r.id for r in self.rows]

    def row(self, cid: str) -> MetricRow:
        for r in self.rows:
            if r.id == cid:
                return r
        raise KeyError(cid)

    def to_json(self) -> dict:
        return {"profiles": list(self.profiles), "reference_id": self.reference_id,
                "rows": [r.to_json() for r in self.rows]}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(tuple(MetricRow.from_json(r) for r in obj.get("rows", [])), tuple(obj.get("profiles", [])),
                   obj.get("reference_id"))


def provenance_label(prov: dict) -> str:
    if prov.get("kind") == "full":
        return f"reference:{prov.get('profile')}"
    return f"conditioned:{prov.get('profile')}:{prov.get('center_index', '-')}"


def evaluate_metrics(cset: CandidateSet, v: LabelVolume, d: DistanceMap,
                     profiles: Optional[Sequence[PreferenceProfile]] = None) -> MetricsReport:
    """One row per candidate, measured at supersample 4, objectives for every profile.

    The balanced profile is always scored so the selectors share a common scale.
    """
    if cset.volume_digest != v.digest:
        raise DataError("candidate set was generated on a different volume (content digest mismatch)")
    builtin = builtin_profiles()
    profiles = list(profiles) if profiles is not None else [builtin[n] for n in cset.profiles if n in builtin]
    if not any(p.name == "balanced" for p in profiles):
        profiles.insert(0, builtin["balanced"])
    rows = []
    for cand in cset.candidates:
        box = cand.result.theta
        ov = overlap(box, v, d, SCORING_SUPERSAMPLE)
        rows.append(MetricRow(
            id=cand.id,
            provenance=provenance_label(cand.result.provenance),
            theta=box,
            fVOI_solid=ov.fVOI_solid,
            fSolid_outside=ov.fSolid_outside,
            fVOI_periphery=ov.fVOI_periphery,
            fVOI_necrosis=ov.fVOI_necrosis,
            fVOI_normal=ov.fVOI_normal,
            vVOI_necrosis_ml=ov.vVOI_necrosis,
            voi_volume_ml=box.volume_ml,
            solid_in_voi_ml=ov.V,
            skull_distance_mm=ov.D,
            objectives={p.name: evaluate(ov, p).total for p in profiles},
        ))
    return MetricsReport(tuple(rows), tuple(p.name for p in profiles), cset.reference_id)


def csv_columns(profiles: Sequence[str]) -> List[str]:
    return (["id", "provenance"] + list(FRACTIONS)
            + ["vVOI_necrosis_ml", "voi_volume_ml", "skull_distance_mm"]
            + [f"objective_{p}" for p in profiles])


def to_csv(r: MetricsReport) -> str:
    """Compact table, fractions and volumes to 4 decimals, LF line endings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_columns(r.profiles))
    for row in r.rows:
        D = "inf" if math.isinf(row.skull_distance_mm) else f"{row.skull_distance_mm:.4f}"
        w.writerow([row.id, row.provenance] + [f"{getattr(row, f):.4f}" for f in FRACTIONS]
                   + [f"{row.vVOI_necrosis_ml:.4f}", f"{row.voi_volume_ml:.4f}", D]
                   + [f"{row.objectives[p]:.4f}" for p in r.profiles])
    return buf.getvalue()


def write_report(r: MetricsReport, fmt: str, path) -> None:
    path = Path(path)
    if fmt == "json":
        text = json.dumps(r.to_json(), indent=2, sort_keys=False) + "\n"
    elif fmt == "csv":
        text = to_csv(r)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_report(path) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return MetricsReport.from_json(obj.get("report", obj))
