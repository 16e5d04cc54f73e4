"""Suite benchmark: full-search placement per profile over a phantom suite, summarized as mean ± SD."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from voiplace.geometry import overlap
from voiplace.metrics import SCORING_SUPERSAMPLE
from voiplace.objective import PreferenceProfile, evaluate
from voiplace.phantom import PhantomSpec, box_tumor_suite, cube_phantom_spec, generate_phantom, random_suite
from voiplace.search import SearchConfig, search_full
from voiplace.volume import skull_distance_map

log = logging.getLogger(__name__)

BENCH_METRICS = ("voi_volume_ml", "fVOI_solid", "fSolid_outside", "fVOI_periphery", "fVOI_necrosis",
                 "fVOI_normal", "vVOI_necrosis_ml", "objective")

SUITES = {
    "default": lambda: random_suite(),
    "box": lambda: box_tumor_suite(),
    "cube": lambda: [cube_phantom_spec()],
}


@dataclass(frozen=True)
class CaseResult:
    case: int
    profile: str
    values: Dict[str, float]


def suite_specs(name: str, n_cases: int = 0) -> List[PhantomSpec]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; known: {', '.join(SUITES)}")
    specs = SUITES[name]()
    return specs[:n_cases] if n_cases else specs


def run_case(i: int, spec: PhantomSpec, profiles: Sequence[PreferenceProfile],
             cfg: SearchConfig) -> List[CaseResult]:
    v = generate_phantom(spec)
    d = skull_distance_map(v)
    out = []
    for p in profiles:
        res = search_full(v, d, p, cfg)
        ov = overlap(res.theta, v, d, SCORING_SUPERSAMPLE)
        vals = {"voi_volume_ml": res.theta.volume_ml, "fVOI_solid": ov.fVOI_solid,
                "fSolid_outside": ov.fSolid_outside, "fVOI_periphery": ov.fVOI_periphery,
                "fVOI_necrosis": ov.fVOI_necrosis, "fVOI_normal": ov.fVOI_normal,
                "vVOI_necrosis_ml": ov.vVOI_necrosis, "objective": evaluate(ov, p).total}
        out.append(CaseResult(i, p.name, vals))
    log.info("case %d done", i)
    return out


def run_suite(specs: Sequence[PhantomSpec], profiles: Sequence[PreferenceProfile],
              cfg: SearchConfig = SearchConfig(), threads: int = 1) -> List[CaseResult]:
    jobs = list(enumerate(specs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda j: run_case(j[0], j[1], profiles, cfg), jobs))
    else:
        parts = [run_case(i, s, profiles, cfg) for i, s in jobs]
    return [r for part in parts for r in part]


def summarize(results: Sequence[CaseResult], profiles: Sequence[str]) -> Dict[str, Dict[str, tuple]]:
    """profile -> metric -> (mean, sample SD, n)."""
    table: Dict[str, Dict[str, tuple]] = {}
    for p in profiles:
        rows = [r.values for r in results if r.profile == p]
        table[p] = {}
        for m in BENCH_METRICS:
            x = np.array([r[m] for r in rows], dtype=float)
            sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
            table[p][m] = (float(x.mean()), sd, len(x))
    return table


def summary_csv(table: Dict[str, Dict[str, tuple]]) -> str:
    """One row per profile; each metric rendered as ``mean ± SD`` plus numeric columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["profile", "n"]
    for m in BENCH_METRICS:
        head += [m, f"{m}_mean", f"{m}_sd"]
    w.writerow(head)
    for p, metrics in table.items():
        n = next(iter(metrics.values()))[2]
        row = [p, n]
        for m in BENCH_METRICS:
            mean, sd, _ = metrics[m]
            row += [f"{mean:.2f} ± {sd:.2f}", f"{mean:.6f}", f"{sd:.6f}"]
        w.writerow(row)
    return buf.getvalue()


def per_case_csv(results: Sequence[CaseResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "profile"] + list(BENCH_METRICS))
    for r in results:
        w.writerow([r.case, r.profile] + [f"{r.values[m]:.6f}" for m in BENCH_METRICS])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
