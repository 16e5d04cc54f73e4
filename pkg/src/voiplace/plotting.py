"""Figures for benchmark summaries (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FRACTION_PANEL = ("fVOI_solid", "fSolid_outside", "fVOI_periphery", "fVOI_necrosis", "fVOI_normal", "objective")


def plot_summary(table: Dict[str, Dict[str, tuple]], path) -> Path:
    """Grouped bars (mean ± SD) of fractions/objective plus VOI volume, one group per profile."""
    profiles = list(table)
    fig, (ax_f, ax_v) = plt.subplots(1, 2, figsize=(11, 4), gridspec_kw={"width_ratios": [4, 1]})
    width = 0.8 / max(len(profiles), 1)
    x = np.arange(len(FRACTION_PANEL))
    for k, p in enumerate(profiles):
        means = [table[p][m][0] for m in FRACTION_PANEL]
        sds = [table[p][m][1] for m in FRACTION_PANEL]
        ax_f.bar(x + k * width, means, width, yerr=sds, capsize=3, label=p)
        vm, vs, _ = table[p]["voi_volume_ml"]
        ax_v.bar(k, vm, 0.6, yerr=vs, capsize=3)
    ax_f.set_xticks(x + width * (len(profiles) - 1) / 2)
    ax_f.set_xticklabels(FRACTION_PANEL, rotation=20)
    ax_f.set_ylim(0, 1.1)
    ax_f.set_ylabel("mean ± SD")
    ax_f.legend()
    ax_v.set_xticks(range(len(profiles)))
    ax_v.set_xticklabels(profiles)
    ax_v.set_ylabel("VOI volume (mL)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
