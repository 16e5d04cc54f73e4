"""Keyword mapping from a free-text instruction to a preference kind."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class PreferenceKind(str, enum.Enum):
    MAXIMIZE_SOLID_COVERAGE = "MaximizeSolidCoverage"
    MINIMIZE_SOLID_OUTSIDE = "MinimizeSolidOutside"
    MINIMIZE_NECROSIS = "MinimizeNecrosis"
    BALANCED = "Balanced"


# first matching row wins
KEYWORDS = (
    (PreferenceKind.MINIMIZE_NECROSIS, (r"necro\w*", r"dead tissue")),
    (PreferenceKind.MINIMIZE_SOLID_OUTSIDE, (r"outside", r"miss\w*", r"leave out", r"left out",
                                             r"exclude less", r"whole tumou?r", r"entire tumou?r")),
    (PreferenceKind.MAXIMIZE_SOLID_COVERAGE, (r"coverage", r"cover\w*", r"include as much",
                                              r"maximi[sz]e solid", r"more solid", r"purity")),
    (PreferenceKind.BALANCED, (r"balanc\w*", r"default", r"standard")),
)

# metric, direction (+1 larger is better, -1 smaller is better)
PRIMARY_METRIC = {
    PreferenceKind.MINIMIZE_NECROSIS: ("vVOI_necrosis_ml", -1),
    PreferenceKind.MAXIMIZE_SOLID_COVERAGE: ("fVOI_solid", +1),
    PreferenceKind.MINIMIZE_SOLID_OUTSIDE: ("fSolid_outside", -1),
    PreferenceKind.BALANCED: ("objective:balanced", +1),
}


@dataclass(frozen=True)
class UserPreference:
    kind: PreferenceKind
    raw_text: str
    warning: bool = False

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "raw_text": self.raw_text, "warning": self.warning}


def parse_preference(instruction: str) -> UserPreference:
    if not instruction or not instruction.strip():
        raise ValueError("instruction must be non-empty")
    text = instruction.lower()
    for kind, patterns in KEYWORDS:
        if any(re.search(r"\b" + p, text) for p in patterns):
            return UserPreference(kind, instruction)
    return UserPreference(PreferenceKind.BALANCED, instruction, warning=True)
