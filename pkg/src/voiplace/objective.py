"""Gaussian-product placement objective and named preference profiles.

The score of a VOI is the product of five Gaussian terms over tissue
fractions (solid, solid-outside, periphery, necrosis, normal brain), a
one-sided penalty on solid tumor volume above a cap, and a one-sided penalty
on skull proximity below a threshold.  Every factor is at most 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from voiplace.errors import DataError
from voiplace.geometry import TissueOverlap

TERMS = ("fVOI_solid", "fSolid_outside", "fVOI_periphery", "fVOI_necrosis", "fVOI_normal")


@dataclass(frozen=True)
class Target:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def _target(value) -> Target:
    if isinstance(value, Target):
        return value
    if isinstance(value, Mapping):
        return Target(float(value["mu"]), float(value["sigma"]))
    mu, sigma = value
    return Target(float(mu), float(sigma))


@dataclass(frozen=True)
class PreferenceProfile:
    name: str
    terms: Mapping[str, Target]
    volume_cap_ml: Optional[float] = None
    skull_threshold_mm: float = 5.0

    def __post_init__(self):
        missing = set(TERMS) - set(self.terms)
        extra = set(self.terms) - set(TERMS)
        if missing or extra:
            raise DataError(f"profile {self.name!r}: terms must be exactly {TERMS} "
                            f"(missing {sorted(missing)}, unknown {sorted(extra)})")
        object.__setattr__(self, "terms", {t: _target(self.terms[t]) for t in TERMS})
        if self.volume_cap_ml is not None and not self.volume_cap_ml > 0:
            raise DataError(f"profile {self.name!r}: volume cap must be > 0")
        if not self.skull_threshold_mm >= 0:
            raise DataError(f"profile {self.name!r}: skull threshold must be >= 0")

    def mu(self, term: str) -> float:
        return self.terms[term].mu

    def sigma(self, term: str) -> float:
        return self.terms[term].sigma

    def to_json(self) -> dict:
        return {
            "terms": {t: {"mu": tg.mu, "sigma": tg.sigma} for t, tg in self.terms.items()},
            "volume_cap_ml": self.volume_cap_ml,
            "skull_threshold_mm": self.skull_threshold_mm,
        }

    @classmethod
    def from_json(cls, name: str, obj: Mapping) -> "PreferenceProfile":
        try:
            terms = {t: Target(float(v["mu"]), float(v["sigma"])) for t, v in obj["terms"].items()}
            cap = obj.get("volume_cap_ml")
            return cls(name, terms, None if cap is None else float(cap),
                       float(obj.get("skull_threshold_mm", 5.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid profile {name!r}: {exc}") from exc


@dataclass(frozen=True)
class ObjectiveBreakdown:
    terms: Dict[str, float]
    volume_penalty: float
    skull_penalty: float
    total: float

    def factors(self) -> Tuple[float, ...]:
        return tuple(self.terms[t] for t in TERMS) + (self.volume_penalty, self.skull_penalty)

    def to_json(self) -> dict:
        return {"terms": dict(self.terms), "volume_penalty": self.volume_penalty,
                "skull_penalty": self.skull_penalty, "total": self.total}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ObjectiveBreakdown":
        return cls(dict(obj["terms"]), float(obj["volume_penalty"]), float(obj["skull_penalty"]),
                   float(obj["total"]))


def gaussian_term(F: float, mu: float, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    z = (F - mu) / sigma
    return math.exp(-0.5 * z * z)


def volume_penalty(V: float, cap: Optional[float]) -> float:
    if cap is None or V <= cap:
        return 1.0
    return math.exp(-(V - cap))


def skull_penalty(D: float, threshold: float) -> float:
    if math.isinf(D):
        return 0.0
    if D >= threshold:
        return 1.0
    return math.exp(-(threshold - D))


def evaluate(ov: TissueOverlap, p: PreferenceProfile) -> ObjectiveBreakdown:
    """Score a measured VOI under a profile.

    A box with no in-grid content (``D`` infinite) gets a skull penalty of
    exactly 0, so its total is 0.
    """
    terms = {t: gaussian_term(ov.fraction(t), p.mu(t), p.sigma(t)) for t in TERMS}
    vp = volume_penalty(ov.V, p.volume_cap_ml)
    sp = skull_penalty(ov.D, p.skull_threshold_mm)
    total = 1.0
    for t in TERMS:
        total *= terms[t]
    total *= vp * sp
    return ObjectiveBreakdown(terms, vp, sp, total)


def total_array(fractions: Mapping[str, np.ndarray], V: np.ndarray, D: np.ndarray,
                p: PreferenceProfile) -> np.ndarray:
    """Vectorized total for batches of measurements (coarse search ranking)."""
    log_total = np.zeros(np.shape(V))
    for t in TERMS:
        z = (np.asarray(fractions[t]) - p.mu(t)) / p.sigma(t)
        log_total = log_total - 0.5 * z * z
    if p.volume_cap_ml is not None:
        log_total = log_total - np.maximum(0.0, np.asarray(V) - p.volume_cap_ml)
    D = np.asarray(D, dtype=float)
    log_total = log_total - np.maximum(0.0, p.skull_threshold_mm - np.where(np.isinf(D), 0.0, D))
    out = np.exp(log_total)
    return np.where(np.isinf(D), 0.0, out)


ProfileSource = Union[str, Path, Mapping]


def load_profiles(source: Optional[ProfileSource] = None) -> Dict[str, PreferenceProfile]:
    """Load a profile file (``{"profiles": {name: {...}}}``); the builtin set when None."""
    if source is None:
        text = resources.files("voiplace").joinpath("data/profiles.json").read_text("utf-8")
        obj = json.loads(text)
    elif isinstance(source, Mapping):
        obj = source
    else:
        try:
            obj = json.loads(Path(source).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read profile file {source}: {exc}") from exc
    profiles = obj.get("profiles", obj)
    return {name: PreferenceProfile.from_json(name, spec) for name, spec in profiles.items()}


_BUILTIN: Optional[Dict[str, PreferenceProfile]] = None


def builtin_profiles() -> Dict[str, PreferenceProfile]:
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = load_profiles()
    return dict(_BUILTIN)


def resolve_profile(ref: Union[str, PreferenceProfile],
                    extra: Optional[Mapping[str, PreferenceProfile]] = None) -> PreferenceProfile:
    """Look a profile up by name (builtin or ``extra``) or load it from a file path."""
    if isinstance(ref, PreferenceProfile):
        return ref
    known = builtin_profiles()
    if extra:
        known.update(extra)
    if ref in known:
        return known[ref]
    path = Path(ref)
    if path.exists():
        loaded = load_profiles(path)
        if len(loaded) != 1:
            raise DataError(f"profile file {ref} holds {len(loaded)} profiles; name one of "
                            f"{sorted(loaded)}")
        return next(iter(loaded.values()))
    raise DataError(f"unknown profile {ref!r}; known: {sorted(known)}")
