"""MR spectroscopy VOI planning: oriented-box placement over labeled tumor volumes."""

__version__ = "0.1.0"

from voiplace.volume import Label, LabelVolume, DistanceMap
from voiplace.geometry import OrientedBox, TissueOverlap, overlap
from voiplace.objective import PreferenceProfile, builtin_profiles, evaluate

__all__ = [
    "__version__",
    "Label",
    "LabelVolume",
    "DistanceMap",
    "OrientedBox",
    "TissueOverlap",
    "overlap",
    "PreferenceProfile",
    "builtin_profiles",
    "evaluate",
]
