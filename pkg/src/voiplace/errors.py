"""Exception hierarchy; the CLI maps these onto exit codes."""


class VoiplaceError(Exception):
    """Base class for all package errors."""


class DataError(VoiplaceError):
    """Input data is missing, malformed or unusable (exit code 2)."""


class VolumeFormatError(DataError):
    pass


class NoSolidTumorError(DataError):
    """The label volume carries no SolidTumor voxel to place a VOI on."""


class ToolError(VoiplaceError):
    """A workflow tool or the LLM endpoint failed (exit code 3)."""
