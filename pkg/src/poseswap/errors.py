"""Exception types shared across the package.

Every failure mode surfaced by the public API maps to exactly one of these
classes, so callers (and the CLI) can branch on type rather than message.
"""


class PoseSwapError(Exception):
    """Base class for all package errors."""


# --- dataset / media I/O ---

class MissingFile(PoseSwapError):
    """A manifest references an asset that does not exist on disk."""


class SchemaError(PoseSwapError):
    """A structured document has the wrong version, type, or field set."""


class InconsistentSpecies(PoseSwapError):
    """A clip's keypoint count disagrees with its species entry."""


class UnknownClip(PoseSwapError):
    """Requested clip id is not present in the manifest."""


class CorruptAsset(PoseSwapError):
    """An asset file exists but cannot be decoded consistently."""


class IoError(PoseSwapError):
    """Filesystem write failed."""


class ValidationError(PoseSwapError):
    """A value object violates one of its invariants."""


# --- preprocessing ---

class EmptyMask(PoseSwapError):
    """Mask has no foreground pixel at the 0.5 threshold."""


class ShapeError(PoseSwapError):
    """Array arguments have inconsistent shapes."""


class RangeError(PoseSwapError):
    """A scalar argument is outside its admissible range."""


# --- training ---

class NonFiniteLoss(PoseSwapError):
    """Training loss became NaN/inf; the run must abort."""


class MissingStage1Checkpoint(PoseSwapError):
    """Stage-2 training was requested without a stage-1 checkpoint."""


class VersionMismatch(PoseSwapError):
    """Checkpoint or config carries an unsupported version number."""


class CorruptCheckpoint(PoseSwapError):
    """Checkpoint file cannot be restored."""


class ClipTooShort(PoseSwapError):
    """Clip has fewer frames than the requested training window."""


# --- dataset generation ---

class OutOfFrame(PoseSwapError):
    """A motion script moves the creature outside the image bounds."""


class SpeciesMissing(PoseSwapError):
    """Requested species id is absent from the manifest."""


# --- evaluation ---

class TooFewFrames(PoseSwapError):
    """Temporal metrics need at least two frames."""


class UsageError(PoseSwapError):
    """Bad command-line arguments (exit code 2)."""
