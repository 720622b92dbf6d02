"""Exception types shared across the package.

Every error carries a stable machine-readable ``code`` (the class name);
the CLI prints it in its single-line error output.
"""


class RegionFuseError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


# --- prompts and text -------------------------------------------------------

class EmptyPrompt(RegionFuseError):
    """Prompt contains no words after normalization."""


class SubPromptNotFound(RegionFuseError):
    """A region sub-prompt has no contiguous word match in the full prompt."""


class OverlappingSpans(RegionFuseError):
    """Two regions of one character claim the same word index."""


# --- tensors and shapes ------------------------------------------------------

class ShapeMismatch(RegionFuseError):
    """Operands do not have conformable shapes."""


class NotDivisible(RegionFuseError):
    """Image dimensions are not a multiple of the patch factor."""


class DegenerateRegion(RegionFuseError):
    """Region box has zero area inside the image."""


class MissingRegionFeatures(RegionFuseError):
    """A requested region has no feature entry in the adapter bundle."""


# --- attention maps ----------------------------------------------------------

class ProbeDisabled(RegionFuseError):
    """Attention records were requested from a disabled probe."""


class EmptyRecords(RegionFuseError):
    """Layer aggregation called with no attention records."""


class EmptySpan(RegionFuseError):
    """Region aggregation called with an empty word span."""


class EmptyWindow(RegionFuseError):
    """Timestep aggregation window selects no maps."""


class NoCellAboveThreshold(RegionFuseError):
    """No normalized attention cell exceeds the box threshold."""


class SegmentationFailed(RegionFuseError):
    """Reference segmentation failed for one region of one character."""

    def __init__(self, label: str, character_index: int, reason: str = ""):
        self.label = label
        self.character_index = character_index
        msg = f"character {character_index}, region '{label}'"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


# --- file formats -------------------------------------------------------------

class BadMagic(RegionFuseError):
    """Tensor container does not start with the expected magic bytes."""


class UnsupportedVersion(RegionFuseError):
    """Tensor container declares an unknown version or dtype code."""


class TruncatedPayload(RegionFuseError):
    """Tensor container payload length disagrees with its header."""


# --- CLI -----------------------------------------------------------------------

class UsageError(RegionFuseError):
    """Command line arguments or configuration are invalid."""
