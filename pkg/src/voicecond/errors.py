"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
subclass one of the categories below rather than raising bare ValueError.
"""


class VoicecondError(Exception):
    """Base class for all library errors."""


class ShapeError(VoicecondError):
    """Tensor/matrix shapes incompatible with the requested operation."""


class ArtifactError(VoicecondError):
    """Missing or malformed input artifact (file, manifest entry, checkpoint)."""


class NumericalError(VoicecondError):
    """Non-finite values where finite ones are required."""


class NoSpeechError(VoicecondError):
    """An utterance contains no voiced frames."""


class NoAlignmentError(VoicecondError):
    """Label sequence cannot be aligned to the available frames."""
