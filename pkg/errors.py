"""Exception hierarchy shared by every pipeline stage.

Each class carries the process exit code the CLI maps it to:
1 for usage/config problems, 2 for bad input data, 3 for anything else.
"""


class SynthOverlapError(Exception):
    """Base class for all errors raised by the toolkit."""
    exit_code = 3


class ConfigError(SynthOverlapError):
    """Invalid configuration, option value or call contract."""
    exit_code = 1


class DataError(SynthOverlapError):
    """Input data that cannot be processed."""
    exit_code = 2


class InputNotFoundError(DataError):
    """A referenced input file does not exist."""

    def __init__(self, path, what="input file"):
        self.path = str(path)
        super().__init__(f"{what} not found: {self.path}")


class AudioFormatError(DataError):
    """Malformed or unreadable audio file."""


class UnsupportedFormatError(AudioFormatError):
    """Audio encoding other than 16-bit PCM or 32-bit float."""


class SignalTooShortError(DataError):
    """Signal shorter than one analysis window."""


class GeometryError(DataError):
    """Spectrogram or mask shapes do not agree."""


class DegenerateInputError(DataError):
    """Zero-energy or zero-norm input where a nonzero one is required."""


class EnrollmentError(DataError):
    """Not enough audio to enroll a speaker."""


class UnsatisfiableError(DataError):
    """Pairing constraints cannot be met by the given utterances."""


class MappingError(DataError):
    """A path has no matching channel-map rule."""


class MissingAudioError(DataError):
    """An utterance reference cannot be resolved to audio."""


class SizeLimitError(DataError):
    """Problem size exceeds a hard enumeration limit."""


class LengthMismatchError(DataError):
    """Signals differ in length by more than the allowed tolerance."""


class AnnotationError(DataError):
    """Malformed annotation or segment record."""
