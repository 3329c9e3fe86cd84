"""Exception hierarchy shared by all modules."""


class PhraseIvError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(PhraseIvError, ValueError):
    pass


class AudioFormatError(PhraseIvError, ValueError):
    pass


class WavHeaderError(AudioFormatError):
    """Malformed RIFF/WAVE header."""


class ChannelCountError(AudioFormatError):
    """Input is not mono."""


class UnsupportedEncodingError(AudioFormatError):
    """Anything other than 16-bit linear PCM."""


class SampleRateError(AudioFormatError):
    pass


class InsufficientDataError(PhraseIvError, ValueError):
    pass


class AlignmentInfeasibleError(PhraseIvError, ValueError):
    """Fewer frames than states in a left-to-right, no-skip HMM."""


class UnknownPhoneError(PhraseIvError, KeyError):
    pass


class FileFormatError(PhraseIvError, ValueError):
    """Base for binary model/feature file problems."""


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class ManifestError(PhraseIvError, ValueError):
    pass


class ConfigError(PhraseIvError, ValueError):
    pass


class StageError(PhraseIvError, RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
