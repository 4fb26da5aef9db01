"""Error taxonomy shared across the package."""


class NdalError(Exception):
    """Base class for all package errors."""


# -- tensor engine ----------------------------------------------------------

class ShapeMismatch(NdalError):
    """Operands have incompatible shapes for the requested op."""


class NonFinite(NdalError):
    """An op produced NaN or Inf."""


class NotScalar(NdalError):
    """backward() was asked to differentiate a non-scalar."""


class NonPositiveLambda(NdalError):
    """Gradient-reversal coefficient must be > 0."""


class MissingGrad(NdalError):
    """Optimizer step requested but a parameter has no gradient."""


class StaleState(NdalError):
    """Optimizer state shapes no longer match the parameters."""


# -- audio / features -------------------------------------------------------

class UnsupportedFormat(NdalError):
    """WAV file is not 16-bit integer PCM."""


class UnsupportedRate(NdalError):
    """WAV sample rate is not 16 kHz (resampling is out of scope)."""


class CorruptFile(NdalError):
    """WAV header and payload disagree, or the container is unreadable."""


class SilentNoise(NdalError):
    """Noise signal has zero RMS and cannot be scaled to a target SNR."""


class TooShort(NdalError):
    """Signal shorter than one analysis window."""


# -- model / losses ---------------------------------------------------------

class DegenerateTime(NdalError):
    """Pooling needs at least two frames."""


class LabelOutOfRange(NdalError):
    """Class label outside the classifier's range."""


# -- training / evaluation --------------------------------------------------

class InsufficientSpeakers(NdalError):
    """Manifest holds fewer distinct speakers than the batch needs."""


class NonFiniteLoss(NdalError):
    """Training loss became NaN/Inf; the step is aborted."""


class IoError(NdalError):
    """Filesystem failure while reading or writing an artifact."""


class VersionMismatch(NdalError):
    """Checkpoint magic/version is unknown or the header is corrupt."""


class ZeroVector(NdalError):
    """Cosine similarity is undefined for a zero vector."""


class DegenerateSet(NdalError):
    """Score set lacks targets or non-targets; EER undefined."""


class SplitViolation(NdalError):
    """Training-split noise requested during evaluation."""


class ConfigError(NdalError):
    """Run configuration is missing, malformed, or has unknown keys."""
