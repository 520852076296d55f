"""Exception taxonomy for the spinefm engine."""


class SpineFMError(Exception):
    """Base class for all engine errors."""


class EmptyMask(SpineFMError):
    """A mask operation needed foreground pixels and found none."""


class DegenerateAxis(SpineFMError):
    """Axis fitting got coincident points."""


class DegeneratePolygon(SpineFMError):
    """Polygon with zero area cannot be rasterized."""


class InsufficientSeeds(SpineFMError):
    """Fewer than three detection candidates survived the confidence cut."""


class EmptySegmentation(SpineFMError):
    """A seed segmentation binarized to an empty mask."""


class ConflictingAnchors(SpineFMError):
    """Two spine-end detections imply inconsistent label positions."""


class InvalidConfig(SpineFMError):
    """Pipeline configuration violates its invariants."""


class InvalidHyperparameter(SpineFMError):
    """Training hyperparameters out of range."""


class SpecOverflow(SpineFMError):
    """Phantom spec does not fit the image or the label vocabulary."""


class ParseError(SpineFMError):
    """Malformed input document."""


class SchemaError(SpineFMError):
    """Document parsed but required fields are missing or ill-shaped."""


class UnknownLabel(SpineFMError):
    """Vertebra label outside the level vocabulary."""


class UnsupportedFormat(SpineFMError):
    """Image file is not binary 8-bit PGM."""


class CorruptFile(SpineFMError):
    """Image file header is valid but the payload is short or damaged."""


class IoFailure(SpineFMError):
    """Output files could not be written."""


class BackendFailure(SpineFMError):
    """An inference backend failed; surfaces as an image-level failure."""


class PayloadTooLarge(SpineFMError):
    """Wire payload exceeds the configured cap."""


class ProtoTimeout(BackendFailure):
    """External backend did not answer within the per-request timeout."""


class ChildExited(BackendFailure):
    """External backend process died or closed its pipes."""


class ProtocolViolation(BackendFailure):
    """External backend sent a malformed or out-of-order message."""
