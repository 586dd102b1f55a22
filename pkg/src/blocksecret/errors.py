class ParameterError(ValueError):
    """Invalid protocol or solver parameters."""


class IdentifiabilityError(ParameterError):
    """The requested determinantal ratio leaves the problem unidentifiable."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class DegenerateScaleError(ParameterError):
    """The de-biasing scale p(1 - p) vanishes."""


class DecodeError(ValueError):
    """Base class for block-structure file decoding failures."""


class HeaderError(DecodeError):
    pass


class TruncatedPayloadError(DecodeError):
    pass


class BlockIdRangeError(DecodeError):
    pass


class UnequalBlocksError(DecodeError):
    pass
