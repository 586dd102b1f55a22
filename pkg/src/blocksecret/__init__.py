"""Block-sparsity based private communication over a public Gaussian channel.

The legitimate receiver decodes with a secretly shared block structure, the
eavesdropper either decodes without it or learns it from fourth-order moments
of repeated transmissions.
"""

from .errors import (
    DecodeError,
    DegenerateScaleError,
    DimensionError,
    IdentifiabilityError,
    ParameterError,
)
from .model import (
    BlockStructure,
    Message,
    ProtocolParams,
    derive_rng,
    indicator_matrix,
    sample_block_structure,
    sample_channel,
    sample_message,
    select_params,
    transmit,
)
from .codec import deserialize_structure, serialize_structure

__all__ = [
    "BlockStructure",
    "DecodeError",
    "DegenerateScaleError",
    "DimensionError",
    "IdentifiabilityError",
    "Message",
    "ParameterError",
    "ProtocolParams",
    "derive_rng",
    "deserialize_structure",
    "indicator_matrix",
    "sample_block_structure",
    "sample_channel",
    "sample_message",
    "select_params",
    "serialize_structure",
    "transmit",
]

__version__ = "0.1.0"
