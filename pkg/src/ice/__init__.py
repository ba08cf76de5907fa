"""Intrinsic concept extraction: localization, structured token learning,
evaluation, and a deterministic synthetic backend for desk-scale runs."""

__version__ = "0.1.0"

from .core import (
    AttentionMap,
    BinaryMask,
    ConceptRecord,
    IceError,
    ImageTensor,
    IntrinsicAxis,
    LearnedConcept,
    NoiseSchedule,
    TextConcept,
    TokenEmbedding,
)

__all__ = [
    "__version__",
    "AttentionMap",
    "BinaryMask",
    "ConceptRecord",
    "IceError",
    "ImageTensor",
    "IntrinsicAxis",
    "LearnedConcept",
    "NoiseSchedule",
    "TextConcept",
    "TokenEmbedding",
]
