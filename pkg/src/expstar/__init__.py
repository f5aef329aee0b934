"""Retrieval-augmented experiment-commentary pipeline.

Builds a passage knowledge index, constructs control-token SFT sequences and
safety preference pairs, drives the staged adaptive-retrieval inference
protocol against pluggable generators, curates step-level datasets from ASR
transcripts, and evaluates outputs with captioning metrics plus
safety-coverage statistics.
"""

from .config import PipelineConfig, resolve_config
from .domain import (
    ClipEmbeddingSet,
    Commentary,
    Discipline,
    GenerationContext,
    StepRecord,
    load_dataset,
    parse_commentary,
    render_commentary,
    save_dataset,
    validate_video,
)
from .errors import (
    CommentaryParseError,
    ExpstarError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .knowledge import (
    FusionMode,
    KnowledgeIndex,
    Passage,
    SearchResult,
    build_index,
    fuse_query,
    load_index,
    normalize,
    save_index,
    search,
)
from .sequences import (
    ControlledSequence,
    ControlToken,
    RelevanceLabel,
    Segment,
    build_corpus,
    build_step_sequences,
    label_relevance,
    supervision_mask,
)

__version__ = "0.1.0"

__all__ = [
    "ClipEmbeddingSet",
    "Commentary",
    "CommentaryParseError",
    "ControlToken",
    "ControlledSequence",
    "Discipline",
    "ExpstarError",
    "FusionMode",
    "GenerationContext",
    "KnowledgeIndex",
    "Passage",
    "PipelineConfig",
    "ProtocolError",
    "RelevanceLabel",
    "SearchResult",
    "Segment",
    "StepRecord",
    "TransportError",
    "ValidationError",
    "build_corpus",
    "build_index",
    "build_step_sequences",
    "fuse_query",
    "label_relevance",
    "load_dataset",
    "load_index",
    "normalize",
    "parse_commentary",
    "render_commentary",
    "resolve_config",
    "save_dataset",
    "save_index",
    "search",
    "supervision_mask",
    "validate_video",
    "__version__",
]
