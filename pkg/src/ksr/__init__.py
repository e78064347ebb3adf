"""Two-level generative knowledge graph embedding with interpretable semantic codes."""

from ksr.data import (
    DescriptionCorpus,
    SamplingExhaustedError,
    Triple,
    TripleStore,
    Vocabulary,
    VocabularyError,
    TripleParseError,
    compute_corruption_stats,
    corrupt_triple,
    load_descriptions,
    load_triples,
)
from ksr.model import (
    KsrModel,
    ModelConfig,
    ModelFormatError,
    NumericalInstabilityError,
    SemanticCode,
    coupling_weights,
    infer_entity_code,
    infer_relation_code,
    init_model,
    load_model,
    object_message,
    save_model,
    score,
    score_gradient,
    subject_message,
)

__version__ = "0.1.0"

__all__ = [
    "DescriptionCorpus",
    "KsrModel",
    "ModelConfig",
    "ModelFormatError",
    "NumericalInstabilityError",
    "SamplingExhaustedError",
    "SemanticCode",
    "Triple",
    "TripleParseError",
    "TripleStore",
    "Vocabulary",
    "VocabularyError",
    "compute_corruption_stats",
    "corrupt_triple",
    "coupling_weights",
    "infer_entity_code",
    "infer_relation_code",
    "init_model",
    "load_descriptions",
    "load_model",
    "load_triples",
    "object_message",
    "save_model",
    "score",
    "score_gradient",
    "subject_message",
]
