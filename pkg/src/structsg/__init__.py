"""Structured relation output spaces for scene graph generation.

Knowledge-graph statistics over annotated relations, behavior-pattern
agglomerative clustering of object classes into contexts, and relation
heads whose classifiers are generated per subject/object context.
"""

__version__ = "0.1.0"

from .corpus import FeatureStore, RelationVocab, SceneSample, read_corpus, read_vocab
from .errors import ContractError, CorpusFormatError, InputError, NumericError
from .hsa import ContextDictionary, MergeTree, hsa_cluster, merge_nodes, similarity
from .kg import (KnowledgeGraph, build_kg, conditional_probability, connection_sets,
                 cooccurrence_counts, degrees)

__all__ = [
    "ContextDictionary", "ContractError", "CorpusFormatError", "FeatureStore", "InputError",
    "KnowledgeGraph", "MergeTree", "NumericError", "RelationVocab", "SceneSample",
    "build_kg", "conditional_probability", "connection_sets", "cooccurrence_counts",
    "degrees", "hsa_cluster", "merge_nodes", "read_corpus", "read_vocab", "similarity",
]
