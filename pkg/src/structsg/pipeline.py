"""End-to-end helpers: statistics -> head -> training -> evaluation."""

from __future__ import annotations

from typing import Sequence

from .corpus import FeatureStore, RelationVocab, SceneSample
from .evaluate import EvalConfig, RecallResult, predict_image, recall_at_k
from .hsa import ContextDictionary
from .kg import conditional_probability, cooccurrence_counts
from .sec import SecConfig, SecHead, build_frequency_bias
from .train import LossReport, TrainConfig, train


def init_head(samples: Sequence[SceneSample], vocab: RelationVocab, dictionary: ContextDictionary,
              d_f: int, cooccurrence_unit: str = "instance", bias_epsilon: float = 1e-3,
              **sec_options) -> SecHead:
    """A freshly initialised head with co-occurrence and bias statistics from ``samples``."""
    config = SecConfig(num_classes=vocab.num_classes, num_predicates=vocab.num_predicates,
                       num_contexts=dictionary.K, d_f=d_f, **sec_options)
    P = conditional_probability(cooccurrence_counts(samples, vocab, cooccurrence_unit))
    bias = build_frequency_bias(samples, vocab, bias_epsilon)
    return SecHead(config, dictionary, P, bias)


def fit(samples, vocab, features: FeatureStore, dictionary, train_config: TrainConfig,
        **sec_options) -> tuple[SecHead, list[LossReport]]:
    head = init_head(samples, vocab, dictionary, features.dim, **sec_options)
    return train(head, samples, features, train_config)


def predict(head: SecHead, samples: Sequence[SceneSample], features: FeatureStore,
            fusion: str = "structured", use_bias: bool = False,
            weights: tuple[float, float] = (0.7, 0.3)):
    return {s.image_id: predict_image(head, s, features, fusion, use_bias, weights) for s in samples}


def evaluate_head(head: SecHead, samples: Sequence[SceneSample], features: FeatureStore,
                  config: EvalConfig | None = None, fusion: str = "structured",
                  use_bias: bool = False, weights: tuple[float, float] = (0.7, 0.3)) -> RecallResult:
    config = config or EvalConfig()
    preds = predict(head, samples, features, fusion, use_bias, weights)
    return recall_at_k(preds, samples, config)
