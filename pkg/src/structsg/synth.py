"""Synthetic corpora with planted class clusters.

Classes are split into ``K*`` groups.  Non-background predicates are split
into ``K*`` blocks, and the cluster pair ``(h, g)`` may only use the block
``(row[h] + col[g]) mod K*`` (a Latin square), so two different groups never
share a predicate towards, or from, the same third group.  Every class of a
group therefore behaves alike while different groups have disjoint
behavior patterns.

``pattern="sampled"`` draws each relation independently: predicate from the
long-tailed marginal ``p ** -tail_exponent``, then a cluster pair using
that predicate's block, then classes uniformly within each cluster.
``pattern="exact"`` enumerates every class pair of every allowed
(cluster pair, predicate) combination the same number of times, so classes
of one group have identical triple patterns; the training split then holds
exactly that enumeration and ``images`` is ignored.

Union features are ``prototype[h, g, predicate] + noise`` (predicate 0 for
unrelated pairs); object features are ``prototype[group] + noise``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .corpus import FeatureStore, RelationVocab, SceneSample
from .errors import InputError
from .hsa import ContextDictionary


@dataclass
class SynthConfig:
    num_classes: int = 12
    num_clusters: int = 3
    num_predicates: int = 10          # background predicate 0 included
    images: int = 200
    test_images: int = 0
    instances: tuple[int, int] = (6, 10)
    tail_exponent: float = 1.0
    d_f: int = 16
    noise: float = 0.5
    seed: int = 0
    pattern: str = "sampled"
    exact_repeats: int = 4
    image_size: tuple[int, int] = (640, 480)

    def __post_init__(self):
        self.instances = tuple(int(v) for v in self.instances)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.images < 1:
            raise InputError("need at least one image")
        if self.test_images < 0:
            raise InputError("test_images must be >= 0")
        if not 1 <= self.num_clusters <= self.num_classes:
            raise InputError("need 1 <= num_clusters <= num_classes")
        if self.num_predicates - 1 < self.num_clusters:
            raise InputError("need at least one non-background predicate per cluster")
        lo, hi = self.instances
        if not 2 <= lo <= hi:
            raise InputError("instances range must satisfy 2 <= lo <= hi")
        if self.tail_exponent < 0 or self.noise < 0 or self.d_f < 1:
            raise InputError("tail_exponent and noise must be >= 0, d_f >= 1")
        if self.pattern not in ("sampled", "exact"):
            raise InputError(f"unknown pattern {self.pattern!r}")
        if self.exact_repeats < 1:
            raise InputError("exact_repeats must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances"] = list(self.instances)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class SynthCorpus:
    config: SynthConfig
    vocab: RelationVocab
    samples: list[SceneSample]
    test_samples: list[SceneSample]
    features: FeatureStore
    groups: np.ndarray                # class -> planted group
    blocks: np.ndarray                # (K*, K*) block index per cluster pair
    predicate_block: np.ndarray       # predicate -> block (-1 for background)

    def truth_json(self) -> dict:
        d = planted_partition(self)
        return {
            "K": d.K,
            "assignment": {str(c): d.assignment[c] for c in range(len(self.groups))},
            "predicate_block": self.predicate_block.tolist(),
            "cluster_pair_block": self.blocks.tolist(),
        }


def planted_partition(corpus: SynthCorpus) -> ContextDictionary:
    """The generator's class groups, numbered by smallest member class."""
    return ContextDictionary.from_labels(corpus.groups)


def _random_box(rng, width, height):
    w = int(rng.integers(16, width // 2))
    h = int(rng.integers(16, height // 2))
    x = int(rng.integers(0, width - w))
    y = int(rng.integers(0, height - h))
    return (x, y, w, h)


def generate(config: SynthConfig) -> SynthCorpus:
    c = config
    rng = np.random.default_rng(c.seed)
    K, N, R = c.num_clusters, c.num_classes, c.num_predicates
    groups = rng.permutation(np.arange(N) % K)
    members = [np.flatnonzero(groups == g) for g in range(K)]
    row, col = rng.permutation(K), rng.permutation(K)
    blocks = (row[:, None] + col[None, :]) % K
    preds = rng.permutation(np.arange(1, R))
    predicate_block = np.full(R, -1)
    predicate_block[preds] = np.arange(R - 1) % K
    pairs_of_block = [np.argwhere(blocks == b) for b in range(K)]
    weights = np.arange(1, R, dtype=np.float64) ** -c.tail_exponent
    weights /= weights.sum()

    obj_proto = rng.standard_normal((K, c.d_f))
    union_proto = rng.standard_normal((K, K, R, c.d_f))

    if c.pattern == "exact":
        triples = _exact_triples(c, members, blocks, predicate_block, rng)

    width, height = c.image_size
    features = FeatureStore(c.d_f)
    cursor = 0

    def draw_relation():
        nonlocal cursor
        if c.pattern == "exact":
            t = triples[cursor % len(triples)]
            cursor += 1
            return t
        p = 1 + int(rng.choice(R - 1, p=weights))
        h, g = pairs_of_block[predicate_block[p]][rng.integers(K)]
        return int(rng.choice(members[h])), p, int(rng.choice(members[g]))

    def make_image(image_id: str) -> SceneSample:
        n = int(rng.integers(c.instances[0], c.instances[1] + 1))
        m = n // 2
        if c.pattern == "exact" and image_id.startswith("train"):
            m = min(m, len(triples) - cursor)
            n = 2 * m + n % 2
        labels, rels = [], []
        for _ in range(m):
            a, p, b = draw_relation()
            rels.append((len(labels), p, len(labels) + 1))
            labels.extend([a, b])
        if n % 2:
            labels.append(int(rng.integers(N)))
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        labels = [labels[i] for i in perm]
        rels = [(int(inv[s]), p, int(inv[o])) for s, p, o in rels]
        boxes = [_random_box(rng, width, height) for _ in range(n)]

        gl = groups[labels]
        obj = obj_proto[gl] + c.noise * rng.standard_normal((n, c.d_f))
        pred_of = np.zeros((n, n), dtype=np.int64)
        for s, p, o in rels:
            pred_of[s, o] = p
        uni = union_proto[gl[:, None], gl[None, :], pred_of] + c.noise * rng.standard_normal((n, n, c.d_f))
        uni[np.arange(n), np.arange(n)] = 0.0
        features.add(image_id, obj, uni)
        return SceneSample(image_id, width, height, labels, boxes, rels)

    train = []
    if c.pattern == "exact":
        # every enumerated triple exactly once; ``images`` does not apply
        while cursor < len(triples):
            train.append(make_image(f"train{len(train):06d}"))
    else:
        train = [make_image(f"train{i:06d}") for i in range(c.images)]
    test = [make_image(f"test{i:06d}") for i in range(c.test_images)]

    vocab = RelationVocab(N, R,
                          tuple(f"class{i}" for i in range(N)),
                          ("__background__",) + tuple(f"pred{i}" for i in range(1, R)))
    return SynthCorpus(c, vocab, train, test, features,
                       groups, blocks, predicate_block)


def _exact_triples(c: SynthConfig, members, blocks, predicate_block, rng) -> list[tuple[int, int, int]]:
    """Every class pair of every allowed (cluster pair, predicate), repeated.

    A predicate's repeat count follows the long-tail weight, so within a
    cluster pair all class pairs carry identical counts.
    """
    K, R = c.num_clusters, c.num_predicates
    reps = {p: max(1, int(round(c.exact_repeats * p ** -c.tail_exponent))) for p in range(1, R)}
    out = []
    for h in range(K):
        for g in range(K):
            for p in range(1, R):
                if predicate_block[p] != blocks[h, g]:
                    continue
                for a in members[h]:
                    for b in members[g]:
                        out.extend([(int(a), p, int(b))] * reps[p])
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def predicate_counts(samples: Sequence[SceneSample], num_predicates: int) -> np.ndarray:
    counts = np.zeros(num_predicates, dtype=np.int64)
    for s in samples:
        for _, p, _ in s.relations:
            counts[p] += 1
    return counts
