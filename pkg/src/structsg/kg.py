"""Class-level knowledge graph and object co-occurrence statistics."""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import Iterable, Sequence

import numpy as np

from .corpus import RelationVocab, SceneSample
from .errors import ContractError, InputError

Triple = tuple[int, int, int]


class KnowledgeGraph:
    """Directed multigraph of ``(subject, predicate, object)`` triple counts.

    Nodes start as the object classes ``0..N-1``; merging replaces two nodes
    by a new id.  Per-node indices of incoming ``(pred, subj)`` and outgoing
    ``(pred, obj)`` keys make degree and connection-set queries cheap.
    """

    def __init__(self, vocab: RelationVocab, nodes: Iterable[int] | None = None):
        self.vocab = vocab
        self.nodes: set[int] = set(range(vocab.num_classes) if nodes is None else nodes)
        self.triple_counts: dict[Triple, int] = {}
        self._in: dict[int, Counter] = defaultdict(Counter)
        self._out: dict[int, Counter] = defaultdict(Counter)
        self._din: Counter = Counter()
        self._dout: Counter = Counter()

    @property
    def node_set(self) -> frozenset[int]:
        return frozenset(self.nodes)

    def add(self, s: int, p: int, o: int, count: int = 1) -> None:
        if s not in self.nodes or o not in self.nodes:
            raise KeyError(f"unknown node in triple ({s}, {p}, {o})")
        self.triple_counts[(s, p, o)] = self.triple_counts.get((s, p, o), 0) + count
        self._out[s][(p, o)] += count
        self._in[o][(p, s)] += count
        self._dout[s] += count
        self._din[o] += count

    def _remove(self, s: int, p: int, o: int) -> int:
        count = self.triple_counts.pop((s, p, o))
        del self._out[s][(p, o)]
        del self._in[o][(p, s)]
        self._dout[s] -= count
        self._din[o] -= count
        return count

    def _check(self, node: int) -> None:
        if node not in self.nodes:
            raise KeyError(f"node {node} is not in the graph")

    def in_keys(self, node: int):
        return self._in[node].keys() if node in self._in else ()

    def out_keys(self, node: int):
        return self._out[node].keys() if node in self._out else ()

    def degrees(self, node: int) -> tuple[int, int]:
        self._check(node)
        return self._din[node], self._dout[node]

    def copy(self) -> "KnowledgeGraph":
        kg = KnowledgeGraph(self.vocab, self.nodes)
        for (s, p, o), c in self.triple_counts.items():
            kg.add(s, p, o, c)
        return kg

    def merge_inplace(self, i: int, j: int, new: int) -> None:
        self._check(i)
        self._check(j)
        if i == j:
            raise ContractError("cannot merge a node with itself")
        if new in self.nodes and new not in (i, j):
            raise ContractError(f"new node id {new} already exists")
        touched = set()
        for n in (i, j):
            touched.update((n, p, o) for p, o in self.out_keys(n))
            touched.update((s, p, n) for p, s in self.in_keys(n))
        rewritten = []
        for s, p, o in sorted(touched):
            c = self._remove(s, p, o)
            s2 = new if s in (i, j) else s
            o2 = new if o in (i, j) else o
            if s2 != o2:
                rewritten.append((s2, p, o2, c))
        for n in (i, j):
            self.nodes.discard(n)
            self._in.pop(n, None)
            self._out.pop(n, None)
            self._din.pop(n, None)
            self._dout.pop(n, None)
        self.nodes.add(new)
        for s, p, o, c in rewritten:
            self.add(s, p, o, c)


def _check_sample(sample: SceneSample, vocab: RelationVocab) -> None:
    sample.validate(vocab)


def build_kg(samples: Sequence[SceneSample], vocab: RelationVocab) -> KnowledgeGraph:
    """Aggregate ground-truth relations of all samples into class-level counts."""
    counts: Counter = Counter()
    for sample in samples:
        _check_sample(sample, vocab)
        for s, p, o in sample.relations:
            counts[(sample.labels[s], p, sample.labels[o])] += 1
    kg = KnowledgeGraph(vocab)
    for (s, p, o) in sorted(counts):
        kg.add(s, p, o, counts[(s, p, o)])
    return kg


def cooccurrence_counts(samples: Sequence[SceneSample], vocab: RelationVocab,
                        unit: str = "instance") -> np.ndarray:
    """Count object co-occurrences per image.

    ``unit="instance"`` counts every ordered pair of distinct instances, so an
    image with instances ``[a, a, b]`` adds 2 to ``T[a, a]``, ``T[a, b]`` and
    ``T[b, a]``.  ``unit="image"`` counts each ordered class pair at most once
    per image (the diagonal needs two instances of the class).
    """
    if unit not in ("instance", "image"):
        raise InputError(f"unknown co-occurrence unit {unit!r}")
    n = vocab.num_classes
    T = np.zeros((n, n), dtype=np.int64)
    for sample in samples:
        _check_sample(sample, vocab)
        hist = np.bincount(np.asarray(sample.labels, dtype=np.int64), minlength=n)
        if unit == "instance":
            T += np.outer(hist, hist) - np.diag(hist)
        else:
            present = (hist > 0).astype(np.int64)
            T += np.outer(present, present) - np.diag(present) + np.diag((hist > 1).astype(np.int64))
    return T


def conditional_probability(T: np.ndarray) -> np.ndarray:
    """Row-normalise co-occurrence counts; all-zero rows stay zero."""
    T = np.asarray(T, dtype=np.float64)
    if np.any(T < 0):
        raise InputError("co-occurrence counts must be nonnegative")
    rows = T.sum(axis=1, keepdims=True)
    P = np.zeros_like(T)
    np.divide(T, rows, out=P, where=rows > 0)
    return P


def degrees(kg: KnowledgeGraph, node: int) -> tuple[int, int]:
    """``(d_in, d_out)`` with edge multiplicity counted."""
    return kg.degrees(node)


def connection_sets(kg: KnowledgeGraph, q_s: int, q_t: int) -> tuple[set[int], set[int]]:
    """Nodes related to both ``q_s`` and ``q_t`` through a shared predicate.

    ``L_s`` holds subjects ``q`` with some predicate ``p`` such that both
    ``(q, p, q_s)`` and ``(q, p, q_t)`` exist; ``L_o`` is the same for
    outgoing edges.  The two query nodes never appear in either set.
    """
    kg._check(q_s)
    kg._check(q_t)
    if q_s == q_t:
        raise ContractError("connection sets need two distinct nodes")
    exclude = {q_s, q_t}
    in_t = kg.in_keys(q_t)
    out_t = kg.out_keys(q_t)
    L_s = {key[1] for key in kg.in_keys(q_s) if key in in_t} - exclude
    L_o = {key[1] for key in kg.out_keys(q_s) if key in out_t} - exclude
    return L_s, L_o
