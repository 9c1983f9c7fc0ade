"""Behavior-pattern similarity and penalized agglomerative clustering.

Clusters are merged greedily by ``sim(i, j) / (lam_i + lam_j)`` where the
penalty ``lam`` starts at 1 for every class and becomes
``lam_i + lam_j + 1`` for a merged cluster, so clusters that already
absorbed many classes are merged less eagerly.

Current cluster indices are the rank of each cluster's smallest member
class.  Ties in the selection score go to the lexicographically smallest
index pair, which is the same as the smallest ``(min_member_i,
min_member_j)`` pair; the heap keys below rely on that.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np

from .errors import ContractError, InputError
from .kg import KnowledgeGraph, connection_sets

Number = Union[Fraction, float]

FLOAT_TIE_TOL = 1e-12


def _ratio(num: int, den: int, exact: bool) -> Number:
    # a term with an empty connection set is 0 even when den == 0
    if num == 0:
        return Fraction(0) if exact else 0.0
    return Fraction(num, den) if exact else num / den


def similarity(kg: KnowledgeGraph, q_s: int, q_t: int, exact: bool = True) -> Number:
    """Behavior-pattern overlap of two nodes, in ``[0, 2]``."""
    L_s, L_o = connection_sets(kg, q_s, q_t)
    din_s, dout_s = kg.degrees(q_s)
    din_t, dout_t = kg.degrees(q_t)
    return (_ratio(len(L_s), din_s + din_t - len(L_s), exact)
            + _ratio(len(L_o), dout_s + dout_t - len(L_o), exact))


def merge_nodes(kg: KnowledgeGraph, i: int, j: int, new: int | None = None) -> KnowledgeGraph:
    """Return a copy of ``kg`` with ``i`` and ``j`` replaced by one node.

    Edges between the two merged nodes (including their self-loops) are
    dropped; all other counts are summed onto the new node, whose id
    defaults to ``max(node_set) + 1``.
    """
    if i == j:
        raise ContractError("cannot merge a node with itself")
    if new is None:
        new = max(kg.nodes) + 1
    out = kg.copy()
    out.merge_inplace(i, j, new)
    return out


@dataclass(frozen=True)
class MergeStep:
    step: int
    left: int
    right: int
    similarity: Number
    score: Number


@dataclass
class MergeTree:
    """Merge history over leaves ``0..num_leaves-1``.

    The node created at merge ``step`` has id ``num_leaves + step``; its
    ``left`` child is the one with the smaller current cluster index.
    """

    num_leaves: int
    merges: list[MergeStep] = field(default_factory=list)

    def node_id(self, step: int) -> int:
        return self.num_leaves + step

    def children(self, node: int) -> tuple[int, int] | None:
        if node < self.num_leaves:
            return None
        m = self.merges[node - self.num_leaves]
        return m.left, m.right

    def leaves(self, node: int) -> list[int]:
        stack, out = [node], []
        while stack:
            n = stack.pop()
            ch = self.children(n)
            if ch is None:
                out.append(n)
            else:
                stack.extend(ch)
        return sorted(out)

    def roots(self) -> list[int]:
        """Top-level nodes ordered by their smallest leaf."""
        used = {c for m in self.merges for c in (m.left, m.right)}
        total = self.num_leaves + len(self.merges)
        tops = [n for n in range(total) if n not in used]
        return sorted(tops, key=lambda n: min(self.leaves(n)))


@dataclass
class ContextDictionary:
    """Class id -> context (cluster) id in ``[0, K)``."""

    K: int
    assignment: dict[int, int]

    def __post_init__(self):
        if self.K < 1:
            raise InputError("K must be positive")
        used = set(self.assignment.values())
        if used != set(range(self.K)):
            raise InputError("every context id in [0, K) needs at least one member")

    @property
    def num_classes(self) -> int:
        return len(self.assignment)

    def __getitem__(self, class_id: int) -> int:
        return self.assignment[class_id]

    def as_array(self) -> np.ndarray:
        n = len(self.assignment)
        if set(self.assignment) != set(range(n)):
            raise InputError("assignment must cover classes 0..N-1")
        return np.array([self.assignment[c] for c in range(n)], dtype=np.int64)

    def clusters(self) -> list[list[int]]:
        groups = [[] for _ in range(self.K)]
        for c in sorted(self.assignment):
            groups[self.assignment[c]].append(c)
        return groups

    @classmethod
    def identity(cls, n: int) -> "ContextDictionary":
        return cls(n, {c: c for c in range(n)})

    @classmethod
    def from_partition(cls, groups) -> "ContextDictionary":
        """Build from class groups; ids are assigned by smallest member."""
        groups = sorted((sorted(g) for g in groups if len(g)), key=lambda g: g[0])
        return cls(len(groups), {c: k for k, g in enumerate(groups) for c in g})

    @classmethod
    def from_labels(cls, labels) -> "ContextDictionary":
        buckets: dict[int, list[int]] = {}
        for c, g in enumerate(labels):
            buckets.setdefault(int(g), []).append(c)
        return cls.from_partition(buckets.values())

    def to_json(self) -> str:
        body = ",\n".join(f'    "{c}": {self.assignment[c]}' for c in sorted(self.assignment))
        return '{\n  "K": %d,\n  "assignment": {\n%s\n  }\n}\n' % (self.K, body)

    @classmethod
    def from_json(cls, text: str) -> "ContextDictionary":
        try:
            doc = json.loads(text)
            return cls(int(doc["K"]), {int(c): int(k) for c, k in doc["assignment"].items()})
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed context dictionary ({exc})") from None


class ClusterState:
    """Working state of the agglomeration.

    ``update="incremental"`` recomputes only the merged cluster's
    similarities after each merge; ``update="full"`` recomputes every pair
    against the rewritten graph.
    """

    def __init__(self, kg: KnowledgeGraph, exact: bool = True, update: str = "incremental"):
        if update not in ("incremental", "full"):
            raise InputError(f"unknown update mode {update!r}")
        n = kg.vocab.num_classes
        if kg.nodes != set(range(n)):
            raise InputError("clustering expects a graph over the original classes 0..N-1")
        self.kg = kg.copy()
        self.exact = exact
        self.update = update
        self.num_leaves = n
        self.members: dict[int, frozenset[int]] = {c: frozenset([c]) for c in range(n)}
        self.lam: dict[int, int] = {c: 1 for c in range(n)}
        self.sim: dict[tuple[int, int], Number] = {}
        self.merges: list[MergeStep] = []
        ids = sorted(self.members)
        for a_pos, a in enumerate(ids):
            for b in ids[a_pos + 1:]:
                self.sim[(a, b)] = similarity(self.kg, a, b, exact)
        self._heap: list = []
        self._rebuild_heap()

    # clusters are keyed by node id; ordering uses the smallest member
    def _key(self, a: int) -> int:
        return min(self.members[a])

    def _pair(self, a: int, b: int) -> tuple[int, int]:
        return (a, b) if self._key(a) < self._key(b) else (b, a)

    def _score(self, a: int, b: int) -> Number:
        s = self.sim[(a, b)]
        den = self.lam[a] + self.lam[b]
        return Fraction(s, den) if self.exact else s / den

    def _push(self, a: int, b: int) -> None:
        heapq.heappush(self._heap, (-self._score(a, b), self._key(a), self._key(b), a, b))

    def _rebuild_heap(self) -> None:
        self._heap = [(-self._score(a, b), self._key(a), self._key(b), a, b) for a, b in self.sim]
        heapq.heapify(self._heap)

    def _valid(self, entry) -> bool:
        return entry[3] in self.members and entry[4] in self.members

    @property
    def num_clusters(self) -> int:
        return len(self.members)

    def clusters(self) -> list[frozenset[int]]:
        """Live clusters in current-index order."""
        return sorted(self.members.values(), key=min)

    def cluster_ids(self) -> list[int]:
        return sorted(self.members, key=self._key)

    def select(self) -> tuple[int, int]:
        heap = self._heap
        while not self._valid(heap[0]):
            heapq.heappop(heap)
        if self.exact:
            _, _, _, a, b = heap[0]
            return a, b
        # float mode: scores within the tolerance count as ties
        best = heapq.heappop(heap)
        near = [best]
        while heap:
            if not self._valid(heap[0]):
                heapq.heappop(heap)
                continue
            if -heap[0][0] >= -best[0] - FLOAT_TIE_TOL:
                near.append(heapq.heappop(heap))
            else:
                break
        near.sort(key=lambda e: (e[1], e[2]))
        for e in near:
            heapq.heappush(heap, e)
        return near[0][3], near[0][4]

    def merge_best(self) -> MergeStep:
        if self.num_clusters < 2:
            raise ContractError("nothing left to merge")
        a, b = self.select()
        step = MergeStep(len(self.merges), a, b, self.sim[(a, b)], self._score(a, b))
        new = self.num_leaves + step.step
        self.kg.merge_inplace(a, b, new)
        self.members[new] = self.members.pop(a) | self.members.pop(b)
        self.lam[new] = self.lam.pop(a) + self.lam.pop(b) + 1
        self.merges.append(step)

        if self.update == "full":
            ids = self.cluster_ids()
            self.sim = {}
            for pos, x in enumerate(ids):
                for y in ids[pos + 1:]:
                    self.sim[(x, y)] = similarity(self.kg, x, y, self.exact)
            self._rebuild_heap()
        else:
            self.sim = {k: v for k, v in self.sim.items() if a not in k and b not in k}
            for c in self.cluster_ids():
                if c == new:
                    continue
                pair = self._pair(new, c)
                self.sim[pair] = similarity(self.kg, pair[0], pair[1], self.exact)
                self._push(*pair)
        return step

    def dictionary(self) -> ContextDictionary:
        return ContextDictionary.from_partition(self.members.values())

    def tree(self) -> MergeTree:
        return MergeTree(self.num_leaves, list(self.merges))


def hsa_cluster(kg: KnowledgeGraph, K: int, tie_break: str = "lexicographic",
                exact: bool = True, update: str = "incremental"
                ) -> tuple[ContextDictionary, MergeTree]:
    """Agglomerate the graph's classes down to ``K`` clusters.

    Merging continues through all-zero scores (the tie-break decides), so
    the result always has exactly ``K`` clusters and ``N - K`` merges.
    """
    n = kg.vocab.num_classes
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= n:
        raise InputError(f"K must be an integer in [1, {n}], got {K!r}")
    if tie_break != "lexicographic":
        raise InputError(f"unsupported tie-break {tie_break!r}")
    state = ClusterState(kg, exact=exact, update=update)
    while state.num_clusters > K:
        state.merge_best()
    return state.dictionary(), state.tree()
