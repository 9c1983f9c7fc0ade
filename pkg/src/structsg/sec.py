"""Context-specific relation classifiers generated from context embeddings.

Each object label is mapped to a context one-hot through a
:class:`~structsg.hsa.ContextDictionary`, embedded by ``W_e`` and propagated
by a graph convolution over the image's co-occurrence graph.  The final GCN
row of instance ``i`` holds ``R * d_cls/2`` numbers, read row-major as an
``R x d_cls/2`` block (its primitive classifier).  A subject/object pair is
scored by ``[block_s | block_t] @ [r_st; f_spt]``.

The head also carries a flat classifier shared by all pairs and a frozen
log-frequency bias table.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .corpus import RelationVocab, SceneSample
from .errors import ContractError, InputError, NumericError
from .hsa import ContextDictionary

BOX_FEATURES = 14

NONLINEARITIES = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(z.dtype)),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass
class SecConfig:
    num_classes: int
    num_predicates: int           # R, background predicate 0 included
    num_contexts: int             # K
    d_f: int = 4096
    d_e: int = 512
    d_cls: int = 1024
    d_r: int = 768                # d_spt = d_cls - d_r
    gcn_layers: int = 2
    gcn_hidden: int | None = None  # defaults to d_e
    nonlinearity: str = "relu"
    output_nonlinearity: str = "identity"
    adjacency: str = "literal"    # or "normalized"
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "num_predicates", "num_contexts", "d_f", "d_e",
                     "d_cls", "d_r", "gcn_layers"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.d_cls % 2:
            raise InputError("d_cls must be even")
        if not 1 <= self.d_r < self.d_cls:
            raise InputError("need 1 <= d_r < d_cls so the spatial part is nonempty")
        for name in ("nonlinearity", "output_nonlinearity"):
            if getattr(self, name) not in NONLINEARITIES:
                raise InputError(f"unknown {name} {getattr(self, name)!r}")
        if self.adjacency not in ("literal", "normalized"):
            raise InputError(f"unknown adjacency mode {self.adjacency!r}")
        if self.num_contexts > self.num_classes:
            raise InputError("K cannot exceed the number of classes")

    @property
    def d_spt(self) -> int:
        return self.d_cls - self.d_r

    @property
    def half(self) -> int:
        return self.d_cls // 2

    def gcn_dims(self) -> list[tuple[int, int]]:
        hidden = self.gcn_hidden or self.d_e
        sizes = [self.d_e] + [hidden] * (self.gcn_layers - 1) + [self.num_predicates * self.half]
        return list(zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return asdict(self)


class FrequencyBias:
    """Smoothed log-frequency of predicates per (subject class, object class)."""

    def __init__(self, num_predicates: int, epsilon: float, rows: dict[tuple[int, int], np.ndarray]):
        self.num_predicates = num_predicates
        self.epsilon = epsilon
        self.rows = rows
        self.default = np.full(num_predicates, -np.log(num_predicates))

    def row(self, s_class: int, o_class: int) -> np.ndarray:
        return self.rows.get((s_class, o_class), self.default)

    def to_arrays(self) -> dict[str, np.ndarray]:
        keys = sorted(self.rows)
        return {
            "bias_keys": np.array(keys, dtype=np.int64).reshape(-1, 2),
            "bias_rows": (np.stack([self.rows[k] for k in keys]) if keys
                          else np.zeros((0, self.num_predicates))),
            "bias_epsilon": np.array(self.epsilon),
        }

    @classmethod
    def from_arrays(cls, arrays, num_predicates: int) -> "FrequencyBias":
        rows = {(int(s), int(o)): arrays["bias_rows"][i].copy()
                for i, (s, o) in enumerate(arrays["bias_keys"])}
        return cls(num_predicates, float(arrays["bias_epsilon"]), rows)


def build_frequency_bias(samples: Sequence[SceneSample], vocab: RelationVocab,
                         epsilon: float = 1e-3) -> FrequencyBias:
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    R = vocab.num_predicates
    counts: dict[tuple[int, int], np.ndarray] = {}
    for sample in samples:
        sample.validate(vocab)
        for s, p, o in sample.relations:
            key = (sample.labels[s], sample.labels[o])
            if key not in counts:
                counts[key] = np.zeros(R)
            counts[key][p] += 1
    rows = {k: np.log((c + epsilon) / (c.sum() + R * epsilon)) for k, c in counts.items()}
    return FrequencyBias(R, epsilon, rows)


def fuse_bias(logits: np.ndarray, bias_row: np.ndarray, enabled: bool = True) -> np.ndarray:
    return logits + bias_row if enabled else logits


# ---------------------------------------------------------------------------
# elementary operations


def encode_context(dictionary: ContextDictionary, class_id: int) -> np.ndarray:
    k = dictionary.assignment[class_id]
    v = np.zeros(dictionary.K)
    v[k] = 1.0
    return v


def encode_contexts(dictionary: ContextDictionary, labels: Sequence[int]) -> np.ndarray:
    return np.stack([encode_context(dictionary, c) for c in labels]) if len(labels) else np.zeros((0, dictionary.K))


def embed_contexts(W_e: np.ndarray, onehots: np.ndarray) -> np.ndarray:
    """Rows ``W_e @ c_i`` for each one-hot row ``c_i``."""
    onehots = np.atleast_2d(onehots)
    if onehots.shape[1] != W_e.shape[1]:
        raise ContractError(f"one-hots have length {onehots.shape[1]}, W_e expects {W_e.shape[1]}")
    return onehots @ W_e.T


@dataclass
class LocalGraph:
    n: int
    labels: np.ndarray
    A: np.ndarray


def local_adjacency(P: np.ndarray, labels: Sequence[int]) -> LocalGraph:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= P.shape[0]):
        raise InputError("label outside the co-occurrence matrix")
    return LocalGraph(len(labels), labels, P[np.ix_(labels, labels)])


def normalized_adjacency(A: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
    A_hat = A + np.eye(A.shape[0])
    d = A_hat.sum(axis=1) ** -0.5
    return d[:, None] * A_hat * d[None, :]


def gcn_forward(E: np.ndarray, A: np.ndarray, gcn_weights: Sequence[np.ndarray],
                nonlinearity: str = "relu", output_nonlinearity: str = "identity",
                cache: list | None = None) -> np.ndarray:
    """Propagate ``H <- sigma(A @ H @ U_l)`` through every layer.

    ``nonlinearity`` applies to hidden layers, ``output_nonlinearity`` to the
    last.  When ``cache`` is a list, ``(H_in, AH_in, Z)`` per layer is
    appended for the backward pass.
    """
    if not gcn_weights:
        raise ContractError("need at least one GCN layer")
    if A.shape != (E.shape[0], E.shape[0]):
        raise ContractError("adjacency does not match the number of nodes")
    H = E
    last = len(gcn_weights) - 1
    for l, U in enumerate(gcn_weights):
        if H.shape[1] != U.shape[0]:
            raise ContractError(f"layer {l}: input dim {H.shape[1]} != weight rows {U.shape[0]}")
        AH = A @ H
        Z = AH @ U
        act = NONLINEARITIES[output_nonlinearity if l == last else nonlinearity][0]
        H_next = act(Z)
        if not np.all(np.isfinite(H_next)):
            raise NumericError(f"non-finite activation in GCN layer {l}")
        if cache is not None:
            cache.append((H, AH, Z))
        H = H_next
    return H


def classifier_block(w: np.ndarray, num_predicates: int) -> np.ndarray:
    """Row-major ``R x d_cls/2`` view of a primitive classifier."""
    return np.asarray(w).reshape(num_predicates, -1)


def compose_classifier(W_prim: np.ndarray, s_index: int, t_index: int,
                       num_predicates: int) -> np.ndarray:
    """``[block(w_s) | block(w_t)]``, an ``R x d_cls`` classifier."""
    if s_index == t_index:
        raise ContractError("a relation needs two distinct instances")
    return np.concatenate([classifier_block(W_prim[s_index], num_predicates),
                           classifier_block(W_prim[t_index], num_predicates)], axis=1)


def relation_representation(f_u, f_s, f_t, psi_st: np.ndarray) -> np.ndarray:
    u = np.concatenate([np.ravel(f_u), np.ravel(f_s), np.ravel(f_t)])
    if psi_st.shape[1] != u.size:
        raise ContractError(f"psi_st expects {psi_st.shape[1]} inputs, got {u.size}")
    return psi_st @ u


def box_features(b_s, b_t, w_img: float, h_img: float) -> np.ndarray:
    """Normalised subject box, normalised object box and relative offsets (14 values)."""
    if w_img <= 0 or h_img <= 0:
        raise InputError("image dimensions must be positive")
    xs, ys, ws, hs = (float(v) for v in b_s)
    xt, yt, wt, ht = (float(v) for v in b_t)
    if min(ws, hs, wt, ht) <= 0:
        raise InputError("boxes need positive width and height")
    area = w_img * h_img

    def norm(x, y, w, h):
        return [x / w_img, y / h_img, (x + w) / w_img, (y + h) / h_img, w * h / area]

    rel = [(xs - xt) / wt, (ys - yt) / ht, np.log(ws / wt), np.log(hs / ht)]
    return np.array(norm(xs, ys, ws, hs) + norm(xt, yt, wt, ht) + rel)


def spatial_representation(b_s, b_t, w_img, h_img, psi_spt: np.ndarray) -> np.ndarray:
    return psi_spt @ box_features(b_s, b_t, w_img, h_img)


def score(W_st: np.ndarray, r_st: np.ndarray, f_spt: np.ndarray) -> np.ndarray:
    x = np.concatenate([np.ravel(r_st), np.ravel(f_spt)])
    if W_st.shape[1] != x.size:
        raise ContractError(f"classifier width {W_st.shape[1]} != feature length {x.size}")
    return W_st @ x


def flat_score(flat_classifier: np.ndarray, r_st: np.ndarray, f_spt: np.ndarray) -> np.ndarray:
    return score(flat_classifier, r_st, f_spt)


# ---------------------------------------------------------------------------
# the head


PARAM_NAMES = ("W_e", "psi_st", "psi_spt", "flat")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SecHead:
    """Learnable parameters plus the frozen statistics a forward pass needs."""

    def __init__(self, config: SecConfig, dictionary: ContextDictionary, P: np.ndarray,
                 bias: FrequencyBias | None = None, params: dict[str, np.ndarray] | None = None):
        c = config
        if dictionary.K != c.num_contexts:
            raise InputError(f"dictionary has K={dictionary.K}, config expects {c.num_contexts}")
        if dictionary.num_classes != c.num_classes:
            raise InputError("dictionary does not cover every class")
        if P.shape != (c.num_classes, c.num_classes):
            raise InputError("co-occurrence matrix shape does not match num_classes")
        self.config = c
        self.dictionary = dictionary
        self.contexts = dictionary.as_array()
        self.P = np.asarray(P, dtype=np.float64)
        self.bias = bias
        if params is None:
            params = self.init_params(c)
        self.params = params

    @staticmethod
    def init_params(c: SecConfig) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(c.seed)
        params = {"W_e": _uniform(rng, (c.d_e, c.num_contexts), c.num_contexts)}
        for l, (din, dout) in enumerate(c.gcn_dims()):
            params[f"U{l}"] = _uniform(rng, (din, dout), din)
        params["psi_st"] = _uniform(rng, (c.d_r, 3 * c.d_f), 3 * c.d_f)
        params["psi_spt"] = _uniform(rng, (c.d_spt, BOX_FEATURES), BOX_FEATURES)
        params["flat"] = _uniform(rng, (c.num_predicates, c.d_cls), c.d_cls)
        return params

    @property
    def gcn_weights(self) -> list[np.ndarray]:
        return [self.params[f"U{l}"] for l in range(self.config.gcn_layers)]

    @property
    def W_e(self) -> np.ndarray:
        return self.params["W_e"]

    def structured_params(self) -> list[str]:
        return ["W_e"] + [f"U{l}" for l in range(self.config.gcn_layers)]

    def copy(self) -> "SecHead":
        return SecHead(self.config, self.dictionary, self.P, self.bias,
                       {k: v.copy() for k, v in self.params.items()})

    def adjacency(self, labels) -> np.ndarray:
        """The per-instance adjacency of an image (literal or normalised)."""
        A = local_adjacency(self.P, labels).A
        return normalized_adjacency(A) if self.config.adjacency == "normalized" else A

    def class_adjacency(self, classes: np.ndarray, counts: np.ndarray) -> np.ndarray:
        """Adjacency over an image's distinct classes.

        Column ``v`` is weighted by the instance count of class ``v``, so
        propagating over distinct classes gives the same rows as
        propagating over instances.
        """
        A = self.P[np.ix_(classes, classes)] * counts[None, :]
        if self.config.adjacency == "normalized":
            A_hat = A + np.eye(len(classes))
            d = A_hat.sum(axis=1) ** -0.5
            A = d[:, None] * A_hat * d[None, :]
        return A

    def primitive_classifiers(self, labels, cache: dict | None = None) -> np.ndarray:
        """One primitive classifier row per instance.

        Rows depend only on the instance's class and the image's label
        multiset, so the GCN runs once per distinct class and rows are then
        copied out; instances of one class get bit-identical rows.
        """
        c = self.config
        labels = np.asarray(labels, dtype=np.int64)
        classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
        C = np.zeros((len(classes), c.num_contexts))
        C[np.arange(len(classes)), self.contexts[classes]] = 1.0
        E = embed_contexts(self.W_e, C)
        A = self.class_adjacency(classes, counts)
        layers = [] if cache is not None else None
        W_class = gcn_forward(E, A, self.gcn_weights, c.nonlinearity, c.output_nonlinearity, layers)
        W_prim = W_class[inverse.ravel()]
        if cache is not None:
            cache.update(C=C, A=A, layers=layers, W_class=W_class, inverse=inverse.ravel())
        return W_prim

    def forward(self, batch: "PairBatch", cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Structured and flat logits, each ``(m, R)``, for the batch's pairs."""
        c = self.config
        W_prim = self.primitive_classifiers(batch.labels, cache)
        r = batch.union_inputs @ self.params["psi_st"].T
        spt = batch.box_inputs @ self.params["psi_spt"].T
        X = np.concatenate([r, spt], axis=1)
        m, R, h = len(batch.subj), c.num_predicates, c.half
        Ws = W_prim[batch.subj].reshape(m, R, h)
        Wt = W_prim[batch.obj].reshape(m, R, h)
        structured = np.einsum("mrh,mh->mr", Ws, X[:, :h]) + np.einsum("mrh,mh->mr", Wt, X[:, h:])
        flat = X @ self.params["flat"].T
        if cache is not None:
            cache.update(X=X, Ws=Ws, Wt=Wt)
        if not (np.all(np.isfinite(structured)) and np.all(np.isfinite(flat))):
            raise NumericError("non-finite relation logits")
        return structured, flat


@dataclass
class PairBatch:
    """The candidate pairs of one image with their fixed inputs.

    ``union_inputs`` rows are ``[f_u; f_s; f_t]`` and ``box_inputs`` rows the
    14 box features; ``targets`` is optional (training only).
    """

    labels: np.ndarray
    subj: np.ndarray
    obj: np.ndarray
    union_inputs: np.ndarray
    box_inputs: np.ndarray
    targets: np.ndarray | None = None

    def __len__(self):
        return len(self.subj)


def make_pair_batch(sample: SceneSample, obj_feats: np.ndarray, union_feats: np.ndarray,
                    pairs: Sequence[tuple[int, int]], targets: Sequence[int] | None = None) -> PairBatch:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    S, T = pairs[:, 0], pairs[:, 1]
    if np.any(S == T):
        raise ContractError("self pairs are not relations")
    U = np.concatenate([union_feats[S, T], obj_feats[S], obj_feats[T]], axis=1)
    B = np.array([box_features(sample.boxes[s], sample.boxes[t], sample.width, sample.height)
                  for s, t in pairs]).reshape(-1, BOX_FEATURES)
    return PairBatch(np.asarray(sample.labels, dtype=np.int64), S, T, U, B,
                     None if targets is None else np.asarray(targets, dtype=np.int64))


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(s, t) for s in range(n) for t in range(n) if s != t]


def fused_logits(head: SecHead, batch: PairBatch, fusion: str = "structured",
                 weights: tuple[float, float] = (0.7, 0.3), use_bias: bool = False) -> np.ndarray:
    """Test-time logits: ``structured``, ``flat`` or ``weighted`` (w_flat, w_struct)."""
    structured, flat = head.forward(batch)
    if fusion == "structured":
        logits = structured
    elif fusion == "flat":
        logits = flat
    elif fusion == "weighted":
        logits = weights[0] * flat + weights[1] * structured
    else:
        raise InputError(f"unknown fusion {fusion!r}")
    if use_bias:
        if head.bias is None:
            raise InputError("bias fusion requested but the head has no bias table")
        rows = np.stack([head.bias.row(int(batch.labels[s]), int(batch.labels[t]))
                         for s, t in zip(batch.subj, batch.obj)]) if len(batch) else 0.0
        logits = fuse_bias(logits, rows, True)
    return logits


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
