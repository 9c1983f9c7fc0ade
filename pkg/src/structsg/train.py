"""Joint training of the structured and flat relation branches.

The objective for one batch is the *sum* over candidate pairs of
``w_flat * CE(flat) + w_struct * CE(structured)``; gradients are derived by
hand through the scoring, composition, GCN and embedding steps.  Plain SGD
with per-group learning rates updates the parameters.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import FeatureStore, SceneSample, load_arrays, save_arrays
from .errors import InputError, NumericError
from .hsa import ContextDictionary
from .sec import (NONLINEARITIES, FrequencyBias, PairBatch, SecConfig, SecHead,
                  make_pair_batch)

CHECKPOINT_FORMAT = "structsg-sec-head"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_structured: float = 1e-3
    lr_unstructured: float = 1e-2
    lr_shared: float | None = None   # psi_st / psi_spt; falls back to lr_structured
    branch_weights: tuple[float, float] = (0.7, 0.3)  # (w_flat, w_struct)
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    negative_pair_ratio: float = 1.0
    shuffle: bool = True
    momentum: float = 0.0

    def __post_init__(self):
        self.branch_weights = tuple(float(w) for w in self.branch_weights)
        lrs = [self.lr_structured, self.lr_unstructured]
        if self.lr_shared is not None:
            lrs.append(self.lr_shared)
        if any(lr <= 0 for lr in lrs):
            raise InputError("learning rates must be positive")
        w = self.branch_weights
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise InputError("branch weights must be two nonnegative numbers summing to 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        if self.negative_pair_ratio < 0:
            raise InputError("negative_pair_ratio must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_weights"] = list(self.branch_weights)
        return d


@dataclass
class LossReport:
    step: int
    epoch: int
    flat_loss: float
    structured_loss: float
    combined_loss: float
    pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def pair_loss(logits: np.ndarray, gt_predicate: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if not 0 <= gt_predicate < logits.size:
        raise InputError(f"target {gt_predicate} outside [0, {logits.size})")
    z = logits - logits.max()
    lse = np.log(np.exp(z).sum())
    grad = np.exp(z - lse)
    loss = lse - z[gt_predicate]
    grad[gt_predicate] -= 1.0
    return float(loss), grad


def _cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    losses = lse - z[rows, targets]
    grad = np.exp(z - lse[:, None])
    grad[rows, targets] -= 1.0
    return losses, grad


def _image_backward(head: SecHead, batch: PairBatch, weights, grads: dict) -> tuple[float, float]:
    c = head.config
    w_flat, w_struct = weights
    cache: dict = {}
    structured, flat = head.forward(batch, cache)
    ls, gS = _cross_entropy(structured, batch.targets)
    lf, gF = _cross_entropy(flat, batch.targets)
    gS *= w_struct
    gF *= w_flat

    X, Ws, Wt = cache["X"], cache["Ws"], cache["Wt"]
    h, m = c.half, len(batch)
    grads["flat"] += gF.T @ X
    dX = gF @ head.params["flat"]
    dX[:, :h] += np.einsum("mrh,mr->mh", Ws, gS)
    dX[:, h:] += np.einsum("mrh,mr->mh", Wt, gS)
    grads["psi_st"] += dX[:, :c.d_r].T @ batch.union_inputs
    grads["psi_spt"] += dX[:, c.d_r:].T @ batch.box_inputs

    # rows of W_prim are copies of per-class rows, so gradients gather by class
    inv = cache["inverse"]
    dW_class = np.zeros_like(cache["W_class"])
    np.add.at(dW_class, inv[batch.subj], np.einsum("mr,mh->mrh", gS, X[:, :h]).reshape(m, -1))
    np.add.at(dW_class, inv[batch.obj], np.einsum("mr,mh->mrh", gS, X[:, h:]).reshape(m, -1))

    A = cache["A"]
    dH = dW_class
    last = c.gcn_layers - 1
    for l in range(last, -1, -1):
        _, AH, Z = cache["layers"][l]
        name = c.output_nonlinearity if l == last else c.nonlinearity
        dZ = dH * NONLINEARITIES[name][1](Z)
        grads[f"U{l}"] += AH.T @ dZ
        dH = A.T @ (dZ @ head.params[f"U{l}"].T)
    grads["W_e"] += dH.T @ cache["C"]
    return float(lf.sum()), float(ls.sum())


def backward(head: SecHead, batch: Sequence[PairBatch],
             branch_weights: tuple[float, float] = (0.7, 0.3)) -> tuple[dict, dict]:
    """Gradients of the summed batch loss for every parameter.

    Images are reduced one after another in batch order so the result does
    not depend on how pairs are grouped inside numpy kernels.  Returns
    ``(grads, stats)`` where ``stats`` holds the per-branch loss sums and the
    pair count.
    """
    if not len(batch):
        raise InputError("empty batch")
    grads = {k: np.zeros_like(v) for k, v in head.params.items()}
    flat_sum = struct_sum = 0.0
    pairs = 0
    for b in batch:
        if b.targets is None:
            raise InputError("training batches need targets")
        if not len(b):
            continue
        image_grads = {k: np.zeros_like(v) for k, v in head.params.items()}
        lf, ls = _image_backward(head, b, branch_weights, image_grads)
        for k in grads:
            grads[k] += image_grads[k]
        flat_sum += lf
        struct_sum += ls
        pairs += len(b)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    return grads, {"flat": flat_sum, "structured": struct_sum, "pairs": pairs}


def batch_loss(head: SecHead, batch: Sequence[PairBatch],
               branch_weights: tuple[float, float] = (0.7, 0.3)) -> float:
    w_flat, w_struct = branch_weights
    total = 0.0
    for b in batch:
        if not len(b):
            continue
        structured, flat = head.forward(b)
        total += w_flat * _cross_entropy(flat, b.targets)[0].sum()
        total += w_struct * _cross_entropy(structured, b.targets)[0].sum()
    return float(total)


# ---------------------------------------------------------------------------
# training examples


def _image_rng(seed: int, epoch: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(image_id.encode("utf-8"))])


def training_pairs(sample: SceneSample, ratio: float, rng: np.random.Generator
                   ) -> tuple[list[tuple[int, int]], list[int]]:
    """Annotated pairs with their predicates plus sampled background pairs (label 0)."""
    pairs = [(s, o) for s, _, o in sample.relations]
    targets = [p for _, p, _ in sample.relations]
    related = set(pairs)
    n = sample.num_objects
    free = [(s, t) for s in range(n) for t in range(n) if s != t and (s, t) not in related]
    k = min(len(free), int(round(ratio * len(pairs))))
    if k:
        pick = rng.choice(len(free), size=k, replace=False)
        for i in sorted(pick):
            pairs.append(free[i])
            targets.append(0)
    return pairs, targets


def build_batch(sample: SceneSample, features: FeatureStore, ratio: float,
                rng: np.random.Generator) -> PairBatch:
    pairs, targets = training_pairs(sample, ratio, rng)
    obj, uni = features.get(sample)
    return make_pair_batch(sample, obj, uni, pairs, targets)


def _lr_for(name: str, head: SecHead, config: TrainConfig) -> float:
    if name == "flat":
        return config.lr_unstructured
    if name in ("psi_st", "psi_spt"):
        return config.lr_shared if config.lr_shared is not None else config.lr_structured
    return config.lr_structured


def train(head: SecHead, samples: Sequence[SceneSample], features: FeatureStore,
          config: TrainConfig, on_step: Callable[[LossReport], None] | None = None
          ) -> tuple[SecHead, list[LossReport]]:
    """Run SGD epochs over ``samples``; returns a trained copy and the loss log.

    Background pairs are drawn per (seed, epoch, image id), so identical
    images see identical pairs within an epoch regardless of order.
    """
    head = head.copy()
    reports: list[LossReport] = []
    velocity = {k: np.zeros_like(v) for k, v in head.params.items()}
    order_rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(samples)) if config.shuffle else np.arange(len(samples))
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            batch = [build_batch(s, features, config.negative_pair_ratio,
                                 _image_rng(config.seed, epoch, s.image_id)) for s in chunk]
            if not sum(len(b) for b in batch):
                continue
            try:
                grads, stats = backward(head, batch, config.branch_weights)
            except NumericError as exc:
                raise NumericError(f"training diverged at step {step}: {exc}") from None
            n = stats["pairs"]
            w_flat, w_struct = config.branch_weights
            report = LossReport(step, epoch, stats["flat"] / n, stats["structured"] / n,
                                (w_flat * stats["flat"] + w_struct * stats["structured"]) / n, n)
            if not np.isfinite(report.combined_loss):
                raise NumericError(f"training diverged at step {step}: non-finite loss")
            for k, g in grads.items():
                lr = _lr_for(k, head, config)
                if config.momentum:
                    velocity[k] = config.momentum * velocity[k] + g
                    g = velocity[k]
                head.params[k] = head.params[k] - lr * g
            reports.append(report)
            if on_step is not None:
                on_step(report)
            step += 1
    return head, reports


# ---------------------------------------------------------------------------
# gradient verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)`` over the compared entries.

    Normalising by the largest magnitude keeps entries whose true gradient is
    near zero from dominating through finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.max(np.abs(a - n)) if a.size else 0.0
    if diff == 0.0:
        return 0.0
    return float(diff / max(np.max(np.abs(a)), np.max(np.abs(n))))


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict[str, float]
    checked: int
    tolerance: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def grad_check(head: SecHead, batch: Sequence[PairBatch], tolerance: float = 1e-4,
               branch_weights: tuple[float, float] = (0.7, 0.3), samples_per_param: int = 24,
               step: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random subsample."""
    grads, _ = backward(head, batch, branch_weights)
    rng = np.random.default_rng(seed)
    probe = head.copy()
    analytic, numeric = {}, {}
    for name in sorted(probe.params):
        theta = probe.params[name]
        flat_idx = rng.choice(theta.size, size=min(samples_per_param, theta.size), replace=False)
        a_vals, n_vals = [], []
        for i in np.sort(flat_idx):
            idx = np.unravel_index(i, theta.shape)
            orig = theta[idx]
            theta[idx] = orig + step
            up = batch_loss(probe, batch, branch_weights)
            theta[idx] = orig - step
            down = batch_loss(probe, batch, branch_weights)
            theta[idx] = orig
            n_vals.append((up - down) / (2 * step))
            a_vals.append(grads[name][idx])
        analytic[name] = np.array(a_vals)
        numeric[name] = np.array(n_vals)
    all_a = np.concatenate(list(analytic.values()))
    all_n = np.concatenate(list(numeric.values()))
    overall = relative_error(all_a, all_n)
    scale = max(np.max(np.abs(all_a)), np.max(np.abs(all_n)), np.finfo(float).tiny)
    per = {k: float(np.max(np.abs(analytic[k] - numeric[k])) / scale) for k in analytic}
    return GradCheckReport(overall, per, int(all_a.size), tolerance, analytic, numeric)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, head: SecHead, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": head.config.to_dict(),
        "dictionary": {"K": head.dictionary.K,
                       "assignment": [int(k) for k in head.contexts]},
        "param_shapes": {k: list(v.shape) for k, v in sorted(head.params.items())},
        "has_bias": head.bias is not None,
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in head.params.items()}
    arrays["P"] = head.P
    arrays["header"] = np.array(json.dumps(doc, sort_keys=True))
    if head.bias is not None:
        arrays.update(head.bias.to_arrays())
    save_arrays(path, arrays)


def load_checkpoint(path) -> tuple[SecHead, dict]:
    arrays = load_arrays(path)
    try:
        doc = json.loads(str(arrays["header"]))
    except (KeyError, json.JSONDecodeError):
        raise InputError(f"{path}: not a head checkpoint (missing header)") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path}: unexpected checkpoint format {doc.get('format')!r}")
    config = SecConfig(**doc["config"])
    assignment = doc["dictionary"]["assignment"]
    dictionary = ContextDictionary(int(doc["dictionary"]["K"]),
                                   {c: int(k) for c, k in enumerate(assignment)})
    params = {k[len("param/"):]: v.astype(np.float64) for k, v in arrays.items()
              if k.startswith("param/")}
    for k, shape in doc["param_shapes"].items():
        if k not in params or list(params[k].shape) != shape:
            raise InputError(f"{path}: parameter {k} missing or misshapen")
    bias = FrequencyBias.from_arrays(arrays, config.num_predicates) if doc["has_bias"] else None
    return SecHead(config, dictionary, arrays["P"], bias, params), doc.get("meta", {})


def write_log(path, reports: Iterable[LossReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
