"""Triplet Recall@K for predicate classification and scene graph tasks.

Prediction files are JSON lines, one image per line::

    {"image_id": "img0", "predictions": [
        {"subj": 0, "obj": 1, "predicate": 3, "score": 0.82,
         "subj_box": [x, y, w, h], "obj_box": [x, y, w, h],
         "subj_class": 5, "obj_class": 9}, ...]}

A ground-truth triple is hit when some prediction among the top ``k`` has the
same subject class, object class and predicate and matching boxes (equal
boxes for ``prdcls``/``sgcls``, IoU >= threshold on both boxes for
``sgdet``).  Per-image recalls are averaged over images.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import FeatureStore, SceneSample, read_jsonl
from .errors import CorpusFormatError, InputError
from .sec import SecHead, all_pairs, fused_logits, make_pair_batch, softmax

log = logging.getLogger(__name__)

TASKS = ("prdcls", "sgcls", "sgdet")
MODES = ("graph_constraint", "no_constraint")


@dataclass(frozen=True)
class Prediction:
    subj: int
    obj: int
    predicate: int
    score: float
    subj_box: tuple[float, float, float, float]
    obj_box: tuple[float, float, float, float]
    subj_class: int
    obj_class: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["subj_box"] = list(self.subj_box)
        d["obj_box"] = list(self.obj_box)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Prediction":
        return cls(int(d["subj"]), int(d["obj"]), int(d["predicate"]), float(d["score"]),
                   tuple(float(v) for v in d["subj_box"]), tuple(float(v) for v in d["obj_box"]),
                   int(d["subj_class"]), int(d["obj_class"]))


@dataclass(frozen=True)
class GTTriple:
    subj_class: int
    predicate: int
    obj_class: int
    subj_box: tuple[float, float, float, float]
    obj_box: tuple[float, float, float, float]


@dataclass
class EvalConfig:
    k_values: tuple[int, ...] = (50, 100)
    mode: str = "graph_constraint"
    task: str = "prdcls"
    iou_threshold: float = 0.5
    rel_per_pair: int | None = None   # no_constraint only: cap predicates per pair

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        if not self.k_values or min(self.k_values) <= 0:
            raise InputError("k values must be positive")
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.task not in TASKS:
            raise InputError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 0 < self.iou_threshold <= 1:
            raise InputError("iou_threshold must lie in (0, 1]")
        if self.rel_per_pair is not None and self.rel_per_pair < 1:
            raise InputError("rel_per_pair must be >= 1")


@dataclass
class RecallResult:
    task: str
    mode: str
    recall: dict[int, float]
    per_image: dict[int, list[float]] = field(repr=False)
    images: int
    excluded: int

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "mode": self.mode,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "images": self.images,
            "excluded_images": self.excluded,
        }
        return json.dumps(doc, indent=2) + "\n"


def iou(box_a, box_b) -> float:
    """Intersection over union of two ``[x, y, w, h]`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _rank_key(p: Prediction):
    return (-p.score, p.subj, p.obj, p.predicate)


def apply_graph_constraint(preds: Iterable[Prediction]) -> list[Prediction]:
    """Keep the best predicate per (subj, obj) pair; equal scores go to the smaller predicate id."""
    best: dict[tuple[int, int], Prediction] = {}
    for p in preds:
        key = (p.subj, p.obj)
        cur = best.get(key)
        if cur is None or (p.score, -p.predicate) > (cur.score, -cur.predicate):
            best[key] = p
    return [best[k] for k in sorted(best)]


def cap_per_pair(preds: Iterable[Prediction], cap: int) -> list[Prediction]:
    by_pair: dict[tuple[int, int], list[Prediction]] = {}
    for p in preds:
        by_pair.setdefault((p.subj, p.obj), []).append(p)
    out = []
    for key in sorted(by_pair):
        out.extend(sorted(by_pair[key], key=lambda p: (-p.score, p.predicate))[:cap])
    return out


def _matches(p: Prediction, g: GTTriple, task: str, thr: float) -> bool:
    if (p.subj_class, p.predicate, p.obj_class) != (g.subj_class, g.predicate, g.obj_class):
        return False
    if task == "sgdet":
        return iou(p.subj_box, g.subj_box) >= thr and iou(p.obj_box, g.obj_box) >= thr
    return tuple(p.subj_box) == tuple(g.subj_box) and tuple(p.obj_box) == tuple(g.obj_box)


def gt_triples(sample: SceneSample) -> list[GTTriple]:
    return [GTTriple(sample.labels[s], p, sample.labels[o],
                     tuple(sample.boxes[s]), tuple(sample.boxes[o]))
            for s, p, o in sample.relations]


def image_recall(preds: Sequence[Prediction], gt: Sequence[GTTriple], k: int,
                 config: EvalConfig) -> float:
    candidates = prepare(preds, config)
    top = sorted(candidates, key=_rank_key)[:k]
    hit = [False] * len(gt)
    for p in top:
        for j, g in enumerate(gt):
            if not hit[j] and _matches(p, g, config.task, config.iou_threshold):
                hit[j] = True
    return sum(hit) / len(gt)


def prepare(preds: Sequence[Prediction], config: EvalConfig) -> list[Prediction]:
    for p in preds:
        if not np.isfinite(p.score):
            raise InputError("prediction scores must be finite")
    if config.mode == "graph_constraint":
        return apply_graph_constraint(preds)
    if config.rel_per_pair is not None:
        return cap_per_pair(preds, config.rel_per_pair)
    return list(preds)


def recall_at_k(preds: dict[str, Sequence[Prediction]], gt: Sequence[SceneSample],
                config: EvalConfig) -> RecallResult:
    """Mean per-image Recall@K over images with at least one ground-truth triple."""
    per_image: dict[int, list[float]] = {k: [] for k in config.k_values}
    excluded = 0
    for sample in gt:
        triples = gt_triples(sample)
        if not triples:
            excluded += 1
            continue
        image_preds = preds.get(sample.image_id, [])
        for k in config.k_values:
            per_image[k].append(image_recall(image_preds, triples, k, config))
    if excluded:
        log.warning("%d image(s) without ground-truth relations excluded", excluded)
    recall = {k: (float(np.mean(v)) if v else 0.0) for k, v in per_image.items()}
    return RecallResult(config.task, config.mode, recall, per_image, len(gt) - excluded, excluded)


# ---------------------------------------------------------------------------
# producing predictions


def predict_image(head: SecHead, sample: SceneSample, features: FeatureStore,
                  fusion: str = "structured", use_bias: bool = False,
                  weights: tuple[float, float] = (0.7, 0.3)) -> list[Prediction]:
    """Score every ordered object pair with every non-background predicate.

    A triple's score is the predicate probability times both objects'
    detection scores (1.0 for ground-truth objects).
    """
    n = sample.num_objects
    if n < 2:
        return []
    obj, uni = features.get(sample)
    pairs = all_pairs(n)
    batch = make_pair_batch(sample, obj, uni, pairs)
    probs = softmax(fused_logits(head, batch, fusion, weights, use_bias))
    out = []
    for row, (s, t) in enumerate(pairs):
        conf = sample.object_score(s) * sample.object_score(t)
        for p in range(1, probs.shape[1]):
            out.append(Prediction(s, t, p, float(probs[row, p] * conf),
                                  tuple(sample.boxes[s]), tuple(sample.boxes[t]),
                                  sample.labels[s], sample.labels[t]))
    return out


def read_predictions(path) -> dict[str, list[Prediction]]:
    out: dict[str, list[Prediction]] = {}
    for line_no, doc in read_jsonl(path):
        try:
            out.setdefault(str(doc["image_id"]), []).extend(
                Prediction.from_json(p) for p in doc["predictions"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(path, line_no, f"malformed prediction record ({exc!r})") from None
    return out


def write_predictions(path, preds: dict[str, Sequence[Prediction]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, items in preds.items():
            doc = {"image_id": image_id, "predictions": [p.to_json() for p in items]}
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
