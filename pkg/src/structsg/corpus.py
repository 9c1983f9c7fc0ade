"""Annotated scene samples, vocabularies and their on-disk formats.

Corpus files are JSON lines, one image per line::

    {"image_id": "img0", "width": 640, "height": 480,
     "objects": [{"class": 3, "box": [x, y, w, h]}, ...],
     "relations": [{"subj": 0, "pred": 2, "obj": 1}, ...]}

Boxes are pixel units with a top-left origin.  Objects may carry an optional
``"score"`` (detection confidence, default 1.0) when the file holds external
detections instead of ground truth.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusFormatError, InputError

# fixed zip timestamp so containers are byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class RelationVocab:
    num_classes: int
    num_predicates: int
    class_names: tuple[str, ...] | None = None
    predicate_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_classes < 1 or self.num_predicates < 1:
            raise InputError("vocab sizes must be positive integers")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise InputError("class_names length does not match num_classes")
        if self.predicate_names is not None and len(self.predicate_names) != self.num_predicates:
            raise InputError("predicate_names length does not match num_predicates")

    def class_name(self, c: int) -> str:
        return self.class_names[c] if self.class_names else str(c)

    def to_json(self) -> dict:
        doc = {"num_classes": self.num_classes, "num_predicates": self.num_predicates}
        if self.class_names is not None:
            doc["class_names"] = list(self.class_names)
        if self.predicate_names is not None:
            doc["predicate_names"] = list(self.predicate_names)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RelationVocab":
        try:
            n, r = doc["num_classes"], doc["num_predicates"]
        except (KeyError, TypeError) as exc:
            raise InputError(f"vocab is missing field {exc}") from None
        if not isinstance(n, int) or not isinstance(r, int):
            raise InputError("vocab sizes must be integers")
        names = doc.get("class_names")
        preds = doc.get("predicate_names")
        return cls(n, r, tuple(names) if names is not None else None,
                   tuple(preds) if preds is not None else None)


@dataclass
class SceneSample:
    """One annotated image: instances, boxes and ground-truth relations."""

    image_id: str
    width: int
    height: int
    labels: list[int]
    boxes: list[tuple[float, float, float, float]]
    relations: list[tuple[int, int, int]] = field(default_factory=list)
    scores: list[float] | None = None

    @property
    def num_objects(self) -> int:
        return len(self.labels)

    def object_score(self, i: int) -> float:
        return 1.0 if self.scores is None else self.scores[i]

    def gt_triples(self):
        """Yield ``(subj_idx, pred, obj_idx)`` for each annotated relation."""
        yield from self.relations

    def validate(self, vocab: RelationVocab) -> None:
        n = len(self.labels)
        if len(self.boxes) != n:
            raise InputError(f"sample {self.image_id!r}: boxes/objects length mismatch")
        for i, c in enumerate(self.labels):
            if not 0 <= c < vocab.num_classes:
                raise InputError(
                    f"sample {self.image_id!r}: objects[{i}].class={c} outside [0, {vocab.num_classes})")
        for k, (s, p, o) in enumerate(self.relations):
            if not 0 <= p < vocab.num_predicates:
                raise InputError(
                    f"sample {self.image_id!r}: relations[{k}].pred={p} outside [0, {vocab.num_predicates})")
            for name, idx in (("subj", s), ("obj", o)):
                if not 0 <= idx < n:
                    raise InputError(
                        f"sample {self.image_id!r}: relations[{k}].{name}={idx} is not an object index")

    def to_json(self) -> dict:
        objects = []
        for i, (c, b) in enumerate(zip(self.labels, self.boxes)):
            obj = {"class": int(c), "box": [_num(v) for v in b]}
            if self.scores is not None:
                obj["score"] = float(self.scores[i])
            objects.append(obj)
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "objects": objects,
            "relations": [{"subj": s, "pred": p, "obj": o} for s, p, o in self.relations],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSample":
        image_id = str(doc["image_id"])
        labels, boxes, scores = [], [], []
        for obj in doc["objects"]:
            c = obj["class"]
            if not isinstance(c, int) or isinstance(c, bool):
                raise InputError(f"sample {image_id!r}: object class must be an integer")
            box = obj["box"]
            if len(box) != 4:
                raise InputError(f"sample {image_id!r}: box must have 4 numbers")
            labels.append(c)
            boxes.append(tuple(float(v) for v in box))
            scores.append(obj.get("score"))
        has_scores = any(s is not None for s in scores)
        rels = [(int(r["subj"]), int(r["pred"]), int(r["obj"])) for r in doc.get("relations", [])]
        return cls(
            image_id=image_id,
            width=int(doc["width"]),
            height=int(doc["height"]),
            labels=labels,
            boxes=boxes,
            relations=rels,
            scores=[1.0 if s is None else float(s) for s in scores] if has_scores else None,
        )


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def read_jsonl(path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, line_no, f"invalid JSON ({exc.msg})") from None


def read_corpus(path, vocab: RelationVocab | None = None) -> list[SceneSample]:
    samples = []
    for line_no, doc in read_jsonl(path):
        try:
            sample = SceneSample.from_json(doc)
        except InputError as exc:
            raise CorpusFormatError(path, line_no, str(exc)) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(path, line_no, f"malformed record ({exc!r})") from None
        if vocab is not None:
            try:
                sample.validate(vocab)
            except InputError as exc:
                raise CorpusFormatError(path, line_no, str(exc)) from None
        samples.append(sample)
    return samples


def write_corpus(path, samples: Iterable[SceneSample]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def read_vocab(path) -> RelationVocab:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    return RelationVocab.from_json(doc)


def write_vocab(path, vocab: RelationVocab) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), indent=2) + "\n", encoding="utf-8")


def validate_corpus(samples: Sequence[SceneSample], vocab: RelationVocab) -> None:
    for s in samples:
        s.validate(vocab)


# ---------------------------------------------------------------------------
# array containers


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write an ``.npz``-compatible zip with a fixed timestamp.

    ``numpy.savez`` stamps entries with the current time; this writer does
    not, so reruns produce identical bytes.  ``numpy.load`` reads the result.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name], order="C"), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise InputError(f"{path}: not a readable array container ({exc})") from None


class FeatureStore:
    """Region features per image.

    ``objects[image_id]`` is an ``(n, d_f)`` array indexed by object index;
    ``unions[image_id]`` is ``(n, n, d_f)`` where entry ``[s, t]`` is the
    union-box feature of the ordered pair (pair index ``s * n + t``).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.objects: dict[str, np.ndarray] = {}
        self.unions: dict[str, np.ndarray] = {}

    def add(self, image_id: str, objects: np.ndarray, unions: np.ndarray) -> None:
        n = objects.shape[0]
        if objects.shape != (n, self.dim) or unions.shape != (n, n, self.dim):
            raise InputError(f"features for {image_id!r} have inconsistent shapes")
        self.objects[image_id] = objects
        self.unions[image_id] = unions

    def get(self, sample: SceneSample) -> tuple[np.ndarray, np.ndarray]:
        try:
            obj, uni = self.objects[sample.image_id], self.unions[sample.image_id]
        except KeyError:
            raise InputError(f"no features for image {sample.image_id!r}") from None
        if obj.shape[0] != sample.num_objects:
            raise InputError(f"features for {sample.image_id!r} cover {obj.shape[0]} objects, "
                             f"sample has {sample.num_objects}")
        return obj, uni

    def save(self, path) -> None:
        arrays = {"dim": np.array(self.dim, dtype=np.int64)}
        for k in self.objects:
            arrays[f"obj/{k}"] = self.objects[k]
            arrays[f"union/{k}"] = self.unions[k]
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path) -> "FeatureStore":
        arrays = load_arrays(path)
        if "dim" not in arrays:
            raise InputError(f"{path}: feature container lacks 'dim'")
        store = cls(int(arrays["dim"]))
        for name, arr in arrays.items():
            if name.startswith("obj/"):
                key = name[4:]
                store.add(key, arr.astype(np.float64), arrays[f"union/{key}"].astype(np.float64))
        return store
