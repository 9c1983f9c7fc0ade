"""Command-line entry point: ``structsg <command> [options]``.

Exit codes: 0 success, 2 usage or contradictory configuration, 3 unreadable
or malformed input, 4 numeric failure.  Every command writes
``manifest.json`` next to its outputs; the ``timing`` field is the only part
that changes between identical reruns.

Option values come from, in order of precedence: command-line flags, the
matching section of ``--config`` (a JSON document with optional ``synth``,
``stats``, ``cluster``, ``sec``, ``train`` and ``eval`` objects), then the
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import FeatureStore, read_corpus, read_vocab, write_corpus, write_vocab
from .errors import ContractError, InputError, NumericError
from .evaluate import EvalConfig, read_predictions, recall_at_k, write_predictions
from .hierarchy import FORMATS, export_hierarchy, parse_hierarchy
from .hsa import ContextDictionary, hsa_cluster
from .kg import build_kg, conditional_probability, cooccurrence_counts
from .pipeline import init_head, predict
from .sec import SecConfig
from .synth import SynthConfig, generate
from .train import TrainConfig, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger("structsg")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return doc


def _merge(cls, section: dict, flags: dict, fixed: dict | None = None):
    """Build dataclass ``cls`` from defaults < config section < flags."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} option(s) in config: {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in flags.items() if v is not None and k in names})
    values.update(fixed or {})
    try:
        return cls(**values)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _flags(args, names) -> dict:
    return {n: getattr(args, n, None) for n in names}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list[str],
              seed, started: float, started_wall: datetime) -> None:
    _write_json(out_dir / "manifest.json", {
        "command": command,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
        "seed": seed,
        "tool_version": __version__,
        "timing": {
            "started_utc": started_wall.isoformat(timespec="seconds"),
            "wall_time_s": round(time.perf_counter() - started, 3),
        },
    })


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


SYNTH_FLAGS = ("num_classes", "num_clusters", "num_predicates", "images", "test_images",
               "instances", "tail_exponent", "d_f", "noise", "seed", "pattern", "exact_repeats")


def cmd_synth(args, cfg) -> dict:
    config = _merge(SynthConfig, cfg.get("synth", {}), _flags(args, SYNTH_FLAGS))
    corpus = generate(config)
    out = _out_dir(args.out)
    write_corpus(out / "train.jsonl", corpus.samples)
    outputs = ["train.jsonl", "vocab.json", "features.npz", "truth.json"]
    if corpus.test_samples:
        write_corpus(out / "test.jsonl", corpus.test_samples)
        outputs.append("test.jsonl")
    write_vocab(out / "vocab.json", corpus.vocab)
    corpus.features.save(out / "features.npz")
    _write_json(out / "truth.json", corpus.truth_json())
    return {"config": {"synth": config.to_dict()}, "outputs": outputs, "seed": config.seed,
            "inputs": {}}


def _check_keys(section: dict, allowed, name: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise UsageError(f"unknown {name} option(s) in config: {sorted(unknown)}")


def cmd_stats(args, cfg) -> dict:
    section = cfg.get("stats", {})
    _check_keys(section, ("cooccurrence_unit",), "stats")
    unit = args.cooccurrence_unit or section.get("cooccurrence_unit", "instance")
    vocab = read_vocab(_require(args.vocab, "vocab"))
    samples = read_corpus(_require(args.corpus, "corpus"), vocab)
    T = cooccurrence_counts(samples, vocab, unit)
    P = conditional_probability(T)
    kg = build_kg(samples, vocab)
    out = _out_dir(args.out)
    np.save(out / "T.npy", T)
    np.save(out / "P.npy", P)
    _write_json(out / "kg.json", {
        "num_classes": vocab.num_classes,
        "num_predicates": vocab.num_predicates,
        "triples": [[s, p, o, c] for (s, p, o), c in sorted(kg.triple_counts.items())],
        "degrees": [list(kg.degrees(n)) for n in range(vocab.num_classes)],
    })
    return {"config": {"stats": {"cooccurrence_unit": unit}},
            "outputs": ["T.npy", "P.npy", "kg.json"], "seed": None,
            "inputs": {"corpus": args.corpus, "vocab": args.vocab}}


def cmd_cluster(args, cfg) -> dict:
    section = dict(cfg.get("cluster", {}))
    _check_keys(section, ("K", "format", "update", "float"), "cluster")
    K = args.K if args.K is not None else section.get("K")
    if K is None:
        raise UsageError("cluster needs K (--K or config cluster.K)")
    fmt = args.format or section.get("format", "nested-json")
    update = args.update or section.get("update", "incremental")
    exact = not (args.float or section.get("float", False))
    if fmt not in FORMATS + ("both",):
        raise UsageError(f"unknown format {fmt!r}")
    vocab = read_vocab(_require(args.vocab, "vocab"))
    if not isinstance(K, int) or not 1 <= K <= vocab.num_classes:
        raise UsageError(f"K must be an integer in [1, {vocab.num_classes}], got {K!r}")
    samples = read_corpus(_require(args.corpus, "corpus"), vocab)
    kg = build_kg(samples, vocab)
    dictionary, tree = hsa_cluster(kg, K, exact=exact, update=update)
    out = _out_dir(args.out)
    (out / "dictionary.json").write_text(dictionary.to_json(), encoding="utf-8")
    outputs = ["dictionary.json"]
    if fmt in ("nested-json", "both"):
        (out / "hierarchy.json").write_text(export_hierarchy(tree, "nested-json", vocab.class_names),
                                            encoding="utf-8")
        outputs.append("hierarchy.json")
    if fmt in ("newick", "both"):
        (out / "hierarchy.nwk").write_text(export_hierarchy(tree, "newick"), encoding="utf-8")
        outputs.append("hierarchy.nwk")
    return {"config": {"cluster": {"K": K, "format": fmt, "update": update, "exact": exact}},
            "outputs": outputs, "seed": None,
            "inputs": {"corpus": args.corpus, "vocab": args.vocab}}


def cmd_export_hierarchy(args, cfg) -> dict:
    src = _require(args.hierarchy, "hierarchy")
    tree = parse_hierarchy(src.read_text(encoding="utf-8"), args.source_format)
    names = read_vocab(args.vocab).class_names if args.vocab else None
    text = export_hierarchy(tree, args.target_format, names)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text, encoding="utf-8")
    return {"config": {"from": args.source_format, "to": args.target_format},
            "outputs": [out_path.name], "seed": None, "out_dir": out_path.parent,
            "inputs": {"hierarchy": args.hierarchy, "vocab": args.vocab}}


SEC_FLAGS = ("d_e", "d_cls", "d_r", "gcn_layers", "gcn_hidden", "nonlinearity",
             "output_nonlinearity", "adjacency")
TRAIN_FLAGS = ("epochs", "batch_size", "lr_structured", "lr_unstructured", "lr_shared",
               "branch_weights", "negative_pair_ratio", "momentum", "seed")


def cmd_train(args, cfg) -> dict:
    tcfg_flags = _flags(args, TRAIN_FLAGS)
    if args.no_shuffle:
        tcfg_flags["shuffle"] = False
    tconfig = _merge(TrainConfig, cfg.get("train", {}), tcfg_flags)
    sec_section = dict(cfg.get("sec", {}))
    unit = sec_section.pop("cooccurrence_unit", "instance")
    epsilon = sec_section.pop("bias_epsilon", 1e-3)
    for fixed in ("num_classes", "num_predicates", "num_contexts", "d_f", "seed"):
        if fixed in sec_section:
            raise UsageError(f"sec.{fixed} is derived from the inputs and cannot be configured")
    sec_opts = {k: v for k, v in sec_section.items()}
    sec_opts.update({k: v for k, v in _flags(args, SEC_FLAGS).items() if v is not None})
    unknown = set(sec_opts) - {f.name for f in fields(SecConfig)}
    if unknown:
        raise UsageError(f"unknown sec option(s): {sorted(unknown)}")

    vocab = read_vocab(_require(args.vocab, "vocab"))
    samples = read_corpus(_require(args.corpus, "corpus"), vocab)
    features = FeatureStore.load(_require(args.features, "features"))
    dictionary = ContextDictionary.from_json(_require(args.dictionary, "dictionary").read_text("utf-8"))
    if dictionary.num_classes != vocab.num_classes:
        raise UsageError("dictionary and vocab disagree on the number of classes")
    head = init_head(samples, vocab, dictionary, features.dim, unit, epsilon,
                     seed=tconfig.seed, **sec_opts)
    trained, reports = train(head, samples, features, tconfig)
    out = _out_dir(args.out)
    save_checkpoint(out / "checkpoint.npz", trained,
                    {"train": tconfig.to_dict(), "cooccurrence_unit": unit, "bias_epsilon": epsilon})
    write_log(out / "train_log.jsonl", reports)
    if reports:
        last = reports[-1]
        log.info("trained %d steps; last combined loss %.4f", len(reports), last.combined_loss)
    return {"config": {"train": tconfig.to_dict(), "sec": trained.config.to_dict()},
            "outputs": ["checkpoint.npz", "train_log.jsonl"], "seed": tconfig.seed,
            "inputs": {"corpus": args.corpus, "vocab": args.vocab, "features": args.features,
                       "dictionary": args.dictionary}}


EVAL_FLAGS = ("task", "mode", "iou_threshold", "rel_per_pair")


def cmd_eval(args, cfg) -> dict:
    section = dict(cfg.get("eval", {}))
    fusion = args.fusion or section.pop("fusion", "structured")
    use_bias = args.bias if args.bias is not None else section.pop("use_bias", False)
    fusion_weights = section.pop("fusion_weights", None)
    section.pop("fusion", None)
    section.pop("use_bias", None)
    flags = _flags(args, EVAL_FLAGS)
    if args.k:
        flags["k_values"] = tuple(args.k)
    config = _merge(EvalConfig, section, flags)

    if (args.predictions is None) == (args.checkpoint is None):
        raise UsageError("give exactly one of --predictions or --checkpoint")
    gt = read_corpus(_require(args.corpus, "corpus"))
    inputs = {"corpus": args.corpus, "predictions": args.predictions,
              "checkpoint": args.checkpoint, "features": args.features,
              "detections": args.detections}
    out = _out_dir(args.out)
    outputs = ["metrics.json"]
    if args.predictions is not None:
        preds = read_predictions(_require(args.predictions, "predictions"))
    else:
        if args.features is None:
            raise UsageError("--checkpoint needs --features")
        if config.task != "prdcls" and args.detections is None:
            raise UsageError(f"task {config.task} needs --detections (objects are not given)")
        head, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        features = FeatureStore.load(_require(args.features, "features"))
        scenes = read_corpus(_require(args.detections, "detections")) if args.detections else gt
        weights = fusion_weight_pair(args.fusion_weights or fusion_weights)
        preds = predict(head, scenes, features, fusion, use_bias, weights)
        if args.save_predictions:
            write_predictions(out / "predictions.jsonl", preds)
            outputs.append("predictions.jsonl")
    result = recall_at_k(preds, gt, config)
    (out / "metrics.json").write_text(result.to_json(), encoding="utf-8")
    for k, v in sorted(result.recall.items()):
        print(f"R@{k} = {v:.4f}")
    return {"config": {"eval": {"k_values": list(config.k_values), "mode": config.mode,
                                "task": config.task, "iou_threshold": config.iou_threshold,
                                "rel_per_pair": config.rel_per_pair, "fusion": fusion,
                                "use_bias": use_bias}},
            "outputs": outputs, "seed": None, "inputs": inputs}


def fusion_weight_pair(w) -> tuple[float, float]:
    w = w or (0.7, 0.3)
    if len(w) != 2 or abs(sum(w) - 1) > 1e-12 or min(w) < 0:
        raise UsageError("fusion weights must be two nonnegative numbers summing to 1")
    return float(w[0]), float(w[1])


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structsg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted clusters")
    common(p)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--num-clusters", type=int)
    p.add_argument("--num-predicates", type=int, help="including background predicate 0")
    p.add_argument("--images", type=int)
    p.add_argument("--test-images", type=int)
    p.add_argument("--instances", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--tail-exponent", type=float)
    p.add_argument("--d-f", type=int, help="feature dimension")
    p.add_argument("--noise", type=float)
    p.add_argument("--pattern", choices=("sampled", "exact"))
    p.add_argument("--exact-repeats", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="co-occurrence matrices and knowledge-graph counts")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cooccurrence-unit", choices=("instance", "image"))
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cluster", help="agglomerate classes into K contexts")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--format", choices=FORMATS + ("both",))
    p.add_argument("--update", choices=("incremental", "full"))
    p.add_argument("--float", action="store_true", help="double precision instead of exact rationals")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("export-hierarchy", help="convert a saved merge hierarchy")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--from", dest="source_format", choices=FORMATS, default="nested-json")
    p.add_argument("--to", dest="target_format", choices=FORMATS, default="newick")
    p.add_argument("--vocab", help="attach class names (nested-json output only)")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_export_hierarchy)

    p = sub.add_parser("train", help="train a relation head")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--dictionary", required=True)
    p.add_argument("--d-e", type=int)
    p.add_argument("--d-cls", type=int)
    p.add_argument("--d-r", type=int)
    p.add_argument("--gcn-layers", type=int)
    p.add_argument("--gcn-hidden", type=int)
    p.add_argument("--nonlinearity", choices=("relu", "identity", "tanh"))
    p.add_argument("--output-nonlinearity", choices=("relu", "identity", "tanh"))
    p.add_argument("--adjacency", choices=("literal", "normalized"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-structured", type=float)
    p.add_argument("--lr-unstructured", type=float)
    p.add_argument("--lr-shared", type=float)
    p.add_argument("--branch-weights", type=float, nargs=2, metavar=("W_FLAT", "W_STRUCT"))
    p.add_argument("--negative-pair-ratio", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K of a checkpoint or a prediction file")
    common(p)
    p.add_argument("--corpus", required=True, help="ground-truth corpus")
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--detections", help="external detections (corpus format) for sgcls/sgdet")
    p.add_argument("--task", choices=("prdcls", "sgcls", "sgdet"))
    p.add_argument("--mode", choices=("graph_constraint", "no_constraint"))
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--rel-per-pair", type=int)
    p.add_argument("--fusion", choices=("structured", "flat", "weighted"))
    p.add_argument("--fusion-weights", type=float, nargs=2, metavar=("W_FLAT", "W_STRUCT"))
    p.add_argument("--bias", action=argparse.BooleanOptionalAction, default=None,
                   help="add the frequency bias to the logits")
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started, started_wall = time.perf_counter(), datetime.now(timezone.utc)
    try:
        cfg = _load_config(getattr(args, "config", None))
        info = args.func(args, cfg)
    except (UsageError, ContractError) as exc:
        print(f"structsg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"structsg {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"structsg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out_dir = info.pop("out_dir", None) or Path(args.out)
    _manifest(out_dir, args.command, info["config"], info["inputs"], info["outputs"],
              info["seed"], started, started_wall)
    return 0


if __name__ == "__main__":
    sys.exit(main())
