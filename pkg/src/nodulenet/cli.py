"""Command-line entry point: ``nodulenet <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, kernels, metrics, pipeline
from .model import StreamConfig, build_model, embed, load_checkpoint, save_checkpoint
from .sampler import load_store, save_store
from .tsne import tsne_embed, write_embedding_svg, write_embedding_tsv
from .volume import LABELS, generate_phantom, parse_manifest, phantom_specs, save_volume, write_manifest

log = logging.getLogger("nodulenet")

# flags that map one-to-one onto TrainConfig fields
TRAIN_FLAGS = ("scales", "plane_counts", "target_per_class", "max_samples_per_class", "batch_size", "lr",
               "epochs", "dropout", "weight_decay", "val_fusion_n", "test_fusion_n", "stream_width")


class CliError(Exception):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def _splits(text):
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if name not in ("train", "validation", "test") or not n.isdigit():
            raise argparse.ArgumentTypeError(f"bad split spec {part!r}; use e.g. train=60,test=30")
        out[name] = int(n)
    return out


def _write_run_log(path, args, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    entry = {
        "command": args.command,
        "config": json.loads(json.dumps(cfg, default=list)),
        "backend": kernels.BACKEND,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")


def _require_seed(args):
    if args.seed is None:
        raise CliError("a seed is required (--seed or \"seed\" in the config file)")


def _load_records(args, split=None):
    records, dropped = parse_manifest(args.manifest)
    if dropped:
        log.info("dropped %d nodules below 4 mm", dropped)
    pipeline.check_splits(records)
    if split:
        records = [r for r in records if r.split == split]
        if not records:
            raise CliError(f"manifest has no records in split {split!r}")
    return records


def _train_config(args) -> pipeline.TrainConfig:
    base = pipeline.TrainConfig.desk(args.seed) if args.preset == "desk" else pipeline.TrainConfig(args.seed)
    over = {k: getattr(args, k, None) for k in TRAIN_FLAGS}
    return pipeline.with_overrides(base, workers=args.workers, **over)


# ---------------------------------------------------------------- commands


def cmd_phantom_gen(args):
    _require_seed(args)
    splits = args.splits or {"": args.per_class}
    if not splits or min(splits.values()) < 1:
        raise CliError("give --per-class N or --splits train=N,...")
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    specs = [(split, s) for split, n in splits.items() for s in phantom_specs(n, args.seed, split)]

    def run(item):
        split, spec = item
        vol, rec = generate_phantom(spec)
        save_volume(vol, out / "volumes" / f"{spec.volume_id}.mhd")
        return replace(rec, split=split)

    with ThreadPoolExecutor(max_workers=args.workers) as ex:
        records = list(ex.map(run, specs))
    paths = {r.volume_id: f"volumes/{r.volume_id}.mhd" for r in records}
    write_manifest(records, out / "manifest.csv", paths)
    _write_run_log(out / "run.json", args, {"volumes": len(records)})
    print(f"wrote {len(records)} volumes and {out / 'manifest.csv'}")


def cmd_extract(args):
    _require_seed(args)
    cfg = _train_config(args)
    records = _load_records(args)
    if args.count_only:
        counts = pipeline.assemble_training_set(records, cfg, count_only=True)
        for name, c in zip(LABELS, counts):
            print(f"{name}\t{c}")
        print(f"total\t{sum(counts)}")
        return
    if not args.out:
        raise CliError("--out is required unless --count-only is given")
    store = pipeline.assemble_training_set(records, cfg)
    save_store(store, args.out)
    _write_run_log(args.out + ".run.json", args, {"resolved": cfg.to_dict(),
                                                  "class_counts": store.class_counts().tolist()})
    print(f"wrote {len(store)} samples to {args.out}")


def cmd_train(args):
    _require_seed(args)
    cfg = _train_config(args)
    records = _load_records(args)
    if args.store:
        store = load_store(args.store)
        missing = set(cfg.scales) - set(store.scales)
        if missing:
            raise CliError(f"store lacks scales {sorted(missing)}")
    else:
        store = pipeline.assemble_training_set(records, cfg)
    validation = [r for r in records if r.split == "validation"]
    model = build_model(cfg.scales, cfg.seed, StreamConfig(width=cfg.stream_width), dropout_rate=cfg.dropout)
    best, tlog = pipeline.train(model, store, validation, cfg)
    save_checkpoint(best, args.out, meta={"seed": cfg.seed})
    tlog.write(args.out + ".log.tsv")
    _write_run_log(args.out + ".run.json", args, {"resolved": cfg.to_dict(), "best_epoch": tlog.best_epoch})
    print(f"best epoch {tlog.best_epoch}; checkpoint written to {args.out}")


def cmd_predict(args):
    model, _ = load_checkpoint(args.checkpoint)
    records = _load_records(args, args.split)
    ev = pipeline.evaluate_manifest(model, records, args.n, workers=args.workers)
    lines = ["id\tpredicted\t" + "\t".join(f"p_{n}" for n in LABELS)]
    for nid, pred, probs in zip(ev.ids, ev.predicted, ev.probabilities):
        lines.append(f"{nid}\t{LABELS[pred]}\t" + "\t".join(f"{p:.6f}" for p in probs))
    Path(args.out).write_text("\n".join(lines) + "\n")
    for nid, err in ev.failures:
        print(f"failed {nid}: {err}", file=sys.stderr)
    print(f"wrote {len(ev.ids)} predictions to {args.out}")


def cmd_evaluate(args):
    model, _ = load_checkpoint(args.checkpoint, expect_scales=args.scales)
    records = _load_records(args, args.split)
    ev = pipeline.evaluate_manifest(model, records, args.n, workers=args.workers)
    report = metrics.metrics_report(ev.confusion, extra={
        "checkpoint": Path(args.checkpoint).name, "split": args.split, "fusion_n": args.n,
        "scales": list(model.scales), "failures": [list(f) for f in ev.failures]})
    js, txt = metrics.write_report(report, args.out)
    print(txt.read_text(), end="")


def _features_fn(kind, codebook):
    if kind == "intensity":
        return baselines.intensity_features
    return lambda p: baselines.kmeans_encode(codebook, p)


def _svm_run(args, kind, codebook=None, extra_paths=None):
    _require_seed(args)
    cfg = _train_config(args)
    cfg = pipeline.with_overrides(cfg, scales=(baselines.SVM_SCALE,))
    records = _load_records(args)
    store = load_store(args.store) if args.store else pipeline.assemble_training_set(records, cfg)
    patches, labels = baselines.store_patches(store, baselines.SVM_SCALE)
    if args.max_train_patches and len(labels) > args.max_train_patches:
        rng = np.random.default_rng(args.seed)
        keep = np.sort(rng.choice(len(labels), args.max_train_patches, replace=False))
        patches, labels = patches[keep], labels[keep]
    if kind == "kmeans":
        codebook = baselines.kmeans_learn_codebook(patches, args.seed, k=args.centroids,
                                                   n_windows=args.windows)
        baselines.save_codebook(codebook, args.out + ".tpkm")
    feat = _features_fn(kind, codebook)
    X = np.stack([feat(p) for p in patches])
    model = baselines.svm_train(X, labels, C=args.C, seed=args.seed,
                                meta={"features": kind, "scale": baselines.SVM_SCALE})
    baselines.save_svm(model, args.out + ".tpsv")
    test = [r for r in records if r.split == args.split]
    if not test:
        raise CliError(f"manifest has no records in split {args.split!r}")
    loader = pipeline.VolumeLoader()
    ref, pred, failures = [], [], []
    for r in test:
        try:
            pred.append(baselines.svm_predict_vote(model, loader(r), r, feat, args.n))
            ref.append(r.label)
        except (OSError, ValueError) as exc:
            failures.append([r.id, str(exc)])
    cm = metrics.confusion_from_labels(ref, pred, len(LABELS))
    report = metrics.metrics_report(cm, extra={"features": kind, "scale": baselines.SVM_SCALE, "C": args.C,
                                               "split": args.split, "vote_patches": args.n,
                                               "failures": failures})
    metrics.write_report(report, args.out + ".report")
    _write_run_log(args.out + ".run.json", args, {"resolved": cfg.to_dict()})
    print(metrics.format_report(report), end="")


def cmd_baseline_svm(args):
    _svm_run(args, "intensity")


def cmd_baseline_kmeans(args):
    _svm_run(args, "kmeans")


def cmd_embed(args):
    _require_seed(args)
    model, _ = load_checkpoint(args.checkpoint)
    records = _load_records(args, args.split)
    loader = pipeline.VolumeLoader()
    feats = []
    for r in records:
        p = pipeline.fusion_patches(model, loader(r), r, args.n)
        feats.append(embed(model, p).mean(axis=0))
    res = tsne_embed(np.stack(feats), perplexity=args.perplexity, iterations=args.iterations, seed=args.seed,
                     labels=[r.label for r in records], ids=[r.id for r in records])
    write_embedding_tsv(res, args.out + ".tsv")
    write_embedding_svg(res, args.out + ".svg")
    _write_run_log(args.out + ".run.json", args, {"kl": res.kl})
    print(f"embedded {len(records)} nodules (KL {res.kl:.4f}) to {args.out}.tsv / .svg")


def cmd_kappa(args):
    if args.manifest:
        ids = [r.id for r in _load_records(args)]
    else:
        ids = list(metrics.read_label_file(args.a))
    a, seven_a = metrics.ingest_observer_labels(args.a, ids)
    b, seven_b = metrics.ingest_observer_labels(args.b, ids)
    k = 7 if (seven_a or seven_b) else 6
    cm = metrics.confusion_from_labels(a, b, k)
    kap = metrics.cohen_kappa_ci(cm)
    report = metrics.metrics_report(cm, kap, extra={"source_a": Path(args.a).name,
                                                    "source_b": Path(args.b).name, "classes_used": k})
    if args.out:
        metrics.write_report(report, args.out)
    print(metrics.format_report(report), end="")


# ---------------------------------------------------------------- parser


def _add_train_flags(p, scales_default=None):
    p.add_argument("--preset", choices=("full", "desk"), default="full",
                   help="full-size defaults or the small single-core preset")
    p.add_argument("--scales", type=_floats, default=scales_default, help="comma-separated patch sizes (mm)")
    p.add_argument("--plane-counts", dest="plane_counts", type=_ints, help="angles per nodule, one per class")
    p.add_argument("--target-per-class", dest="target_per_class", type=int)
    p.add_argument("--max-samples-per-class", dest="max_samples_per_class", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--val-fusion-n", dest="val_fusion_n", type=int)
    p.add_argument("--test-fusion-n", dest="test_fusion_n", type=int)
    p.add_argument("--stream-width", dest="stream_width", type=float, help="filter-count multiplier")


def build_parser():
    parser = argparse.ArgumentParser(prog="nodulenet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
        p.add_argument("--workers", type=int, default=1, help="cap on parallel threads")
        return p

    p = add("phantom-gen", cmd_phantom_gen, "generate a class-balanced phantom dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", dest="per_class", type=int, default=0)
    p.add_argument("--splits", type=_splits, help="e.g. train=60,validation=20,test=30")
    p.add_argument("--seed", type=int)

    p = add("extract", cmd_extract, "assemble the augmented training sample store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--count-only", dest="count_only", action="store_true")
    _add_train_flags(p)

    p = add("train", cmd_train, "train a model and keep the best validation checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--store")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_train_flags(p)

    for name, func, text in (("predict", cmd_predict, "per-nodule fused class probabilities"),
                             ("evaluate", cmd_evaluate, "confusion matrix and metrics report")):
        p = add(name, func, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--n", type=int, default=30, help="angles fused per nodule")
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--scales", type=_floats, help="expected checkpoint scales")

    for name, func, text in (("baseline-svm", cmd_baseline_svm, "intensity features + linear SVM"),
                             ("baseline-kmeans", cmd_baseline_kmeans, "K-means features + linear SVM")):
        p = add(name, func, text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--store", help="sample store containing the 40 mm scale")
        p.add_argument("--out", required=True, help="output prefix")
        p.add_argument("--seed", type=int)
        p.add_argument("--split", default="test")
        p.add_argument("--C", type=float, default=1.0)
        p.add_argument("--n", type=int, default=baselines.N_VOTE_PATCHES, help="patches voted per nodule")
        p.add_argument("--max-train-patches", dest="max_train_patches", type=int)
        if name == "baseline-kmeans":
            p.add_argument("--centroids", type=int, default=1600)
            p.add_argument("--windows", type=int, default=50000)
        _add_train_flags(p)

    p = add("embed", cmd_embed, "t-SNE map of learned nodule features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=1, help="angles averaged per nodule")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output prefix")

    p = add("kappa", cmd_kappa, "agreement report between two label files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--manifest", help="fixes the id order and checks coverage")
    p.add_argument("--out", help="report prefix")
    return parser


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Install defaults from ``--config`` before parsing, so explicit flags win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if command is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    sub = choices[command]
    known = {a.dest for a in sub._actions}
    unknown = set(cfg) - known
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    for key in ("scales", "plane_counts"):
        if isinstance(cfg.get(key), list):
            cfg[key] = tuple(cfg[key])
    for action in sub._actions:
        if action.dest in cfg:
            action.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except CliError as exc:
        print(f"nodulenet: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"nodulenet: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
