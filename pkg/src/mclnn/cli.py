"""Command-line entry point: ``mclnn <command> [options]``.

Exit codes: 0 success, 1 runtime failure (including a failed gradient
check), 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcheck
from .data import DataError, load_feature_csv, load_manifest, load_matrices, synth_generate
from .inference import (VOTING_MODES, cross_validate, default_hops, evaluate, predict_file, prepare_fold,
                        write_report_json)
from .masking import MaskSpec, MaskSpecError, generate_mask, mask_stats, write_mask_csv, write_mask_pgm
from .network import ConfigError, ModelConfig, ModelFileError, build_model, load_model, save_model
from .numkernel import Rng
from .optim import TrainConfig, train, write_history_csv

log = logging.getLogger("mclnn")

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
DATA_KEYS = {"use_delta", "train_hop", "eval_hop"}
RUN_KEYS = MODEL_KEYS | TRAIN_KEYS | DATA_KEYS | {"seed"}

# scalar keys that can be overridden from the command line
OVERRIDES = {
    "seed": int, "lr": float, "batch_size": int, "max_epochs": int, "patience": int,
    "checkpoint": str, "extra_frames": int, "pool": str, "transfer": str,
    "train_hop": int, "eval_hop": int, "beta1": float, "beta2": float, "epsilon": float,
}


class UsageError(ValueError):
    pass


def load_run_config(path: str | None, overrides: dict) -> dict:
    cfg = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - RUN_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def split_run_config(cfg: dict, manifest=None, raw_features: int | None = None):
    cfg = dict(cfg)
    seed = int(cfg.pop("seed", 0))
    use_delta = bool(cfg.get("use_delta", True))
    model_kw = {k: v for k, v in cfg.items() if k in MODEL_KEYS}
    if "classes" not in model_kw and manifest is not None:
        model_kw["classes"] = len(manifest.classes)
    if "input_features" not in model_kw and raw_features is not None:
        model_kw["input_features"] = raw_features * (2 if use_delta else 1)
    model_cfg = ModelConfig.from_dict({**model_kw, "seed": seed})
    train_cfg = TrainConfig(seed=seed, **{k: v for k, v in cfg.items() if k in TRAIN_KEYS})
    q = model_cfg.geometry.q
    th, eh = default_hops(q)
    data_cfg = {"use_delta": use_delta, "train_hop": int(cfg.get("train_hop") or th),
                "eval_hop": int(cfg.get("eval_hop") or eh)}
    return model_cfg, train_cfg, data_cfg


def _first_file_features(manifest) -> int:
    return load_feature_csv(manifest.resolve(manifest.entries[0])).matrix.shape[1]


# -- commands -------------------------------------------------------------------------

def cmd_mask(args) -> int:
    spec = MaskSpec(args.features, args.nodes, args.bandwidth, args.overlap)
    mask = generate_mask(spec)
    fmt = args.format or ("pgm" if str(args.out).endswith(".pgm") else "csv")
    (write_mask_pgm if fmt == "pgm" else write_mask_csv)(mask, args.out)
    stats = mask_stats(mask)
    print(f"mask {spec.features}x{spec.nodes} bandwidth={spec.bandwidth} overlap={spec.overlap} -> {args.out}")
    print(f"ones_total={stats['ones_total']} density={stats['density']:.6f}")
    print("ones_per_column=" + ",".join(str(c) for c in stats["ones_per_column"]))
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = load_run_config(args.config, _overrides(args))
    model_cfg, train_cfg, data_cfg = split_run_config(cfg, manifest, _first_file_features(manifest))
    print(f"seed {train_cfg.seed}")
    q = model_cfg.geometry.q
    pipeline, tr, va, (mats, labels, names) = prepare_fold(
        manifest, args.test_fold, args.val_fold, q, data_cfg["train_hop"], data_cfg["eval_hop"],
        data_cfg["use_delta"])
    if tr.skipped or va.skipped:
        print(f"skipped {len(tr.skipped)} training and {len(va.skipped)} validation files shorter than q={q}")
    print(f"q={q} train segments={len(tr)} ({len(tr.files)} files) validation files={len(va.files)}")
    model = build_model(model_cfg, Rng(model_cfg.seed).spawn(0), pipeline)
    model, history = train(model, tr, va, train_cfg,
                           on_epoch=lambda r: log.info("epoch %d loss %.6f val %.4f", r.epoch, r.train_loss,
                                                       r.val_accuracy))
    save_model(model, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    write_history_csv(history, history_path)
    best = max(r.val_accuracy for r in history)
    print(f"epochs {len(history)}  best validation accuracy {best:.4f}")
    report = evaluate(model, mats, labels, hop=data_cfg["eval_hop"], names=names, class_names=manifest.classes)
    print(f"test fold {args.test_fold} accuracy {report.accuracy:.4f}")
    print(f"model -> {args.out}  history -> {history_path}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    entries = [e for e in manifest.entries if e.fold == args.test_fold]
    if not entries:
        raise UsageError(f"fold {args.test_fold} has no files")
    mats = load_matrices(manifest, entries)
    report = evaluate(model, mats, [e.label for e in entries], hop=args.hop, names=[e.path for e in entries],
                      class_names=manifest.classes, mode=args.voting)
    print(report.confusion_table())
    if args.json:
        write_report_json(report, args.json)
    if args.predictions:
        report.write_predictions_csv(args.predictions)
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    matrix = load_feature_csv(args.file).matrix
    pred = predict_file(model, matrix, args.hop, args.file, args.voting)
    print("probabilities " + " ".join(f"{p:.6f}" for p in pred.voted))
    print(f"class {pred.predicted} segments {len(pred.segment_probs)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed)
    if args.sizes:
        l, e, n, w = args.sizes
        rng = Rng(args.seed).spawn(100)
        mask = generate_mask(MaskSpec(l, e, max(1, l // 2), 0))
        tag = "x".join(str(v) for v in args.sizes)
        results[f"clnn[{tag}]"] = max(gradcheck.check_conditional(rng.spawn(0), l, e, n, w).values())
        results[f"mclnn[{tag}]"] = max(gradcheck.check_conditional(rng.spawn(1), l, e, n, w, mask=mask).values())
    worst = max(results.values())
    for name, err in results.items():
        flag = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<24} max rel err {err:.3e}  {flag}")
    ok = worst <= gradcheck.TOLERANCE
    print(f"max rel err {worst:.3e} {'<=' if ok else '>'} {gradcheck.TOLERANCE:g}")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    manifest = synth_generate(args.out, args.classes, args.files_per_class, args.features, args.frames,
                              args.seed, args.folds, args.noise, args.shuffled)
    print(f"wrote {len(manifest.entries)} files, {len(manifest.classes)} classes, {manifest.folds} folds "
          f"-> {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_crossval(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = load_run_config(args.config, _overrides(args))
    model_cfg, train_cfg, data_cfg = split_run_config(cfg, manifest, _first_file_features(manifest))
    print(f"seed {train_cfg.seed}")
    cv = cross_validate(model_cfg, manifest, train_cfg, use_delta=data_cfg["use_delta"],
                        train_hop=data_cfg["train_hop"], eval_hop=data_cfg["eval_hop"])
    for f in cv.folds:
        print(f"fold {f.test_fold} (val {f.validation_fold}) accuracy {f.accuracy:.4f} epochs {f.epochs}")
    print(f"mean accuracy {cv.mean:.4f} std {cv.std:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(
            {"folds": [vars(f) for f in cv.folds], "mean": cv.mean, "std": cv.std}, indent=1) + "\n")
    return 0


# -- parser -------------------------------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser) -> None:
    for key, typ in OVERRIDES.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def _overrides(args) -> dict:
    return {k: getattr(args, k, None) for k in OVERRIDES}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mclnn", description="Masked conditional neural networks")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on numeric worker threads (default: $MCLNN_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="generate a band mask and print its statistics")
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--bandwidth", type=int, required=True)
    p.add_argument("--overlap", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "pgm"))
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train on a manifest with one test and one validation fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--test-fold", type=int, required=True)
    p.add_argument("--val-fold", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-fold", type=int, required=True)
    p.add_argument("--hop", type=int)
    p.add_argument("--voting", choices=VOTING_MODES, default="probability")
    p.add_argument("--json")
    p.add_argument("--predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--file", required=True)
    p.add_argument("--hop", type=int)
    p.add_argument("--voting", choices=VOTING_MODES, default="probability")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable unit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=int, nargs=4, metavar=("L", "E", "N", "W"),
                   help="extra conditional-layer check with features, nodes, order, frames")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic order-encoded dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--files-per-class", type=int, default=200)
    p.add_argument("--features", type=int, default=20)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffled", action="store_true", help="permute frames within each file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crossval", help="train and evaluate every fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--json")
    _add_overrides(p)
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or int(os.environ.get("MCLNN_THREADS", "0") or 0) or None
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, MaskSpecError, DataError, ModelFileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
