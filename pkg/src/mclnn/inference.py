"""File-level classification by voting over segment predictions."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DataError, DatasetManifest, Pipeline, SegmentSet, build_segment_set, build_splits, \
    load_matrices, standardize_fit
from .network import ModelConfig, build_model
from .numkernel import Rng
from .optim import TrainConfig, train

log = logging.getLogger(__name__)

VOTING_MODES = ("probability", "majority")
TIE_TOLERANCE = 1e-12


class NoSegmentsError(DataError):
    pass


@dataclass
class FilePrediction:
    file: str
    segment_probs: np.ndarray
    voted: np.ndarray
    predicted: int


def vote(segment_probs, file: str = "", mode: str = "probability") -> FilePrediction:
    """Average the segments' probability vectors and take the argmax.

    Classes within ``TIE_TOLERANCE`` of the maximum count as tied and the
    lowest index wins.  ``mode="majority"`` counts per-segment argmax labels
    instead.
    """
    probs = np.asarray(segment_probs, dtype=np.float64)
    if probs.size == 0:
        raise NoSegmentsError(f"file produced no segments{': ' + file if file else ''}")
    probs = np.atleast_2d(probs)
    if mode == "probability":
        voted = probs.mean(axis=0)
    elif mode == "majority":
        counts = np.bincount(probs.argmax(axis=1), minlength=probs.shape[1])
        voted = counts / counts.sum()
    else:
        raise ValueError(f"unknown voting mode {mode!r}")
    predicted = int(np.flatnonzero(voted >= voted.max() - TIE_TOLERANCE)[0])
    return FilePrediction(file, probs, voted, predicted)


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: np.ndarray  # rows = true class, columns = predicted
    skipped: list[str] = field(default_factory=list)
    predictions: list[FilePrediction] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total)

    @property
    def recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), rows, out=np.zeros(len(rows)), where=rows > 0)

    @property
    def precision(self) -> np.ndarray:
        cols = self.confusion.sum(axis=0)
        return np.divide(np.diag(self.confusion), cols, out=np.zeros(len(cols)), where=cols > 0)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "files": self.total,
            "skipped_files": len(self.skipped),
            "classes": self.class_names,
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
        }

    def confusion_table(self) -> str:
        names = self.class_names
        width = max(6, *(len(n) for n in names))
        head = " " * width + " | " + " ".join(f"{n:>{width}}" for n in names) + " | recall"
        lines = [head, "-" * len(head)]
        for i, n in enumerate(names):
            cells = " ".join(f"{int(v):>{width}d}" for v in self.confusion[i])
            lines.append(f"{n:>{width}} | {cells} | {self.recall[i]:.3f}")
        prec = " ".join(f"{p:>{width}.3f}" for p in self.precision)
        lines.append(f"{'prec':>{width}} | {prec} |")
        lines.append(f"accuracy {self.accuracy:.4f} over {self.total} files ({len(self.skipped)} skipped)")
        return "\n".join(lines)

    def write_predictions_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "label", "predicted", "segments"] + [f"p_{n}" for n in self.class_names])
            for p, y in zip(self.predictions, self.labels):
                w.writerow([p.file, y, p.predicted, len(p.segment_probs)] + [repr(float(v)) for v in p.voted])


def predict_segment_set(model, data: SegmentSet, batch_size: int = 512,
                        mode: str = "probability") -> list[FilePrediction]:
    probs = np.concatenate([model.predict_proba(data.segments[i:i + batch_size])
                            for i in range(0, len(data), batch_size)])
    out = []
    for fid, name in enumerate(data.files):
        out.append(vote(probs[data.file_ids == fid], name, mode))
    return out


def predict_file(model, matrix: np.ndarray, hop: int | None = None, name: str = "",
                 mode: str = "probability") -> FilePrediction:
    q = model.geometry.q
    segments = model.pipeline.segments(matrix, q, hop or q)
    if len(segments) == 0:
        raise NoSegmentsError(f"no segments: file {name or ''} has {len(matrix)} frames, model needs q={q}")
    return vote(model.predict_proba(segments), name, mode)


def evaluate(model, matrices: list[np.ndarray], labels: list[int], *, q: int | None = None,
             hop: int | None = None, pipeline: Pipeline | None = None, names: list[str] | None = None,
             class_names: list[str] | None = None, mode: str = "probability") -> EvalReport:
    """Voted per-file accuracy and confusion matrix.

    ``model`` only needs ``predict_proba(segments)``; ``q`` and ``pipeline``
    default to the model's own geometry and preprocessing.
    """
    if not matrices:
        raise DataError("evaluation needs at least one file")
    q = q if q is not None else model.geometry.q
    pipeline = pipeline if pipeline is not None else model.pipeline
    names = names if names is not None else [f"file{i}" for i in range(len(matrices))]
    try:
        data = build_segment_set(matrices, list(labels), names, pipeline, q, hop or q)
    except DataError:
        raise NoSegmentsError(f"all {len(matrices)} files are shorter than q={q} frames") from None
    preds = predict_segment_set(model, data, mode=mode)
    n_classes = preds[0].voted.shape[0]
    class_names = class_names or [str(c) for c in range(n_classes)]
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, y in zip(preds, data.file_labels):
        confusion[y, p.predicted] += 1
    return EvalReport(class_names, confusion, data.skipped, preds, [int(y) for y in data.file_labels])


@dataclass
class FoldResult:
    test_fold: int
    validation_fold: int
    seed: int
    accuracy: float
    epochs: int


@dataclass
class CrossValidation:
    folds: list[FoldResult]

    @property
    def accuracies(self) -> list[float]:
        return [f.accuracy for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def fold_seed(base_seed: int, test_fold: int) -> int:
    return int(Rng(base_seed).spawn(test_fold).next_u64(1)[0] >> 1)


def prepare_fold(manifest: DatasetManifest, test_fold: int, validation_fold: int, q: int,
                 train_hop: int, eval_hop: int, use_delta: bool = True):
    """Load, standardise with training statistics and segment all three splits."""
    splits = build_splits(manifest, test_fold, validation_fold)
    for key, entries in splits.items():
        if not entries:
            raise DataError(f"{key} split is empty")
    raw = {k: load_matrices(manifest, v) for k, v in splits.items()}
    plain = Pipeline(use_delta)
    train_frames = np.concatenate([plain.features(m) for m in raw["train"]])
    pipeline = Pipeline(use_delta, standardize_fit(train_frames))
    sets = {}
    for key, hop in (("train", train_hop), ("validation", eval_hop)):
        entries = splits[key]
        sets[key] = build_segment_set(raw[key], [e.label for e in entries], [e.path for e in entries],
                                      pipeline, q, hop)
    test = (raw["test"], [e.label for e in splits["test"]], [e.path for e in splits["test"]])
    return pipeline, sets["train"], sets["validation"], test


def default_hops(q: int) -> tuple[int, int]:
    return max(q // 2, 1), q


def cross_validate(model_config: ModelConfig, manifest: DatasetManifest, train_config: TrainConfig, *, use_delta: bool = True,
                   train_hop: int | None = None, eval_hop: int | None = None) -> CrossValidation:
    """Train a fresh model per test fold (validation = next fold) and evaluate it."""
    if manifest.folds < 3:
        raise DataError(f"cross-validation needs >= 3 folds, manifest has {manifest.folds}")
    q = model_config.geometry.q
    th, eh = default_hops(q)
    train_hop, eval_hop = train_hop or th, eval_hop or eh
    results = []
    for test_fold in range(1, manifest.folds + 1):
        val_fold = test_fold % manifest.folds + 1
        seed = fold_seed(train_config.seed, test_fold)
        pipeline, tr, va, (mats, labels, names) = prepare_fold(
            manifest, test_fold, val_fold, q, train_hop, eval_hop, use_delta)
        model = build_model(model_config, Rng(seed), pipeline)
        model, history = train(model, tr, va, replace(train_config, seed=seed, checkpoint=None))
        report = evaluate(model, mats, labels, hop=eval_hop, names=names, class_names=manifest.classes)
        log.info("fold %d: accuracy %.4f", test_fold, report.accuracy)
        results.append(FoldResult(test_fold, val_fold, seed, report.accuracy, len(history)))
    return CrossValidation(results)


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1) + "\n")
