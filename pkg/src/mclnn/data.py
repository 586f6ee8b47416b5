"""Feature files, manifests, segmentation and the synthetic verification set.

Feature files are CSV, one time frame per row, no header.  A dataset manifest
is JSON::

    {"classes": ["a", "b"], "folds": 5,
     "files": [{"path": "a_000.csv", "label": "a", "fold": 1}, ...]}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numkernel import Rng

log = logging.getLogger(__name__)

STD_EPSILON = 1e-8


class DataError(ValueError):
    pass


@dataclass
class FeatureFile:
    path: str
    matrix: np.ndarray  # (frames, features)

    @property
    def frames(self) -> int:
        return self.matrix.shape[0]


def load_feature_csv(path: str | Path) -> FeatureFile:
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}: line {lineno} has {len(row)} columns, expected {width}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError(f"{path}: line {lineno} contains a non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: empty feature file")
    matrix = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{path}: non-finite values")
    return FeatureFile(str(path), matrix)


def write_feature_csv(path: str | Path, matrix: np.ndarray) -> None:
    # %.17g round-trips every double exactly
    lines = [",".join("%.17g" % v for v in row) for row in np.asarray(matrix, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")


def compute_delta(matrix: np.ndarray) -> np.ndarray:
    """Backward first difference along time; the first frame's delta is zero."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise DataError("delta needs a (frames, features) matrix with at least one frame")
    delta = np.zeros_like(m)
    delta[1:] = m[1:] - m[:-1]
    return delta


def concat_delta(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    return np.concatenate([m, compute_delta(m)], axis=1)


# -- standardisation ------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = STD_EPSILON

    def apply(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.mean.shape[0]:
            raise DataError(f"standardizer fitted on {self.mean.shape[0]} features, got {frames.shape[-1]}")
        return (frames - self.mean) / self.std


def standardize_fit(frames: np.ndarray, epsilon: float = STD_EPSILON) -> Standardizer:
    """Per-feature mean and population std of a (frames, features) matrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise DataError("standardizer needs at least two frames")
    std = np.maximum(frames.std(axis=0), epsilon)
    return Standardizer(frames.mean(axis=0), std, epsilon)


def standardize_apply(standardizer: Standardizer, frames: np.ndarray) -> np.ndarray:
    return standardizer.apply(frames)


# -- segments -------------------------------------------------------------------

@dataclass
class Segment:
    source: str
    start: int
    block: np.ndarray  # (features, q)


def _check_segmentation(q: int, hop: int) -> None:
    if q < 1 or hop < 1:
        raise DataError(f"segment width and hop must be >= 1, got q={q}, hop={hop}")


def segment_count(frames: int, q: int, hop: int) -> int:
    _check_segmentation(q, hop)
    return 0 if frames < q else (frames - q) // hop + 1


def segment_array(matrix: np.ndarray, q: int, hop: int) -> np.ndarray:
    """All q-wide segments of a (frames, features) matrix as (count, features, q)."""
    n = segment_count(matrix.shape[0], q, hop)
    if n == 0:
        return np.empty((0, matrix.shape[1], q))
    win = sliding_window_view(matrix, q, axis=0)[::hop]  # (count, features, q)
    return np.ascontiguousarray(win[:n])


def extract_segments(file: FeatureFile, q: int, hop: int) -> list[Segment]:
    blocks = segment_array(file.matrix, q, hop)
    if len(blocks) == 0:
        log.warning("%s: %d frames is shorter than segment width %d", file.path, file.frames, q)
    return [Segment(file.path, i * hop, b) for i, b in enumerate(blocks)]


@dataclass
class Pipeline:
    """Frame preprocessing shared by training, evaluation and prediction."""

    use_delta: bool = True
    standardizer: Standardizer | None = None

    def features(self, matrix: np.ndarray) -> np.ndarray:
        m = concat_delta(matrix) if self.use_delta else np.asarray(matrix, dtype=np.float64)
        return m if self.standardizer is None else self.standardizer.apply(m)

    def segments(self, matrix: np.ndarray, q: int, hop: int) -> np.ndarray:
        return segment_array(self.features(matrix), q, hop)


# -- manifests ------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    fold: int


@dataclass
class DatasetManifest:
    classes: list[str]
    folds: int
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise DataError("a manifest needs at least two classes")
        if self.folds < 1:
            raise DataError("fold count must be >= 1")
        seen = set()
        for e in self.entries:
            if not 0 <= e.label < len(self.classes):
                raise DataError(f"{e.path}: label {e.label} outside the class list")
            if not 1 <= e.fold <= self.folds:
                raise DataError(f"{e.path}: fold {e.fold} outside [1, {self.folds}]")
            if e.path in seen:
                raise DataError(f"duplicate manifest path {e.path}")
            seen.add(e.path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "folds": self.folds,
            "files": [{"path": e.path, "label": self.classes[e.label], "fold": e.fold} for e in self.entries],
        }


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    try:
        classes = [str(c) for c in raw["classes"]]
        folds = int(raw["folds"])
        entries = []
        for item in raw["files"]:
            label = item["label"]
            if isinstance(label, str):
                if label not in classes:
                    raise DataError(f"{item['path']}: unknown class {label!r}")
                label = classes.index(label)
            entries.append(ManifestEntry(str(item["path"]), int(label), int(item["fold"])))
    except KeyError as exc:
        raise DataError(f"{path}: manifest is missing key {exc}") from None
    return DatasetManifest(classes, folds, entries, path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def build_splits(manifest: DatasetManifest, test_fold: int, validation_fold: int) -> dict[str, list[ManifestEntry]]:
    for f in (test_fold, validation_fold):
        if not 1 <= f <= manifest.folds:
            raise DataError(f"fold {f} outside [1, {manifest.folds}]")
    if test_fold == validation_fold:
        raise DataError("test and validation folds must differ")
    splits = {"train": [], "validation": [], "test": []}
    for e in manifest.entries:
        key = "test" if e.fold == test_fold else "validation" if e.fold == validation_fold else "train"
        splits[key].append(e)
    return splits


@dataclass
class SegmentSet:
    """Segments of a list of files, flattened for mini-batching."""

    segments: np.ndarray  # (count, features, q)
    labels: np.ndarray  # per segment
    file_ids: np.ndarray  # per segment, index into ``files``
    files: list[str]
    file_labels: np.ndarray
    skipped: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def load_matrices(manifest: DatasetManifest, entries: list[ManifestEntry]) -> list[np.ndarray]:
    out = []
    for e in entries:
        path = manifest.resolve(e)
        if not path.exists():
            raise DataError(f"feature file not found: {path}")
        out.append(load_feature_csv(path).matrix)
    return out


def build_segment_set(matrices: list[np.ndarray], labels: list[int], names: list[str],
                      pipeline: Pipeline, q: int, hop: int) -> SegmentSet:
    blocks, seg_labels, seg_files, kept, kept_labels, skipped = [], [], [], [], [], []
    for m, y, name in zip(matrices, labels, names):
        segs = pipeline.segments(m, q, hop)
        if len(segs) == 0:
            skipped.append(name)
            continue
        fid = len(kept)
        kept.append(name)
        kept_labels.append(y)
        blocks.append(segs)
        seg_labels.append(np.full(len(segs), y))
        seg_files.append(np.full(len(segs), fid))
    if skipped:
        log.warning("%d of %d files shorter than %d frames were skipped", len(skipped), len(names), q)
    if not blocks:
        raise DataError(f"no file yields a segment of {q} frames ({len(skipped)} files too short)")
    return SegmentSet(np.concatenate(blocks), np.concatenate(seg_labels), np.concatenate(seg_files),
                      kept, np.array(kept_labels), skipped)


# -- synthetic order-encoded dataset ----------------------------------------------

def balanced_necklaces(period: int) -> list[tuple[int, ...]]:
    """Binary patterns with equal counts of 0 and 1, one per rotation class."""
    half = period // 2
    seen, out = set(), []
    for ones in itertools.combinations(range(period), half):
        word = tuple(1 if i in ones else 0 for i in range(period))
        canon = min(word[i:] + word[:i] for i in range(period))
        if canon not in seen:
            seen.add(canon)
            out.append(canon)
    return sorted(out)


def class_patterns(classes: int) -> list[tuple[int, ...]]:
    period = 4
    while len(balanced_necklaces(period)) < classes:
        period += 2
    return balanced_necklaces(period)[:classes]


def shuffle_frames(matrix: np.ndarray, rng: Rng) -> np.ndarray:
    return matrix[rng.permutation(matrix.shape[0])]


def synth_generate(out_dir: str | Path, classes: int = 4, files_per_class: int = 200, features: int = 20,
                   frames: int = 60, seed: int = 0, folds: int = 5, noise: float = 0.5,
                   shuffled: bool = False) -> DatasetManifest:
    """Write an order-encoded dataset and its manifest into ``out_dir``.

    Every frame is one of two shared prototypes plus Gaussian noise.  Each class
    repeats its own cyclic arrangement of the prototypes (with equal counts of
    both) from a random phase, so per-frame statistics carry no class signal and
    only the temporal order does.  ``shuffled`` permutes each file's frames,
    which removes that signal.
    """
    if classes < 2 or files_per_class < 1 or features < 1 or folds < 1:
        raise DataError("synthetic dataset needs classes >= 2 and positive sizes")
    patterns = class_patterns(classes)
    period = len(patterns[0])
    if frames < period:
        raise DataError(f"frames must be >= pattern period {period}")
    rng = Rng(seed)
    protos = rng.normal((2, features))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"class{c}" for c in range(classes)]
    entries = []
    for c, pattern in enumerate(patterns):
        for i in range(files_per_class):
            file_rng = rng.spawn(c * files_per_class + i)
            phase = file_rng.integers(period)
            symbols = [pattern[(t + phase) % period] for t in range(frames)]
            m = protos[symbols] + noise * file_rng.normal((frames, features))
            if shuffled:
                m = shuffle_frames(m, file_rng.spawn(1))
            fname = f"{names[c]}_{i:04d}.csv"
            write_feature_csv(out / fname, m)
            entries.append(ManifestEntry(fname, c, i % folds + 1))
    manifest = DatasetManifest(names, folds, entries, out)
    save_manifest(manifest, out / "manifest.json")
    return manifest
