"""Band-shaped binary masks for masked conditional layers.

A mask is an ``l x e`` 0/1 matrix (rows are input features, columns are hidden
nodes).  Ones are laid out along the column-major linear index of the matrix:
each band holds ``bandwidth`` consecutive positions, and successive bands start
``l + bandwidth - overlap`` positions apart, so each column's band sits
``bandwidth - overlap`` rows lower than the previous one.  Bands that run past
the bottom of a column continue at the top of the next column; positions past
the end of the matrix are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkernel import ShapeError


class MaskSpecError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    features: int
    nodes: int
    bandwidth: int
    overlap: int

    def __post_init__(self):
        if self.features < 1 or self.nodes < 1:
            raise MaskSpecError(f"mask needs features >= 1 and nodes >= 1, got {self.features}x{self.nodes}")
        if not 1 <= self.bandwidth <= self.features:
            raise MaskSpecError(
                f"bandwidth must be in [1, {self.features}] (the feature count), got {self.bandwidth}"
            )
        # overlap == bandwidth repeats the same rows in every column
        if self.overlap > self.bandwidth:
            raise MaskSpecError(f"overlap must not exceed bandwidth ({self.bandwidth}), got {self.overlap}")

    @property
    def stride(self) -> int:
        """Linear distance between the starts of consecutive bands."""
        return self.features + self.bandwidth - self.overlap

    @property
    def band_count(self) -> int:
        size = self.features * self.nodes
        return -(-size // self.stride)


@dataclass(frozen=True)
class BinaryMask:
    matrix: np.ndarray
    spec: MaskSpec | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def linear_positions(spec: MaskSpec) -> np.ndarray:
    """Column-major linear indices of the ones, ascending."""
    size = spec.features * spec.nodes
    starts = np.arange(spec.band_count, dtype=np.int64) * spec.stride
    idx = (starts[:, None] + np.arange(spec.bandwidth, dtype=np.int64)[None, :]).ravel()
    return idx[idx < size]


def generate_mask(spec: MaskSpec) -> BinaryMask:
    flat = np.zeros(spec.features * spec.nodes, dtype=np.float64)
    flat[linear_positions(spec)] = 1.0
    matrix = flat.reshape((spec.features, spec.nodes), order="F")
    matrix.setflags(write=False)
    return BinaryMask(matrix, spec)


def mask_weights(weights: np.ndarray, mask: BinaryMask | np.ndarray) -> np.ndarray:
    """Multiply a weight matrix, or a stack of them, element-wise by the mask."""
    m = mask.matrix if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-2:] != m.shape:
        raise ShapeError(f"weights {w.shape} do not match mask {m.shape}")
    return w * m


def mask_stats(mask: BinaryMask | np.ndarray) -> dict:
    m = mask.matrix if isinstance(mask, BinaryMask) else np.asarray(mask)
    per_col = (m != 0).sum(axis=0).astype(int)
    total = int(per_col.sum())
    return {
        "ones_total": total,
        "ones_per_column": per_col.tolist(),
        "density": total / m.size,
    }


def write_mask_csv(mask: BinaryMask, path: str | Path) -> None:
    rows = [",".join(str(int(v)) for v in row) for row in mask.matrix]
    Path(path).write_text("\n".join(rows) + "\n")


def write_mask_pgm(mask: BinaryMask, path: str | Path) -> None:
    """Plain (P2) greymap; ones render white on black."""
    l, e = mask.shape
    lines = ["P2", f"# mask {l}x{e}", f"{e} {l}", "1"]
    lines += [" ".join(str(int(v)) for v in row) for row in mask.matrix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask_grid(path: str | Path) -> np.ndarray:
    """Parse a mask written by either writer back into a 0/1 matrix."""
    text = Path(path).read_text().split("\n")
    if text[0].strip() == "P2":
        body = [ln for ln in text[1:] if ln.strip() and not ln.startswith("#")]
        width, height = (int(v) for v in body[0].split())
        values = [int(v) for ln in body[2:] for v in ln.split()]
        return np.array(values, dtype=np.float64).reshape(height, width)
    return np.array([[int(v) for v in ln.split(",")] for ln in text if ln.strip()], dtype=np.float64)
