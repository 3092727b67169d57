"""Subimage tiling, bilinear resizing and interleaved batch assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import Tensor


@dataclass(frozen=True)
class PartitionGrid:
    rows: int = 2
    cols: int = 2

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"PartitionGrid needs positive rows/cols, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @classmethod
    def parse(cls, text: str) -> "PartitionGrid":
        """'2x2' -> PartitionGrid(2, 2)."""
        try:
            r, c = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like 'RxC', got {text!r}") from None
        return cls(r, c)

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


def tile_bounds(size: int, parts: int) -> list[tuple[int, int]]:
    """Half-open intervals [floor(i*size/parts), floor((i+1)*size/parts))."""
    return [(i * size // parts, (i + 1) * size // parts) for i in range(parts)]


def partition_array(image: np.ndarray, grid: PartitionGrid) -> list[np.ndarray]:
    h, w = image.shape[-2:]
    if grid.rows > h or grid.cols > w:
        raise ValueError(f"grid {grid} larger than image {h}x{w}")
    return [
        np.array(image[..., r0:r1, c0:c1])
        for r0, r1 in tile_bounds(h, grid.rows)
        for c0, c1 in tile_bounds(w, grid.cols)
    ]


def partition_image(image: Tensor | np.ndarray, grid: PartitionGrid) -> list:
    """Row-major list of the n tiles of ``image`` (last two axes are H, W)."""
    if isinstance(image, Tensor):
        return [Tensor._wrap(t) for t in partition_array(image.data, grid)]
    return partition_array(np.asarray(image, dtype=np.float64), grid)


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # corner-aligned: output i samples source position i * (src - 1) / (dst - 1)
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), src - 1)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: Tensor | np.ndarray, out_h: int, out_w: int):
    """Bilinear resize of the last two axes with corner-aligned sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    wrap = isinstance(image, Tensor)
    arr = image.data if wrap else np.asarray(image, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        out = arr.copy()
    else:
        r0, r1, fr = _axis_weights(h, out_h)
        c0, c1, fc = _axis_weights(w, out_w)
        fr = fr[:, None]
        rows = arr[..., r0, :] * (1.0 - fr) + arr[..., r1, :] * fr
        out = rows[..., c0] * (1.0 - fc) + rows[..., c1] * fc
    return Tensor._wrap(out) if wrap else out


def sample_views(image: np.ndarray, grid: PartitionGrid, input_size: int) -> np.ndarray:
    """(n + 1, S, S): the global image followed by its n tiles, all resized to S x S."""
    views = [image, *partition_array(image, grid)]
    return np.stack([resize_bilinear(v, input_size, input_size) for v in views])


@dataclass
class TrainingBatch:
    items: np.ndarray  # (b * (n + 1), S, S), order I_1, I_1^1..I_1^n, I_2, ...
    global_counts: np.ndarray  # (b,)
    layout: tuple[int, int]  # (b, n)

    @property
    def global_index(self) -> list[int]:
        b, n = self.layout
        return [i * (n + 1) for i in range(b)]

    @property
    def local_index(self) -> list[int]:
        b, n = self.layout
        return [i * (n + 1) + j for i in range(b) for j in range(1, n + 1)]


def assemble_batch(
    samples: Sequence[tuple[np.ndarray, float]], grid: PartitionGrid, input_size: int
) -> TrainingBatch:
    if not samples:
        raise ValueError("assemble_batch: empty sample list")
    views = [sample_views(np.asarray(img, dtype=np.float64), grid, input_size) for img, _ in samples]
    return batch_from_views(views, [c for _, c in samples], grid)


def batch_from_views(views: Sequence[np.ndarray], counts: Sequence[float], grid: PartitionGrid) -> TrainingBatch:
    return TrainingBatch(
        items=np.concatenate(views, axis=0),
        global_counts=np.asarray(counts, dtype=np.float64),
        layout=(len(views), grid.n),
    )
