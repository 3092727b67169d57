"""Synthetic crowd scenes with exact counts, tile oracles and label noise."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .glc.partition import PartitionGrid, partition_array, tile_bounds

WCDS_MAGIC = b"WCDS"
WCDS_VERSION = 1
BACKGROUND_LEVEL = 0.1
BLOB_PEAK = 0.7


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W) in [0, 1]
    count: int
    dots: np.ndarray  # (count, 2) float (row, col); oracle only
    blob_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.dots = np.asarray(self.dots, dtype=np.float64).reshape(-1, 2)
        if self.count != len(self.dots):
            raise ValueError(f"count {self.count} != number of dots {len(self.dots)}")


@dataclass(frozen=True)
class DatasetSpec:
    num_scenes: int = 250
    image_size: int = 64
    count_min: int = 5
    count_max: int = 50
    blob_sigma_range: tuple[float, float] = (1.0, 2.5)
    background_noise_std: float = 0.02
    perspective_gradient: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_scenes < 1:
            raise ValueError("DatasetSpec.num_scenes must be >= 1")
        if self.image_size < 16:
            raise ValueError("DatasetSpec.image_size must be >= 16")
        if not 0 < self.count_min <= self.count_max:
            raise ValueError("DatasetSpec.count_min/count_max: need 0 < count_min <= count_max")
        lo, hi = self.blob_sigma_range
        if not 0 < lo <= hi:
            raise ValueError("DatasetSpec.blob_sigma_range: need 0 < low <= high")
        if self.background_noise_std < 0:
            raise ValueError("DatasetSpec.background_noise_std must be >= 0")


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for scene ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def render_blobs(shape: tuple[int, int], dots: np.ndarray, sigmas: np.ndarray, peak: float = BLOB_PEAK) -> np.ndarray:
    """Sum of Gaussian blobs sampled at pixel centres (row + 0.5, col + 0.5)."""
    h, w = shape
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    out = np.zeros(shape)
    for (r, c), s in zip(dots, sigmas):
        gr = np.exp(-((rows - r) ** 2) / (2.0 * s * s))
        gc = np.exp(-((cols - c) ** 2) / (2.0 * s * s))
        out += peak * np.outer(gr, gc)
    return out


def blob_mass(sigma: float, peak: float = BLOB_PEAK) -> float:
    return peak * 2.0 * math.pi * sigma * sigma


def generate_scene(spec: DatasetSpec, rng: np.random.Generator) -> SyntheticScene:
    size = spec.image_size
    count = int(rng.integers(spec.count_min, spec.count_max + 1))
    dots = rng.uniform(0.0, size, size=(count, 2))
    lo, hi = spec.blob_sigma_range
    if spec.perspective_gradient:
        # rows further down render larger, mimicking objects closer to the camera
        sigmas = lo + (hi - lo) * dots[:, 0] / size
    else:
        sigmas = rng.uniform(lo, hi, size=count)
    image = BACKGROUND_LEVEL + render_blobs((size, size), dots, sigmas)
    if spec.background_noise_std > 0:
        image = image + rng.normal(0.0, spec.background_noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SyntheticScene(image=image, count=count, dots=dots, blob_sigma=sigmas)


def generate_dataset(spec: DatasetSpec) -> list[SyntheticScene]:
    return [generate_scene(spec, scene_rng(spec.seed, i)) for i in range(spec.num_scenes)]


def inject_label_noise(count: float, sigma: float, rng: np.random.Generator) -> float:
    """c (1 + eps) with eps ~ N(0, sigma^2), clamped below at 0."""
    if sigma < 0:
        raise ValueError(f"label noise sigma must be >= 0, got {sigma}")
    eps = rng.normal(0.0, sigma)
    return max(0.0, count * (1.0 + eps))


def subimage_count_oracle(scene: SyntheticScene, grid: PartitionGrid) -> list[int]:
    """Dots per tile, row-major.

    Along each axis a dot belongs to the interval (lo, hi], the first interval
    also taking coordinate 0, so a dot sitting exactly on an interior boundary
    counts once, for the lower-indexed tile.
    """
    h, w = scene.image.shape
    row_edges = [lo for lo, _ in tile_bounds(h, grid.rows)]
    col_edges = [lo for lo, _ in tile_bounds(w, grid.cols)]
    counts = [0] * grid.n
    for r, c in scene.dots:
        ti = max(int(np.searchsorted(row_edges, r, side="left")) - 1, 0)
        tj = max(int(np.searchsorted(col_edges, c, side="left")) - 1, 0)
        counts[ti * grid.cols + tj] += 1
    return counts


def make_patch_dataset(scenes: Sequence[SyntheticScene], grid: PartitionGrid | None = None) -> list[tuple[np.ndarray, float]]:
    """Crop every scene into grid tiles (2x3 by default) labelled with exact tile counts."""
    grid = grid or PartitionGrid(2, 3)
    out: list[tuple[np.ndarray, float]] = []
    for scene in scenes:
        tiles = partition_array(scene.image, grid)
        counts = subimage_count_oracle(scene, grid)
        out.extend((tile, float(cnt)) for tile, cnt in zip(tiles, counts))
    return out


# -- WCDS binary dataset files (little-endian) ---------------------------------


def save_dataset(path: str | Path, scenes: Sequence[SyntheticScene]) -> None:
    if not scenes:
        raise ValueError("cannot save an empty dataset")
    h, w = scenes[0].image.shape
    buf = bytearray(WCDS_MAGIC)
    buf += struct.pack("<IIHH", WCDS_VERSION, len(scenes), h, w)
    for s in scenes:
        if s.image.shape != (h, w):
            raise ValueError("all scenes in a dataset file must share one image size")
        buf += struct.pack("<dI", float(s.count), len(s.dots))
        buf += np.ascontiguousarray(s.dots, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(s.image, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path) -> list[SyntheticScene]:
    raw = Path(path).read_bytes()

    def need(offset: int, n: int) -> None:
        if offset + n > len(raw):
            raise ValueError(f"WCDS file truncated at offset {offset} (need {n} bytes, have {len(raw) - offset})")

    need(0, 16)
    if raw[:4] != WCDS_MAGIC:
        raise ValueError(f"not a WCDS file (magic {raw[:4]!r})")
    version, n_scenes, h, w = struct.unpack_from("<IIHH", raw, 4)
    if version != WCDS_VERSION:
        raise ValueError(f"unsupported WCDS version {version}")
    off = 16
    scenes = []
    for _ in range(n_scenes):
        need(off, 12)
        count, n_dots = struct.unpack_from("<dI", raw, off)
        off += 12
        need(off, 16 * n_dots + 8 * h * w)
        dots = np.frombuffer(raw, dtype="<f8", count=2 * n_dots, offset=off).reshape(n_dots, 2).astype(np.float64)
        off += 16 * n_dots
        image = np.frombuffer(raw, dtype="<f8", count=h * w, offset=off).reshape(h, w).astype(np.float64)
        off += 8 * h * w
        scenes.append(SyntheticScene(image=image, count=int(round(count)), dots=dots))
    return scenes


def scene_arrays(scenes: Iterable[SyntheticScene]) -> tuple[np.ndarray, np.ndarray]:
    scenes = list(scenes)
    return np.stack([s.image for s in scenes]), np.array([float(s.count) for s in scenes])
