"""Metrics, ablation arms, label-noise sweep and the global/local consistency gap."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import Params
from .config import RunConfig
from .datagen import SyntheticScene, inject_label_noise, make_patch_dataset
from .glc import PartitionGrid, partition_image, resize_bilinear, sample_views, train
from .glc.train import EpochRecord
from .model import CountModel

CSV_HEADER = "arm,config_digest,seed,mae,mse,final_lr,final_lc,consistency_gap,seconds"
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.15, 0.2)
PATCH_GRID = PartitionGrid(2, 3)

# arm label -> overrides applied on top of the base config
ABLATION_ARMS: dict[str, dict[str, object]] = {
    "baseline_direct_lr": {"head": "direct", "alpha": 0.0, "loss": "glc"},
    "sfsl_lr": {"head": "sfsl", "alpha": 0.0, "loss": "glc"},
    "sfsl_lr_lgt_n4": {"head": "sfsl", "loss": "gt", "grid": "2x2"},
    "sfsl_lr_lc_n16": {"head": "sfsl", "loss": "glc", "grid": "4x4"},
    "sfsl_lr_lc_n4": {"head": "sfsl", "loss": "glc", "grid": "2x2"},
    "token_sfsl_lr_lc_n4": {"variant": "token", "head": "sfsl", "loss": "glc", "grid": "2x2"},
}


@dataclass(frozen=True)
class ExperimentRecord:
    arm: str
    config_digest: str
    seed: int
    mae: float
    mse: float  # root-mean-square error
    final_lr: float
    final_lc: float
    consistency_gap: float
    seconds: float

    @property
    def mse_squared(self) -> float:
        return self.mse * self.mse

    def csv_row(self, timing: bool = False) -> str:
        def g(x: float) -> str:
            return format(float(x), ".17g")

        seconds = g(self.seconds) if timing else "0"
        fields = [self.arm, self.config_digest, str(self.seed), g(self.mae), g(self.mse),
                  g(self.final_lr), g(self.final_lc), g(self.consistency_gap), seconds]
        return ",".join(fields)


class SuiteFailure(RuntimeError):
    """Raised after a suite finishes with at least one failed run; carries what did finish."""

    def __init__(self, records: list[ExperimentRecord], failures: list[tuple[str, int, BaseException]]):
        lines = ", ".join(f"{arm} seed {seed}: {exc}" for arm, seed, exc in failures)
        super().__init__(f"{len(failures)} run(s) failed: {lines}")
        self.records = records
        self.failures = failures


def mae_mse(preds: Sequence[float] | np.ndarray, counts: Sequence[float] | np.ndarray) -> tuple[float, float]:
    """(MAE, RMSE) with exactly rounded sums."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    c = np.asarray(counts, dtype=np.float64).ravel()
    if p.shape != c.shape:
        raise ValueError(f"mae_mse: {p.size} predictions vs {c.size} counts")
    if p.size == 0:
        raise ValueError("mae_mse: empty input")
    err = p - c
    mae = math.fsum(np.abs(err).tolist()) / p.size
    mse = math.sqrt(math.fsum((err * err).tolist()) / p.size)
    return mae, mse


def write_csv(path: str | Path, records: Iterable[ExperimentRecord], timing: bool = False) -> None:
    lines = [CSV_HEADER, *(r.csv_row(timing) for r in records)]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: str | Path) -> list[dict[str, str]]:
    text = Path(path).read_text(encoding="utf-8")
    rows = text.splitlines()
    keys = rows[0].split(",")
    return [dict(zip(keys, row.split(","))) for row in rows[1:] if row]


# -- prediction helpers ----------------------------------------------------------


def _fit_size(images: Sequence[np.ndarray], size: int) -> np.ndarray:
    return np.stack([resize_bilinear(np.asarray(im, dtype=np.float64), size, size) for im in images])


def predict_counts(model: CountModel, params: Params, images: Sequence[np.ndarray], patch_grid: PartitionGrid | None = None) -> np.ndarray:
    """Count predictions for full images; with ``patch_grid`` each image is the sum of its tiles."""
    size = model.input_size
    if patch_grid is None:
        return model.predict(params, _fit_size(images, size))
    tiles = [t for im in images for t in partition_image(np.asarray(im, dtype=np.float64), patch_grid)]
    per_tile = model.predict(params, _fit_size(tiles, size)).reshape(len(images), patch_grid.n)
    return per_tile.sum(axis=1)


def _global_and_local(model: CountModel, params: Params, images: Sequence[np.ndarray], grid: PartitionGrid) -> tuple[np.ndarray, np.ndarray]:
    views = np.concatenate([sample_views(np.asarray(im, dtype=np.float64), grid, model.input_size) for im in images])
    preds = model.predict(params, views).reshape(len(images), grid.n + 1)
    return preds[:, 0], preds[:, 1:]


def consistency_gap(model: CountModel, params: Params, images: Sequence[np.ndarray], grid: PartitionGrid) -> float:
    """Mean over images of |sum of subimage predictions - global prediction| / max(1, |global|)."""
    glob, local = _global_and_local(model, params, images, grid)
    gaps = np.abs(local.sum(axis=1) - glob) / np.maximum(1.0, np.abs(glob))
    return math.fsum(gaps.tolist()) / len(gaps)


def glc_residual(model: CountModel, params: Params, images: Sequence[np.ndarray], grid: PartitionGrid) -> float:
    """Mean squared global/local gap, the L_c value of the given parameters over ``images``."""
    glob, local = _global_and_local(model, params, images, grid)
    diff = local.sum(axis=1) - glob
    return math.fsum((diff * diff).tolist()) / len(diff)


# -- single runs -----------------------------------------------------------------


def split_scenes(config: RunConfig, scenes: Sequence[SyntheticScene]) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    """Train on the leading scenes, test on the last ``num_test``."""
    if config.num_test >= len(scenes):
        raise ValueError(f"dataset has {len(scenes)} scenes, need more than num_test={config.num_test}")
    cut = len(scenes) - config.num_test
    return list(scenes[:cut]), list(scenes[cut:])


def training_samples(config: RunConfig, scenes: Sequence[SyntheticScene], seed: int, sigma: float | None = None) -> list[tuple[np.ndarray, float]]:
    """(image, label) pairs, optionally patch-labelled, with multiplicative label noise.

    The noise stream depends on the seed only, so every sigma perturbs labels with
    the same standard-normal draws and sigma = 0 reproduces the clean labels.
    """
    sigma = config.label_noise_sigma if sigma is None else sigma
    if config.patch_label_mode:
        samples = make_patch_dataset(scenes, PATCH_GRID)
    else:
        samples = [(s.image, float(s.count)) for s in scenes]
    rng = np.random.default_rng([seed, 11])
    return [(img, inject_label_noise(c, sigma, rng)) for img, c in samples]


@dataclass
class FitResult:
    model: CountModel
    params: Params
    history: list[EpochRecord]
    seconds: float


def fit(config: RunConfig, train_scenes: Sequence[SyntheticScene], seed: int, sigma: float | None = None) -> FitResult:
    model = CountModel(config.model_config())
    samples = training_samples(config, train_scenes, seed, sigma)
    start = time.perf_counter()
    params, history = train(config.train_config(seed), samples)
    return FitResult(model, params, history, time.perf_counter() - start)


def evaluate_run(arm: str, config: RunConfig, scenes: Sequence[SyntheticScene], seed: int, sigma: float | None = None) -> ExperimentRecord:
    """Train on the split's training scenes, score on clean test counts."""
    train_scenes, test_scenes = split_scenes(config, scenes)
    result = fit(config, train_scenes, seed, sigma)
    return score(arm, config, result, train_scenes, test_scenes, seed)


def score(arm: str, config: RunConfig, result: FitResult, train_scenes: Sequence[SyntheticScene],
          test_scenes: Sequence[SyntheticScene], seed: int) -> ExperimentRecord:
    grid = config.partition_grid()
    test_images = [s.image for s in test_scenes]
    patch_grid = PATCH_GRID if config.patch_label_mode else None
    preds = predict_counts(result.model, result.params, test_images, patch_grid)
    mae, mse = mae_mse(preds, [s.count for s in test_scenes])
    last = result.history[-1].losses
    final_lc = last.l_c
    if final_lc is None:
        final_lc = glc_residual(result.model, result.params, [s.image for s in train_scenes], grid)
    gap = consistency_gap(result.model, result.params, test_images, grid)
    return ExperimentRecord(arm, config.digest(), seed, mae, mse, last.l_r, final_lc, gap, result.seconds)


# -- suites ----------------------------------------------------------------------


def arm_config(base: RunConfig, arm: str) -> RunConfig:
    if arm not in ABLATION_ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}; choose from {', '.join(ABLATION_ARMS)}")
    return base.replace(**ABLATION_ARMS[arm])


def _run_all(jobs: list[tuple[str, RunConfig, int, float | None]], scenes: Sequence[SyntheticScene]) -> list[ExperimentRecord]:
    records: list[ExperimentRecord] = []
    failures: list[tuple[str, int, BaseException]] = []
    for arm, config, seed, sigma in jobs:
        try:
            records.append(evaluate_run(arm, config, scenes, seed, sigma))
        except (ArithmeticError, ValueError) as exc:
            failures.append((arm, seed, exc))
    if failures:
        raise SuiteFailure(records, failures)
    return records


def ablation_suite(base: RunConfig, scenes: Sequence[SyntheticScene], seeds: Sequence[int],
                   arms: Sequence[str] | None = None) -> list[ExperimentRecord]:
    """Every arm x seed, in (arm, seed) order."""
    if len(seeds) < 3:
        raise ValueError(f"ablation_suite needs at least 3 seeds, got {len(seeds)}")
    names = list(arms) if arms is not None else list(ABLATION_ARMS)
    configs = {name: arm_config(base, name) for name in names}
    jobs = [(name, configs[name], seed, None) for name in names for seed in seeds]
    return _run_all(jobs, scenes)


def robustness_sweep(config: RunConfig, scenes: Sequence[SyntheticScene], sigmas: Sequence[float] = DEFAULT_SIGMAS,
                     seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> list[ExperimentRecord]:
    """Train with noisy labels at every sigma; test counts stay clean."""
    if any(s < 0 for s in sigmas):
        raise ValueError("robustness_sweep: sigmas must be non-negative")
    jobs = []
    for sigma in sigmas:
        cfg = config.replace(label_noise_sigma=float(sigma))
        jobs.extend((f"sigma={float(sigma)!r}", cfg, seed, float(sigma)) for seed in seeds)
    return _run_all(jobs, scenes)


def wins(a: Sequence[ExperimentRecord], b: Sequence[ExperimentRecord], key: str = "mae") -> int:
    """Seeds on which run ``a`` scores strictly lower than run ``b``."""
    by_seed = {r.seed: getattr(r, key) for r in b}
    return sum(1 for r in a if r.seed in by_seed and getattr(r, key) < by_seed[r.seed])
