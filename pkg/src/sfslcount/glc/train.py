"""Joint training of global and subimage predictions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .. import autodiff as ad
from .. import sfsl
from ..autodiff import Tape, Tensor
from ..backbone import Params
from ..model import CountModel, ModelConfig, decayed
from .losses import LossBundle, glc_loss, gt_sum_loss, regression_loss, total_loss
from .optim import AdamState, adam_step
from .partition import PartitionGrid, batch_from_views, resize_bilinear, sample_views

log = logging.getLogger(__name__)

Sample = tuple[np.ndarray, float]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: PartitionGrid = field(default_factory=PartitionGrid)
    alpha: float = 1.0
    loss: Literal["glc", "gt"] = "glc"  # gt: L_r + L_gt instead of L_r + alpha * L_c
    glc_detach_global: bool = False
    batch_size: int = 6
    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in ("glc", "gt"):
            raise ValueError(f"TrainConfig.loss: expected 'glc' or 'gt', got {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("TrainConfig.batch_size and epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("TrainConfig.alpha must be >= 0")

    @property
    def uses_locals(self) -> bool:
        return self.loss == "gt" or self.alpha != 0.0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossBundle
    val_mae: float | None


def batch_losses(
    model: CountModel,
    params: Params,
    items: np.ndarray,
    counts: np.ndarray,
    config: TrainConfig,
) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    """Forward b*(n+1) items (or b globals only) and build the objective."""
    preds = model.forward(params, items)
    b = len(counts)
    if not config.uses_locals:
        l_r = regression_loss(preds, counts)
        return l_r, {"l_r": l_r}
    n = config.grid.n
    globals_ = ad.take(preds, [i * (n + 1) for i in range(b)])
    locals_ = ad.take(preds, [i * (n + 1) + j for i in range(b) for j in range(1, n + 1)]).reshape(b, n)
    l_r = regression_loss(globals_, counts)
    if config.loss == "gt":
        l_gt = gt_sum_loss(locals_, counts)
        return ad.add(l_r, l_gt), {"l_r": l_r, "l_gt": l_gt}
    l_c = glc_loss(globals_, locals_, detach_global=config.glc_detach_global)
    return total_loss(l_r, l_c, config.alpha), {"l_r": l_r, "l_c": l_c}


def prepare_views(samples: Sequence[Sample], config: TrainConfig, input_size: int) -> list[np.ndarray]:
    if config.uses_locals:
        return [sample_views(np.asarray(img, dtype=np.float64), config.grid, input_size) for img, _ in samples]
    return [resize_bilinear(np.asarray(img, dtype=np.float64), input_size, input_size)[None] for img, _ in samples]


def train(
    config: TrainConfig,
    dataset: Sequence[Sample],
    validation: tuple[np.ndarray, np.ndarray] | None = None,
    params: Params | None = None,
) -> tuple[Params, list[EpochRecord]]:
    """Train from ``config.seed``; returns final parameters and one record per epoch."""
    if not dataset:
        raise ValueError("train: empty dataset")
    model = CountModel(config.model)
    params = dict(params) if params is not None else model.init_params(config.seed)
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    views = prepare_views(dataset, config, model.input_size)
    counts = np.array([float(c) for _, c in dataset])
    rng = np.random.default_rng([config.seed, 7])
    grid = config.grid if config.uses_locals else PartitionGrid(1, 1)
    history: list[EpochRecord] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        sums: dict[str, float] = {}
        n_batches = 0
        for k, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = batch_from_views([views[i] for i in idx], counts[idx], grid)
            try:
                with Tape() as tape:
                    objective, parts = batch_losses(model, params, batch.items, batch.global_counts, config)
                tape.backward(objective)
            except ad.NonFiniteError as exc:
                raise ad.NonFiniteError(f"epoch {epoch} batch {k}: {exc}") from exc
            if not np.isfinite(objective.item()):
                raise ad.NonFiniteError(f"epoch {epoch} batch {k}: non-finite loss")
            grads = {name: tape.grad(t) for name, t in params.items()}
            params, state = adam_step(params, grads, state, decay=decayed)
            if sfsl.F_HAT in params:
                sfsl.check_f_hat(params[sfsl.F_HAT])
            for key, t in parts.items():
                sums[key] = sums.get(key, 0.0) + t.item()
            sums["total"] = sums.get("total", 0.0) + objective.item()
            n_batches += 1

        mean = {key: v / n_batches for key, v in sums.items()}
        bundle = LossBundle(
            l_r=mean["l_r"],
            l_c=mean.get("l_c"),
            l_gt=mean.get("l_gt"),
            alpha=config.alpha,
            total=mean["total"],
        )
        val_mae = None
        if validation is not None:
            preds = model.predict(params, validation[0])
            val_mae = float(np.mean(np.abs(preds - validation[1])))
        history.append(EpochRecord(epoch, bundle, val_mae))
        log.debug("epoch %d l_r=%.4g l_c=%s val_mae=%s", epoch, bundle.l_r, bundle.l_c, val_mae)
    return params, history
