"""Count losses: global regression, global-local consistency and its ground-truth variant."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


@dataclass(frozen=True)
class LossBundle:
    l_r: float
    l_c: float | None
    l_gt: float | None
    alpha: float
    total: float


def _const(values: Sequence[float] | np.ndarray | Tensor) -> Tensor:
    if isinstance(values, Tensor):
        return Tensor._wrap(values.data)
    return Tensor(np.asarray(values, dtype=np.float64))


def _check_globals(kind: str, preds: Tensor, other: Tensor) -> None:
    if preds.ndim != 1 or other.ndim != 1 or preds.shape != other.shape:
        raise ad.ShapeError(f"{kind}: expected two length-b vectors, got {preds.shape} and {other.shape}")


def regression_loss(global_preds: Tensor, counts: Sequence[float] | np.ndarray | Tensor) -> Tensor:
    """(1/b) sum_i (pred_i - count_i)^2."""
    target = _const(counts)
    _check_globals("regression_loss", global_preds, target)
    return ad.square(ad.sub(global_preds, target)).mean()


def _local_sums(kind: str, local_preds: Tensor, b: int) -> Tensor:
    if local_preds.ndim != 2 or local_preds.shape[0] != b:
        raise ad.ShapeError(f"{kind}: local predictions must be ({b}, n), got {local_preds.shape}")
    return local_preds.sum(axis=1)


def glc_loss(global_preds: Tensor, local_preds: Tensor, detach_global: bool = False) -> Tensor:
    """(1/b) sum_i (sum_j local_ij - global_i)^2; gradient reaches both branches unless detached."""
    if global_preds.ndim != 1:
        raise ad.ShapeError(f"glc_loss: global predictions must be 1-D, got {global_preds.shape}")
    sums = _local_sums("glc_loss", local_preds, global_preds.shape[0])
    ref = _const(global_preds) if detach_global else global_preds
    return ad.square(ad.sub(sums, ref)).mean()


def gt_sum_loss(local_preds: Tensor, counts: Sequence[float] | np.ndarray | Tensor) -> Tensor:
    """(1/b) sum_i (sum_j local_ij - count_i)^2."""
    target = _const(counts)
    if target.ndim != 1:
        raise ad.ShapeError(f"gt_sum_loss: counts must be 1-D, got {target.shape}")
    sums = _local_sums("gt_sum_loss", local_preds, target.shape[0])
    return ad.square(ad.sub(sums, target)).mean()


def total_loss(l_r: Tensor, l_c: Tensor, alpha: float) -> Tensor:
    return ad.add(l_r, l_c * alpha)
