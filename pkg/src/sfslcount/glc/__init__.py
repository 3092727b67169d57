from .losses import LossBundle, glc_loss, gt_sum_loss, regression_loss, total_loss
from .optim import AdamState, adam_step
from .partition import (
    PartitionGrid,
    TrainingBatch,
    assemble_batch,
    partition_image,
    resize_bilinear,
    sample_views,
    tile_bounds,
)
from .train import EpochRecord, TrainConfig, batch_losses, train

__all__ = [
    "AdamState",
    "EpochRecord",
    "LossBundle",
    "PartitionGrid",
    "TrainConfig",
    "TrainingBatch",
    "adam_step",
    "assemble_batch",
    "batch_losses",
    "glc_loss",
    "gt_sum_loss",
    "partition_image",
    "regression_loss",
    "resize_bilinear",
    "sample_views",
    "tile_bounds",
    "total_loss",
    "train",
]
