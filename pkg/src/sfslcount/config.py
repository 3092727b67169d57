"""Run configuration: ``key = value`` files, canonical form and digest."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .datagen import DatasetSpec
from .glc import PartitionGrid, TrainConfig
from .model import ModelConfig

# keys that name output locations; they never change results and stay out of the digest
_OUTPUT_KEYS = frozenset({"history_out"})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # model
    variant: str = "conv"
    head: str = "sfsl"
    input_size: int = 64
    feature_dim: int = 0  # 0 picks the variant default: 16 conv, 32 token
    conv_widths: tuple[int, ...] = (8, 16, 16)
    patch_size: int = 16
    token_layers: int = 2
    heads: int = 4
    token_mlp: int = 64
    mlp_hidden: tuple[int, ...] = (128, 64)
    # objective and optimiser
    grid: str = "2x2"
    alpha: float = 1.0
    loss: str = "glc"
    glc_detach_global: bool = False
    batch_size: int = 6
    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    patch_label_mode: bool = False
    label_noise_sigma: float = 0.0
    # synthetic data
    num_scenes: int = 250
    num_test: int = 50
    image_size: int = 64
    count_min: int = 5
    count_max: int = 50
    blob_sigma_min: float = 1.0
    blob_sigma_max: float = 2.5
    background_noise_std: float = 0.02
    perspective_gradient: bool = False
    data_seed: int = 0
    # outputs
    history_out: str = ""

    def __post_init__(self) -> None:
        # build the derived configs once so invalid combinations fail early
        self.model_config()
        self.partition_grid()
        self.dataset_spec()
        if not 0 <= self.num_test < self.num_scenes:
            raise ConfigError("num_test must satisfy 0 <= num_test < num_scenes")
        if self.label_noise_sigma < 0:
            raise ConfigError("label_noise_sigma must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")

    # -- derived configs ---------------------------------------------------------

    def model_config(self) -> ModelConfig:
        try:
            bb = BackboneConfig(
                variant=self.variant,  # type: ignore[arg-type]
                input_size=self.input_size,
                feature_dim=self.feature_dim or None,
                conv_widths=tuple(self.conv_widths),
                patch_size=self.patch_size,
                token_layers=self.token_layers,
                heads=self.heads,
                mlp_hidden=self.token_mlp,
            )
            return ModelConfig(backbone=bb, head=self.head, hidden=tuple(self.mlp_hidden))  # type: ignore[arg-type]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def partition_grid(self) -> PartitionGrid:
        try:
            return PartitionGrid.parse(self.grid)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None

    def train_config(self, seed: int | None = None) -> TrainConfig:
        try:
            return TrainConfig(
                model=self.model_config(),
                grid=self.partition_grid(),
                alpha=self.alpha,
                loss=self.loss,  # type: ignore[arg-type]
                glc_detach_global=self.glc_detach_global,
                batch_size=self.batch_size,
                epochs=self.epochs,
                lr=self.lr,
                weight_decay=self.weight_decay,
                beta1=self.beta1,
                beta2=self.beta2,
                adam_eps=self.adam_eps,
                seed=self.seed if seed is None else seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def dataset_spec(self) -> DatasetSpec:
        try:
            return DatasetSpec(
                num_scenes=self.num_scenes,
                image_size=self.image_size,
                count_min=self.count_min,
                count_max=self.count_max,
                blob_sigma_range=(self.blob_sigma_min, self.blob_sigma_max),
                background_noise_std=self.background_noise_std,
                perspective_gradient=self.perspective_gradient,
                seed=self.data_seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- canonical form ------------------------------------------------------------

    def canonical_text(self, include_outputs: bool = False) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name in _OUTPUT_KEYS and not include_outputs:
                continue
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


_TYPES = typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str, line_no: int) -> Any:
    kind = _TYPES[key]
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if typing.get_origin(kind) is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        pass
    expected = {bool: "a boolean", int: "an integer", float: "a number", str: "a string"}.get(
        kind, "a comma-separated list of integers"
    )
    raise ConfigError(f"line {line_no}: {key} expects {expected}, got {text!r}")


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        values[key] = _convert(key, raw, line_no)
    return RunConfig(**values)


def parse_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))
