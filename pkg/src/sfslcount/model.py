"""Backbone + count head assemblies used by training and evaluation.

Heads:
    sfsl    conv: MLP over (p / s, p); token: affine layer over (d_cls, p)
    direct  conv only: MLP over a density map d' read directly off the scale head
    cls     token only: affine layer over the class-token vector
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import autodiff as ad
from . import sfsl
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, Params, glorot

HeadKind = Literal["sfsl", "direct", "cls"]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadKind = "sfsl"
    hidden: tuple[int, ...] = sfsl.MLP_HIDDEN

    def __post_init__(self) -> None:
        allowed = ("sfsl", "direct") if self.backbone.variant == "conv" else ("sfsl", "cls")
        if self.head not in allowed:
            raise ValueError(f"ModelConfig.head: {self.head!r} not valid for {self.backbone.variant} backbone")


class CountModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.backbone = Backbone(config.backbone)

    @property
    def input_size(self) -> int:
        return self.config.backbone.input_size

    def init_params(self, seed: int) -> Params:
        cfg = self.config
        bcfg = cfg.backbone
        params = self.backbone.init_params(seed)
        m, d = bcfg.positions, bcfg.dim
        if cfg.head == "sfsl":
            variant = "cnn" if bcfg.variant == "conv" else "token"
            params.update(sfsl.init_head_params(variant, m, d, [seed, 1], cfg.hidden))
        elif cfg.head == "direct":
            rng = np.random.default_rng([seed, 2])
            widths = [m, *cfg.hidden, 1]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                params[f"head.fc{i}.weight"] = Tensor(glorot(rng, (a, b), a, b), requires_grad=True)
                params[f"head.fc{i}.bias"] = Tensor(np.zeros(b), requires_grad=True)
        else:
            rng = np.random.default_rng([seed, 3])
            params["head.w"] = Tensor(glorot(rng, (d,), d, 1), requires_grad=True)
            params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
        return params

    def _images(self, images: np.ndarray | Tensor) -> Tensor:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        return Tensor._wrap(np.array(arr, dtype=np.float64))

    def forward(self, params: Params, images: np.ndarray | Tensor) -> Tensor:
        """Predicted counts, shape (N,), for images shaped (N, H, W) or (N, C, H, W)."""
        x = self._images(images)
        cfg = self.config
        if cfg.backbone.variant == "conv":
            fmap = self.backbone.extract_features(params, x)
            inv_s = self.backbone.inverse_scale_map(params, fmap)
            if cfg.head == "direct":
                return sfsl.mlp(inv_s, params, "head.")
            p = sfsl.probability_map(fmap, params[sfsl.F_HAT])
            d = sfsl.density_map(p, inv_s)
            return sfsl.regress_count(d, p, params, "cnn")
        cls_vec, tokens = self.backbone.attention_encode(params, x)
        if cfg.head == "cls":
            w = params["head.w"]
            out = ad.matmul(cls_vec, w.reshape(w.shape[0], 1))
            out = ad.add(out, ad.broadcast_to(params["head.b"], out.shape))
            return out.reshape(out.shape[0])
        p = sfsl.probability_map(tokens, params[sfsl.F_HAT])
        return sfsl.regress_count(cls_vec, p, params, "token")

    def predict(self, params: Params, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Forward without recording, in chunks."""
        images = np.asarray(images, dtype=np.float64)
        out = [self.forward(params, images[i : i + chunk]).data for i in range(0, len(images), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


def decayed(name: str) -> bool:
    """Weight decay applies to every trainable tensor except f_hat."""
    return name != sfsl.F_HAT
