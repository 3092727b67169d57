"""Toy feature extractors: a strided conv stack and a small patch-token encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    variant: Literal["conv", "token"] = "conv"
    input_size: int = 64
    in_channels: int = 1
    feature_dim: int | None = None  # 16 for conv, 32 for token when unset
    # conv variant
    conv_layers: int = 4
    conv_widths: tuple[int, ...] = (8, 16, 16)  # hidden layers; the last layer emits feature_dim
    kernel_size: int = 3
    downsample: int = 8
    # token variant
    patch_size: int = 16
    token_layers: int = 2
    heads: int = 4
    mlp_hidden: int = 64

    def __post_init__(self) -> None:
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", 16 if self.variant == "conv" else 32)
        self.validate()

    @property
    def dim(self) -> int:
        assert self.feature_dim is not None
        return self.feature_dim

    def validate(self) -> None:
        def bad(name: str, why: str) -> None:
            raise ValueError(f"BackboneConfig.{name}: {why}")

        if self.variant not in ("conv", "token"):
            bad("variant", f"expected 'conv' or 'token', got {self.variant!r}")
        for name in ("input_size", "in_channels", "feature_dim", "conv_layers",
                     "kernel_size", "downsample", "patch_size", "token_layers", "heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.variant == "conv":
            if len(self.conv_widths) != self.conv_layers - 1 or min(self.conv_widths, default=1) < 1:
                bad("conv_widths", f"need {self.conv_layers - 1} positive widths, got {self.conv_widths}")
            ds = self.downsample
            if ds & (ds - 1):
                bad("downsample", f"must be a power of two, got {ds}")
            if ds.bit_length() - 1 > self.conv_layers:
                bad("downsample", f"needs {ds.bit_length() - 1} stride-2 layers but conv_layers={self.conv_layers}")
            if self.input_size % ds:
                bad("input_size", f"{self.input_size} not divisible by downsample {ds}")
            if self.kernel_size % 2 == 0:
                bad("kernel_size", "must be odd")
        else:
            if self.input_size % self.patch_size:
                bad("input_size", f"{self.input_size} not divisible by patch_size {self.patch_size}")
            if self.dim % self.heads:
                bad("feature_dim", f"hidden size {self.dim} not divisible by heads {self.heads}")

    @property
    def grid_side(self) -> int:
        if self.variant == "conv":
            return self.input_size // self.downsample
        return self.input_size // self.patch_size

    @property
    def positions(self) -> int:
        """M for the conv variant, K for the token variant."""
        return self.grid_side**2

    def conv_strides(self) -> list[int]:
        n2 = self.downsample.bit_length() - 1
        return [2 if i < n2 else 1 for i in range(self.conv_layers)]

    def conv_channels(self) -> list[tuple[int, int]]:
        widths = [self.in_channels, *self.conv_widths, self.dim]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class FeatureMap:
    """Per-position features, shape (M, D) or batched (N, M, D)."""

    features: Tensor
    layout: tuple[int, int] | None = None

    @property
    def positions(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def param_count(params: Params) -> int:
    return sum(t.data.size for t in params.values())


class Backbone:
    def __init__(self, config: BackboneConfig):
        config.validate()
        self.config = config

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int) -> Params:
        cfg = self.config
        rng = np.random.default_rng(seed)
        raw: dict[str, np.ndarray] = {}
        d = cfg.dim
        if cfg.variant == "conv":
            k = cfg.kernel_size
            for i, (cin, cout) in enumerate(cfg.conv_channels()):
                raw[f"backbone.conv{i}.weight"] = glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
                raw[f"backbone.conv{i}.bias"] = np.zeros(cout)
            raw["backbone.scale.weight"] = glorot(rng, (1, d, 1, 1), d, 1)
            raw["backbone.scale.bias"] = np.zeros(1)
        else:
            p, c, k_tok, h = cfg.patch_size, cfg.in_channels, cfg.positions, cfg.mlp_hidden
            raw["backbone.patch.weight"] = glorot(rng, (p * p * c, d), p * p * c, d)
            raw["backbone.patch.bias"] = np.zeros(d)
            raw["backbone.cls"] = glorot(rng, (d,), 1, d)
            raw["backbone.pos"] = glorot(rng, (k_tok + 1, d), k_tok + 1, d)
            for layer in range(cfg.token_layers):
                pre = f"backbone.block{layer}."
                for name in ("q", "k", "v", "o"):
                    raw[pre + f"w{name}"] = glorot(rng, (d, d), d, d)
                    raw[pre + f"b{name}"] = np.zeros(d)
                raw[pre + "mlp1.weight"] = glorot(rng, (d, h), d, h)
                raw[pre + "mlp1.bias"] = np.zeros(h)
                raw[pre + "mlp2.weight"] = glorot(rng, (h, d), h, d)
                raw[pre + "mlp2.bias"] = np.zeros(d)
        return {name: Tensor(arr, requires_grad=True) for name, arr in raw.items()}

    def expected_param_count(self) -> int:
        cfg = self.config
        d = cfg.dim
        if cfg.variant == "conv":
            k2 = cfg.kernel_size**2
            return sum(cin * cout * k2 + cout for cin, cout in cfg.conv_channels()) + d + 1
        p2c = cfg.patch_size**2 * cfg.in_channels
        per_layer = 4 * (d * d + d) + d * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * d + d
        return p2c * d + d + d + (cfg.positions + 1) * d + cfg.token_layers * per_layer

    # -- forward ------------------------------------------------------------

    def _as_batch(self, image: Tensor | np.ndarray) -> tuple[Tensor, bool]:
        cfg = self.config
        t = image if isinstance(image, Tensor) else Tensor(image)
        single = t.ndim == 3
        if single:
            t = t.reshape((1,) + t.shape)
        if t.ndim != 4 or t.shape[1] != cfg.in_channels or t.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ad.ShapeError(
                f"expected image of shape ({cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {image.shape}"
            )
        return t, single

    def extract_features(self, params: Params, image: Tensor | np.ndarray) -> FeatureMap:
        """Features of a CHW image as (M, D), or of an NCHW batch as (N, M, D)."""
        if self.config.variant == "token":
            _, tokens = self.attention_encode(params, image)
            return FeatureMap(tokens, (self.config.grid_side, self.config.grid_side))
        cfg = self.config
        x, single = self._as_batch(image)
        pad = cfg.kernel_size // 2
        for i, stride in enumerate(cfg.conv_strides()):
            x = ad.conv2d(x, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"],
                          stride=stride, padding=pad)
            x = ad.relu(x)
        n, d, h, w = x.shape
        feats = x.reshape(n, d, h * w).transpose(0, 2, 1)
        if single:
            feats = feats.reshape(h * w, d)
        return FeatureMap(feats, (h, w))

    def inverse_scale_map(self, params: Params, features: FeatureMap) -> Tensor:
        """Per-position 1/s from a 1x1 conv over the feature map; length M (or N x M)."""
        if self.config.variant != "conv":
            raise ValueError("inverse_scale_map is only defined for the conv variant")
        f = features.features
        w = params["backbone.scale.weight"]
        if w.shape[1] != f.shape[-1]:
            raise ad.ShapeError(f"scale head expects {w.shape[1]} channels, features have {f.shape[-1]}")
        out = ad.linear(f, w.reshape(w.shape[1], 1))
        out = ad.add(out, ad.broadcast_to(params["backbone.scale.bias"], out.shape))
        return out.reshape(out.shape[:-1])

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(N, C, H, W) -> (N, K, P*P*C), patches in row-major order."""
        p = self.config.patch_size
        n, c, h, w = images.shape
        x = images.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
        return x.reshape(n, (h // p) * (w // p), p * p * c)

    def attention_encode(self, params: Params, image: Tensor | np.ndarray, return_attention: bool = False):
        """Returns (class_vector, tokens[, attention maps]); shapes (D,), (K, D) or batched."""
        cfg = self.config
        if cfg.variant != "token":
            raise ValueError("attention_encode requires the token variant")
        x_img, single = self._as_batch(image)
        patches = Tensor._wrap(self.patchify(x_img.data))
        n, k_tok = patches.shape[0], patches.shape[1]
        d, heads = cfg.dim, cfg.heads
        dh = d // heads
        t_len = k_tok + 1

        emb = ad.linear(patches, params["backbone.patch.weight"], params["backbone.patch.bias"])
        cls = ad.broadcast_to(params["backbone.cls"], (n, 1, d))
        x = ad.concat([cls, emb], axis=1)
        x = ad.add(x, ad.broadcast_to(params["backbone.pos"], x.shape))

        maps = []
        for layer in range(cfg.token_layers):
            pre = f"backbone.block{layer}."

            def split(t: Tensor) -> Tensor:
                return t.reshape(n, t_len, heads, dh).transpose(0, 2, 1, 3)

            q = split(ad.linear(x, params[pre + "wq"], params[pre + "bq"]))
            k = split(ad.linear(x, params[pre + "wk"], params[pre + "bk"]))
            v = split(ad.linear(x, params[pre + "wv"], params[pre + "bv"]))
            scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
            attn = ad.softmax_rows(scores)
            maps.append(attn.data)
            ctx = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t_len, d)
            x = ad.add(x, ad.linear(ctx, params[pre + "wo"], params[pre + "bo"]))
            hidden = ad.relu(ad.linear(x, params[pre + "mlp1.weight"], params[pre + "mlp1.bias"]))
            x = ad.add(x, ad.linear(hidden, params[pre + "mlp2.weight"], params[pre + "mlp2.bias"]))

        cls_out = ad.take(x, [0], axis=1).reshape(n, d)
        tokens = ad.take(x, range(1, t_len), axis=1)
        if single:
            cls_out, tokens = cls_out.reshape(d), tokens.reshape(k_tok, d)
            maps = [m[0] for m in maps]
        if return_attention:
            return cls_out, tokens, maps
        return cls_out, tokens
