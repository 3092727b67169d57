"""Self-adaptive feature similarity head.

A learnable reference vector ``f_hat`` scores every feature position by a
cosine similarity rescaled to [0, 1]; the resulting probability map, alone or
multiplied by a predicted inverse scale, feeds a count regressor.
"""

from __future__ import annotations

from typing import Iterable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import COSINE_EPS, Tensor
from .backbone import FeatureMap, Params, glorot

F_HAT = "sfsl.f_hat"
MIN_F_HAT_NORM = 1e-8
MLP_HIDDEN = (128, 64)


class DegenerateFeatureError(ad.NonFiniteError):
    """The learned reference vector collapsed toward zero norm."""


def random_unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def check_f_hat(f_hat: Tensor | np.ndarray) -> None:
    arr = f_hat.data if isinstance(f_hat, Tensor) else np.asarray(f_hat)
    norm = float(np.linalg.norm(arr))
    if not norm >= MIN_F_HAT_NORM:
        raise DegenerateFeatureError(f"|f_hat| = {norm:.3e} fell below {MIN_F_HAT_NORM:g}")


def init_head_params(
    variant: Literal["cnn", "token"],
    positions: int,
    dim: int,
    seed: int | Sequence[int],
    hidden: Sequence[int] = MLP_HIDDEN,
) -> Params:
    """f_hat on the unit sphere plus the regressor for ``variant``.

    cnn: an MLP over concat(d, p) of width 2M with ``hidden`` relu layers.
    token: a single affine layer over concat(d, p'), where p' is p projected
    from K to D when K != D.
    """
    rng = np.random.default_rng(seed)
    raw: dict[str, np.ndarray] = {F_HAT: random_unit_vector(rng, dim)}
    if variant == "cnn":
        widths = [2 * positions, *hidden, 1]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            raw[f"sfsl.fc{i}.weight"] = glorot(rng, (a, b), a, b)
            raw[f"sfsl.fc{i}.bias"] = np.zeros(b)
    elif variant == "token":
        if positions != dim:
            raw["sfsl.p_proj"] = glorot(rng, (positions, dim), positions, dim)
        raw["sfsl.w"] = glorot(rng, (2 * dim,), 2 * dim, 1)
        raw["sfsl.b"] = np.zeros(1)
    else:
        raise ValueError(f"unknown head variant {variant!r}")
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def cosine_similarity(f: Tensor, f_hat: Tensor) -> Tensor:
    """(f . f_hat) / (2 max(|f||f_hat|, eps)) + 0.5, row-wise over the last axis of ``f``."""
    if f.shape[-1:] != f_hat.shape or f_hat.ndim != 1:
        raise ad.ShapeError(f"cosine_similarity: length mismatch {f.shape} vs {f_hat.shape}")
    check_f_hat(f_hat)
    return ad.apply_op("cosine", [f, f_hat], eps=COSINE_EPS)


def probability_map(features: FeatureMap | Tensor, f_hat: Tensor) -> Tensor:
    f = features.features if isinstance(features, FeatureMap) else features
    if f.shape[-1] != f_hat.shape[0]:
        raise ad.ShapeError(f"probability_map: feature dim {f.shape[-1]} != f_hat dim {f_hat.shape[0]}")
    return cosine_similarity(f, f_hat)


def density_map(p: Tensor, inv_s: Tensor) -> Tensor:
    if p.shape != inv_s.shape:
        raise ad.ShapeError(f"density_map: length mismatch {p.shape} vs {inv_s.shape}")
    return ad.mul(p, inv_s)


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    """Stack of ``{prefix}fc{i}`` affine layers with relu between them; last layer linear."""
    i = 0
    while f"{prefix}fc{i + 1}.weight" in params:
        x = ad.relu(ad.linear(x, params[f"{prefix}fc{i}.weight"], params[f"{prefix}fc{i}.bias"]))
        i += 1
    out = ad.linear(x, params[f"{prefix}fc{i}.weight"], params[f"{prefix}fc{i}.bias"])
    return out.reshape(out.shape[:-1])


def regress_count(d: Tensor, p: Tensor, params: Params, variant: Literal["cnn", "token"]) -> Tensor:
    """Count from (d, p); scalar for unbatched inputs, length N for batched ones."""
    if variant == "cnn":
        expected = params["sfsl.fc0.weight"].shape[0]
        if d.shape[-1] + p.shape[-1] != expected:
            raise ad.ShapeError(
                f"regress_count: input width {d.shape[-1]} + {p.shape[-1]} != regressor width {expected}"
            )
        return mlp(ad.concat([d, p], axis=-1), params, "sfsl.")
    if variant == "token":
        if "sfsl.p_proj" in params:
            proj = params["sfsl.p_proj"]
            if p.shape[-1] != proj.shape[0]:
                raise ad.ShapeError(f"regress_count: p has {p.shape[-1]} entries, projection expects {proj.shape[0]}")
            p = ad.matmul(p.reshape(-1, p.shape[-1]), proj).reshape(p.shape[:-1] + (proj.shape[1],))
        w = params["sfsl.w"]
        if d.shape[-1] + p.shape[-1] != w.shape[0]:
            raise ad.ShapeError(f"regress_count: input width {d.shape[-1]} + {p.shape[-1]} != {w.shape[0]}")
        x = ad.concat([d, p], axis=-1)
        lead = x.shape[:-1]
        out = ad.matmul(x.reshape(-1, w.shape[0]), w.reshape(w.shape[0], 1))
        out = ad.add(out, ad.broadcast_to(params["sfsl.b"], out.shape))
        return out.reshape(lead) if lead else out.reshape(())
    raise ValueError(f"unknown head variant {variant!r}")


def unbiased_objective(feature_maps: Iterable[FeatureMap | Tensor], f_hat: Tensor) -> Tensor:
    """Sum over all positions of sim(f_i, f_hat)^2, i.e. sum p_i sim(f_i, f_hat) with p_i = sim."""
    total = None
    for fm in feature_maps:
        p = probability_map(fm, f_hat)
        term = ad.square(p).sum()
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("unbiased_objective: no feature maps")
    return total
