"""Seeded finite-difference verification of every op and of the full training objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .backbone import BackboneConfig
from .glc import PartitionGrid, TrainConfig, batch_losses, sample_views
from .model import CountModel, ModelConfig

TOLERANCE = 1e-4
COMPOSITE_STEP = 1e-7  # small enough that a probe rarely crosses a ReLU kink

Case = tuple[str, Callable[[Tensor], Tensor], np.ndarray]


@dataclass
class CaseResult:
    name: str
    error: float
    passed: bool


@dataclass
class GradCheckReport:
    results: list[CaseResult] = field(default_factory=list)
    control_error: float = 0.0

    @property
    def control_detected(self) -> bool:
        return self.control_error > TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results) and self.control_detected

    def lines(self) -> list[str]:
        out = [f"{'ok' if r.passed else 'FAIL'} {r.name} rel_err={r.error:.3e}" for r in self.results]
        failed = sum(not r.passed for r in self.results)
        out.append(f"negative control (mul adjoint x1.5): rel_err={self.control_error:.3e} "
                   f"{'detected' if self.control_detected else 'NOT detected'}")
        out.append(f"{len(self.results) - failed}/{len(self.results)} cases passed")
        return out


def _proj(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights> so every output coordinate carries a distinct adjoint."""
    return ad.mul(out, Tensor(weights.reshape(out.shape))).sum()


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...], margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> list[Case]:
    """One random instance per op input slot."""
    cases: list[Case] = []
    shape = (3, 4)
    w = rng.normal(size=shape)
    other = rng.normal(size=shape)
    pos = rng.uniform(0.5, 2.0, size=shape)
    for kind in ("add", "sub", "mul"):
        c = Tensor(other)
        cases.append((f"{kind}[a]", lambda t, k=kind, c=c: _proj(ad.apply_op(k, [t, c]), w), rng.normal(size=shape)))
        cases.append((f"{kind}[b]", lambda t, k=kind, c=c: _proj(ad.apply_op(k, [c, t]), w), rng.normal(size=shape)))
    cases.append(("div[a]", lambda t, c=Tensor(pos): _proj(ad.div(t, c), w), rng.normal(size=shape)))
    cases.append(("div[b]", lambda t, c=Tensor(other): _proj(ad.div(c, t), w), pos.copy()))
    cases.append(("scale", lambda t, f=float(rng.normal()): _proj(t * f, w), rng.normal(size=shape)))
    cases.append(("relu", lambda t: _proj(ad.relu(t), w), _away_from_zero(rng, shape)))
    cases.append(("exp", lambda t: _proj(t.exp(), w), rng.normal(size=shape)))
    cases.append(("sqrt", lambda t: _proj(t.sqrt(), w), pos.copy()))
    axis = int(rng.integers(0, 2))
    cases.append(("sum", lambda t: _proj(t.sum(axis=axis), w.sum(axis=axis)), rng.normal(size=shape)))
    cases.append(("mean", lambda t: _proj(t.mean(axis=axis), w.sum(axis=axis)), rng.normal(size=shape)))
    c2 = Tensor(rng.normal(size=(2, 4)))
    wc = rng.normal(size=(5, 4))
    cases.append(("concat", lambda t: _proj(ad.concat([t, c2], axis=0), wc), rng.normal(size=shape)))
    w3 = rng.normal(size=(4, 2, 3))
    cases.append(("transpose", lambda t: _proj(t.transpose(2, 0, 1), w3), rng.normal(size=(2, 3, 4))))
    cases.append(("reshape", lambda t: _proj(t.reshape(4, 3), w), rng.normal(size=shape)))
    wb = rng.normal(size=(2, 3, 4))
    cases.append(("broadcast", lambda t: _proj(ad.broadcast_to(t, (2, 3, 4)), wb), rng.normal(size=(4,))))
    idx = [2, 0, 2]
    cases.append(("take", lambda t: _proj(ad.take(t, idx, axis=1), w[:, :3]), rng.normal(size=shape)))
    m2 = Tensor(rng.normal(size=(4, 5)))
    wm = rng.normal(size=(3, 5))
    cases.append(("matmul[a]", lambda t: _proj(ad.matmul(t, m2), wm), rng.normal(size=shape)))
    a3 = Tensor(rng.normal(size=(2, 3, 4)))
    wbm = rng.normal(size=(2, 3, 5))
    cases.append(("matmul[b]", lambda t: _proj(ad.matmul(a3, t), wbm), rng.normal(size=(2, 4, 5))))
    cases.append(("softmax-rows", lambda t: _proj(ad.softmax_rows(t), w), rng.normal(size=shape)))

    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 2, 6, 6))
    k = rng.normal(size=(3, 2, 3, 3)) * 0.5
    bias = rng.normal(size=3)
    out_side = ad.conv_output_size(6, 3, stride, pad)
    wconv = rng.normal(size=(2, 3, out_side, out_side))
    tx, tk, tb = Tensor(x), Tensor(k), Tensor(bias)
    cases.append(("conv2d[x]", lambda t: _proj(ad.conv2d(t, tk, tb, stride, pad), wconv), x))
    cases.append(("conv2d[w]", lambda t: _proj(ad.conv2d(tx, t, tb, stride, pad), wconv), k))
    cases.append(("conv2d[bias]", lambda t: _proj(ad.conv2d(tx, tk, t, stride, pad), wconv), bias))

    feats = rng.normal(size=(5, 4))
    vec = rng.normal(size=4)
    wcos = rng.normal(size=5)
    tv, tf = Tensor(vec), Tensor(feats)
    cases.append(("cosine[f]", lambda t: _proj(ad.apply_op("cosine", [t, tv]), wcos), feats))
    cases.append(("cosine[v]", lambda t: _proj(ad.apply_op("cosine", [tf, t]), wcos), vec))
    return cases


def composite_cases(seed: int, variant: str = "conv") -> list[Case]:
    """L_r + L_c on a b=1, n=4 micro-batch, one case per trainable tensor."""
    rng = np.random.default_rng([seed, 101])
    backbone = BackboneConfig(variant=variant, input_size=32, patch_size=8)  # type: ignore[arg-type]
    model = CountModel(ModelConfig(backbone=backbone))
    config = TrainConfig(model=model.config, grid=PartitionGrid(2, 2))
    params = model.init_params(seed)
    # zero biases put dead ReLU units exactly on the kink, where central differences
    # see half a slope; small random biases keep the probe point differentiable
    for name, t in params.items():
        if name.endswith("bias") or name.split(".")[-1].startswith("b"):
            params[name] = Tensor(rng.uniform(0.05, 0.1, size=t.shape), requires_grad=True)
    image = rng.uniform(0.0, 1.0, size=(32, 32))
    items = sample_views(image, config.grid, 32)
    counts = np.array([float(rng.integers(5, 20))])

    cases: list[Case] = []
    for name in params:
        def objective(t: Tensor, name: str = name) -> Tensor:
            local = dict(params)
            local[name] = t
            return batch_losses(model, local, items, counts, config)[0]

        cases.append((f"{variant}:{name}", objective, params[name].data.copy()))
    return cases


def negative_control(seed: int = 0) -> float:
    """Relative error with the mul adjoint deliberately scaled; must exceed the tolerance."""
    x = np.random.default_rng([seed, 202]).uniform(0.5, 1.5, size=(4,))
    with ad.inject_adjoint_fault("mul", 1.5):
        return grad_check(lambda t: (t * t * t).sum(), x)


def run_suite(seed: int = 0, cases: int = 120, max_coords: int = 8) -> GradCheckReport:
    """Random op instances until at least ``cases`` have run, then the composite objective."""
    report = GradCheckReport()
    round_ = 0
    while len(report.results) < cases:
        rng = np.random.default_rng([seed, round_])
        for name, fn, point in op_cases(rng):
            err = grad_check(fn, point, seed=round_)
            report.results.append(CaseResult(f"{name}#{round_}", err, err <= TOLERANCE))
        round_ += 1
    for variant in ("conv", "token"):
        for name, fn, point in composite_cases(seed, variant):
            err = grad_check(fn, point, step=COMPOSITE_STEP, max_coords=max_coords, seed=seed)
            report.results.append(CaseResult(name, err, err <= TOLERANCE))
    report.control_error = negative_control(seed)
    return report
