import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfslcount import autodiff as ad
from sfslcount.autodiff import ShapeError, Tape, Tensor
from sfslcount.backbone import BackboneConfig
from sfslcount.glc import (
    AdamState,
    PartitionGrid,
    TrainConfig,
    adam_step,
    assemble_batch,
    glc_loss,
    gt_sum_loss,
    partition_image,
    regression_loss,
    resize_bilinear,
    tile_bounds,
    total_loss,
    train,
)
from sfslcount.model import ModelConfig

from oracles import adam_scalar, bilinear_1d

# -- partition ---------------------------------------------------------------------


def test_grid_parse_and_str():
    g = PartitionGrid.parse("4x4")
    assert (g.rows, g.cols, g.n, str(g)) == (4, 4, 16, "4x4")
    with pytest.raises(ValueError):
        PartitionGrid.parse("four")
    with pytest.raises(ValueError):
        PartitionGrid(0, 2)


def test_quadrants_of_256():
    tiles = partition_image(np.zeros((256, 256)), PartitionGrid())
    assert [t.shape for t in tiles] == [(128, 128)] * 4


def test_odd_size_partition_covers_every_pixel_once():
    coverage = np.zeros((65, 65), dtype=int)
    rows, cols = tile_bounds(65, 2), tile_bounds(65, 2)
    for r0, r1 in rows:
        for c0, c1 in cols:
            coverage[r0:r1, c0:c1] += 1
    assert np.all(coverage == 1)
    assert sorted({r1 - r0 for r0, r1 in rows}) == [32, 33]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(6, 40), st.integers(6, 40))
def test_tiles_reassemble_bit_exactly(rows, cols, h, w):
    img = np.random.default_rng(h * w).normal(size=(h, w))
    tiles = partition_image(img, PartitionGrid(rows, cols))
    strips = [np.concatenate(tiles[r * cols : (r + 1) * cols], axis=1) for r in range(rows)]
    np.testing.assert_array_equal(np.concatenate(strips, axis=0), img)


def test_grid_larger_than_image_rejected():
    with pytest.raises(ValueError):
        partition_image(np.zeros((3, 3)), PartitionGrid(4, 4))


def test_partition_of_tensor_returns_tensors():
    tiles = partition_image(Tensor(np.ones((4, 4))), PartitionGrid())
    assert all(isinstance(t, Tensor) for t in tiles)


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).normal(size=(9, 7))
    np.testing.assert_array_equal(resize_bilinear(img, 9, 7), img)
    const = resize_bilinear(np.full((5, 3), 0.37), 11, 8)
    assert np.all(const == 0.37)


def test_resize_linear_ramp_matches_closed_form():
    ramp = np.arange(8, dtype=float) * 0.3 + 1.0
    img = np.tile(ramp, (3, 1))
    out = resize_bilinear(img, 3, 16)
    np.testing.assert_allclose(out[1], bilinear_1d(list(ramp), 16), atol=1e-12)
    # corner-aligned interpolation of a linear ramp is itself linear
    np.testing.assert_allclose(out[0], np.linspace(ramp[0], ramp[-1], 16), atol=1e-12)


def test_resize_rejects_non_positive():
    with pytest.raises(ValueError):
        resize_bilinear(np.ones((4, 4)), 0, 3)


def test_batch_layout_b6_n4():
    rng = np.random.default_rng(1)
    samples = [(rng.uniform(size=(64, 64)), float(i + 10)) for i in range(6)]
    batch = assemble_batch(samples, PartitionGrid(), 64)
    assert batch.items.shape == (30, 64, 64)
    assert batch.global_index == [0, 5, 10, 15, 20, 25]
    np.testing.assert_array_equal(batch.items[5], samples[1][0])
    q = partition_image(samples[0][0], PartitionGrid())
    np.testing.assert_array_equal(batch.items[1], resize_bilinear(q[0], 64, 64))
    assert batch.global_counts.tolist() == [10.0, 11.0, 12.0, 13.0, 14.0, 15.0]


def test_batch_single_sample():
    batch = assemble_batch([(np.ones((64, 64)), 3.0)], PartitionGrid(), 64)
    assert len(batch.items) == 5 and batch.global_index == [0]


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        assemble_batch([], PartitionGrid(), 64)


# -- losses ---------------------------------------------------------------------------


def test_regression_loss_values():
    assert regression_loss(Tensor([10.0]), [12.0]).item() == 4.0
    assert regression_loss(Tensor([3.0, 4.0]), [3.0, 4.0]).item() == 0.0
    rng = np.random.default_rng(0)
    p, c = rng.normal(size=3), rng.normal(size=3)
    loop = sum((a - b) ** 2 for a, b in zip(p, c)) / 3
    assert math.isclose(regression_loss(Tensor(p), c).item(), loop, rel_tol=1e-15)
    with pytest.raises(ShapeError):
        regression_loss(Tensor([1.0, 2.0]), [1.0])


def test_glc_loss_values():
    assert glc_loss(Tensor([10.0]), Tensor([[2.0, 2.0, 2.0, 2.0]])).item() == 4.0
    assert glc_loss(Tensor([8.0]), Tensor([[2.0, 2.0, 2.0, 2.0]])).item() == 0.0
    with pytest.raises(ShapeError):
        glc_loss(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_glc_loss_zero_iff_consistent(b, n, seed):
    rng = np.random.default_rng(seed)
    local = rng.normal(size=(b, n))
    assert glc_loss(Tensor(local.sum(axis=1)), Tensor(local)).item() == 0.0
    shifted = local.sum(axis=1) + rng.uniform(0.1, 1.0, size=b)
    assert glc_loss(Tensor(shifted), Tensor(local)).item() > 0.0


def test_glc_gradient_reaches_both_branches():
    g = Tensor([10.0], requires_grad=True)
    loc = Tensor([[2.0, 2.0, 2.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = glc_loss(g, loc)
    tape.backward(loss)
    assert tape.grad(g)[0] != 0.0 and np.all(tape.grad(loc) != 0.0)
    eps = 1e-6
    base = loss.item()
    assert glc_loss(Tensor([10.0 + eps]), loc).item() != base
    assert glc_loss(g, Tensor([[2.0 + eps, 2.0, 2.0, 2.0]])).item() != base


def test_detached_global_blocks_that_branch():
    g = Tensor([10.0], requires_grad=True)
    loc = Tensor([[2.0, 2.0, 2.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = glc_loss(g, loc, detach_global=True)
    tape.backward(loss)
    assert tape.grad(g)[0] == 0.0 and np.all(tape.grad(loc) != 0.0)


def test_gt_sum_loss_values():
    assert gt_sum_loss(Tensor([[3.0, 3.0, 3.0, 3.0]]), [10.0]).item() == 4.0
    assert gt_sum_loss(Tensor([[2.5, 2.5, 2.5, 2.5]]), [10.0]).item() == 0.0
    rng = np.random.default_rng(3)
    local, counts = rng.normal(size=(3, 4)), rng.normal(size=3)
    assert gt_sum_loss(Tensor(local), counts).item() == glc_loss(Tensor(counts), Tensor(local)).item()


def test_total_loss():
    assert total_loss(Tensor(2.0), Tensor(3.0), 1.0).item() == 5.0
    assert total_loss(Tensor(2.0), Tensor(3.0), 0.0).item() == 2.0
    assert TrainConfig().alpha == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 4), st.floats(0, 4))
def test_total_loss_linear_in_alpha(lr, lc, a1, a2):
    t = lambda a: total_loss(Tensor(lr), Tensor(lc), a).item()
    assert math.isclose(t(a1) + t(a2) - lr, t(a1 + a2), rel_tol=1e-12, abs_tol=1e-12)


# -- optimiser -------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = {"x": Tensor([1.5, -2.0])}
    out, _ = adam_step(p, {"x": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(out["x"].data, p["x"].data)


def test_adam_first_step_magnitude():
    for g in (1e-3, 0.5, 40.0, -7.0):
        out, _ = adam_step({"x": Tensor([0.0])}, {"x": np.array([g])}, AdamState(lr=0.01))
        assert math.isclose(abs(out["x"].data[0]), 0.01, rel_tol=1e-4)


# reference iterates for x <- x^2 from x = 1 with lr 0.1, evaluated with 50-digit decimals
ADAM_REFERENCE = [0.9000000005, 0.8004122286917921, 0.7015862729460295]


def test_adam_three_steps_match_reference():
    params, state = {"x": Tensor([1.0])}, AdamState(lr=0.1)
    seen = []
    for _ in range(3):
        x = params["x"].data[0]
        params, state = adam_step(params, {"x": np.array([2.0 * x])}, state)
        seen.append(params["x"].data[0])
    assert max(abs(a - b) for a, b in zip(seen, ADAM_REFERENCE)) <= 1e-12
    assert max(abs(a - b) for a, b in zip(seen, adam_scalar(lambda x: 2 * x, 1.0, 3, 0.1))) <= 1e-12


def test_adam_coupled_weight_decay_and_exemption():
    params = {"w": Tensor([1.0]), "keep": Tensor([1.0])}
    grads = {"w": np.array([0.5]), "keep": np.array([0.5])}
    state = AdamState(lr=0.1, weight_decay=0.2)
    out, _ = adam_step(params, grads, state, decay=lambda n: n != "keep")
    ref = adam_scalar(lambda x: 0.5, 1.0, 1, 0.1, weight_decay=0.2)[0]
    assert math.isclose(out["w"].data[0], ref, rel_tol=1e-15)
    assert math.isclose(out["keep"].data[0], adam_scalar(lambda x: 0.5, 1.0, 1, 0.1)[0], rel_tol=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"x": Tensor([1.0, 2.0])}, {"x": np.zeros(3)}, AdamState())


def test_adam_step_decreases_convex_quadratic():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 2.0, size=5)
    x = Tensor(rng.normal(size=5) * 3)
    f = lambda v: float(np.sum(a * v * v))
    out, _ = adam_step({"x": x}, {"x": 2 * a * x.data}, AdamState(lr=0.01))
    assert f(out["x"].data) < f(x.data)


# -- training loop ---------------------------------------------------------------------


def _tiny_model():
    return ModelConfig(BackboneConfig(input_size=32, conv_widths=(4, 8, 8), feature_dim=8), hidden=(16,))


def _tiny_data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.uniform(size=(32, 32)), float(rng.integers(5, 20))) for _ in range(n)]


def test_train_history_and_determinism():
    cfg = TrainConfig(model=_tiny_model(), epochs=3, batch_size=3, seed=4)
    data = _tiny_data(5)
    p1, h1 = train(cfg, data)
    p2, h2 = train(cfg, data)
    assert len(h1) == 3 and [r.epoch for r in h1] == [1, 2, 3]
    assert h1 == h2
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data)
    assert all(r.losses.l_c is not None for r in h1)


def test_train_alpha_zero_skips_subimages():
    cfg = TrainConfig(model=_tiny_model(), epochs=1, alpha=0.0)
    _, hist = train(cfg, _tiny_data())
    assert hist[0].losses.l_c is None and hist[0].losses.total == hist[0].losses.l_r


def test_train_gt_variant_records_lgt():
    cfg = TrainConfig(model=_tiny_model(), epochs=1, loss="gt")
    _, hist = train(cfg, _tiny_data())
    assert hist[0].losses.l_gt is not None and hist[0].losses.l_c is None


def test_train_records_validation_mae():
    data = _tiny_data(4)
    x = np.stack([img for img, _ in data])
    y = np.array([c for _, c in data])
    _, hist = train(TrainConfig(model=_tiny_model(), epochs=2), data, validation=(x, y))
    assert all(r.val_mae is not None and r.val_mae >= 0 for r in hist)


def test_train_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        train(TrainConfig(model=_tiny_model(), epochs=1), [])
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1.0)


def test_non_finite_loss_reports_epoch_and_batch():
    data = [(np.full((32, 32), 0.5), 1e200)]
    with pytest.raises(ad.NonFiniteError, match="epoch 1 batch 0"):
        train(TrainConfig(model=_tiny_model(), epochs=1), data)
