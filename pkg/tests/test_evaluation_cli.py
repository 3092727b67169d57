import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfslcount import cli
from sfslcount.checkpoint import (
    RUN_CONFIG_KEY,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    make_checkpoint,
    restore,
    save_checkpoint,
)
from sfslcount.config import ConfigError, RunConfig, parse_config, parse_config_text
from sfslcount.datagen import generate_dataset, save_dataset
from sfslcount.evaluation import (
    ABLATION_ARMS,
    CSV_HEADER,
    ExperimentRecord,
    SuiteFailure,
    ablation_suite,
    consistency_gap,
    evaluate_run,
    mae_mse,
    read_csv,
    robustness_sweep,
    split_scenes,
    training_samples,
    write_csv,
)
from sfslcount.glc import AdamState, PartitionGrid, adam_step
from sfslcount.model import CountModel
from sfslcount.sfsl import F_HAT

from oracles import mae_mse_exact

TINY = """
# small enough to train in a couple of seconds
input_size = 32
image_size = 32
conv_widths = 4,8,8
feature_dim = 8
mlp_hidden = 16
patch_size = 16
token_mlp = 16
num_scenes = 12
num_test = 4
count_min = 2
count_max = 12
epochs = 2
seeds = 0,1,2
"""


@pytest.fixture(scope="module")
def tiny():
    config = parse_config_text(TINY)
    return config, generate_dataset(config.dataset_spec())


# -- metrics ---------------------------------------------------------------------------


def test_mae_mse_examples():
    assert mae_mse([10, 20], [12, 18]) == (2.0, 2.0)
    assert mae_mse([3.0, 4.0], [3.0, 4.0]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        mae_mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae_mse([], [])


def test_mae_mse_matches_exact_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 300))
        p, c = rng.normal(30, 10, size=n), rng.integers(5, 50, size=n).astype(float)
        mae, mse = mae_mse(p, c)
        assert (mae, mse) == mae_mse_exact(p, c)
        assert mse >= mae >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-10**6, 10**6), st.integers(0, 10**6)), min_size=1, max_size=40))
def test_rmse_dominates_mae(pairs):
    # counts and predictions on a 1e-3 grid; squares of subnormal errors would underflow
    p, c = (np.array(v) / 1000.0 for v in zip(*pairs))
    mae, mse = mae_mse(p, c)
    assert mse >= mae * (1 - 1e-15)


def test_csv_format(tmp_path):
    rec = ExperimentRecord("arm", "abc", 3, 1.0 / 3.0, 0.5, 2.0, float("nan"), 0.1, 12.5)
    write_csv(tmp_path / "a.csv", [rec])
    raw = (tmp_path / "a.csv").read_bytes()
    assert raw.decode("utf-8").splitlines()[0] == CSV_HEADER
    assert b"\r" not in raw and raw.endswith(b"\n")
    row = read_csv(tmp_path / "a.csv")[0]
    assert row["mae"] == "0.33333333333333331" and row["seconds"] == "0" and row["final_lc"] == "nan"
    write_csv(tmp_path / "b.csv", [rec], timing=True)
    assert read_csv(tmp_path / "b.csv")[0]["seconds"] == "12.5"
    assert rec.mse_squared == 0.25


# -- consistency gap -----------------------------------------------------------------------


class _ZeroModel:
    input_size = 32

    def predict(self, params, images):
        return np.zeros(len(images))


class _MeanModel:
    """Predicts the mean pixel value of each view."""

    input_size = 32

    def predict(self, params, images):
        return np.array([img.sum() / img.size for img in images])


def test_gap_of_zero_model_is_zero():
    imgs = [np.random.default_rng(i).uniform(size=(32, 32)) for i in range(3)]
    assert consistency_gap(_ZeroModel(), {}, imgs, PartitionGrid()) == 0.0


def test_gap_of_consistent_model_is_zero():
    # a constant image: every view has mean 1, and a grid of 4 sums to 4 x the global 1
    model = _MeanModel()
    imgs = [np.ones((32, 32))]
    assert consistency_gap(model, {}, imgs, PartitionGrid()) == pytest.approx(3.0)
    # scale the global prediction so locals sum to it exactly
    model.predict = lambda params, images: np.array([4.0, 1.0, 1.0, 1.0, 1.0])
    assert consistency_gap(model, {}, imgs, PartitionGrid()) == 0.0


# -- config ----------------------------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# nothing\n\n")
    cfg = parse_config(path)
    assert cfg == RunConfig()
    assert cfg.alpha == 1.0 and cfg.partition_grid().n == 4 and cfg.batch_size == 6


def test_config_override_and_errors():
    assert parse_config_text("alpha = 0.5").alpha == 0.5
    with pytest.raises(ConfigError, match="line 2: unknown key 'alphaa'"):
        parse_config_text("# x\nalphaa = 1\n")
    with pytest.raises(ConfigError, match="epochs expects an integer"):
        parse_config_text("epochs = many")
    with pytest.raises(ConfigError, match="expects a boolean"):
        parse_config_text("patch_label_mode = maybe")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("alpha 1")
    with pytest.raises(ConfigError):
        parse_config_text("variant = token\nhead = direct")


def test_digest_tracks_effective_values():
    base = RunConfig()
    assert parse_config_text("alpha = 1").digest() == base.digest()
    assert parse_config_text("alpha = 1.0000001").digest() != base.digest()
    assert base.replace(history_out="x.csv").digest() == base.digest()
    digests = {base.replace(**{k: v}).digest() for k, v in
               [("epochs", 5), ("lr", 1e-5), ("grid", "4x4"), ("glc_detach_global", True), ("seeds", (1, 2, 3))]}
    assert len(digests) == 5 and base.digest() not in digests


def test_canonical_text_round_trips():
    cfg = RunConfig(alpha=0.25, grid="4x4", seeds=(3, 4, 5), perspective_gradient=True)
    assert parse_config_text(cfg.canonical_text()) == cfg


# -- checkpoints ----------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny):
    config, scenes = tiny
    model = CountModel(config.model_config())
    params = model.init_params(5)
    path = tmp_path / "m.sfsl"
    save_checkpoint(path, make_checkpoint(config, params))
    raw = path.read_bytes()
    assert raw[:4] == b"SFSL"
    ckpt = load_checkpoint(path)
    assert F_HAT in ckpt.tensors and RUN_CONFIG_KEY in ckpt.tensors
    cfg2, model2, params2 = restore(ckpt)
    assert cfg2 == config
    images = np.stack([s.image for s in scenes])
    assert np.array_equal(model.predict(params, images), model2.predict(params2, images))
    save_checkpoint(tmp_path / "n.sfsl", ckpt)
    assert (tmp_path / "n.sfsl").read_bytes() == raw


def test_checkpoint_rejects_bad_files(tmp_path, tiny):
    config, _ = tiny
    raw = make_checkpoint(config, CountModel(config.model_config()).init_params(0)).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="offset"):
        Checkpoint.from_bytes(raw[:-3])


def test_checkpoint_scalar_and_optimizer_state(tiny):
    ckpt = Checkpoint("d", {"s": np.array(2.5), "v": np.arange(3.0)})
    back = Checkpoint.from_bytes(ckpt.to_bytes())
    assert back.tensors["s"].shape == () and back.tensors["s"] == 2.5
    config, _ = tiny
    params = CountModel(config.model_config()).init_params(0)
    grads = {name: np.ones(t.shape) for name, t in params.items()}
    params, state = adam_step(params, grads, AdamState())
    with_state = Checkpoint.from_bytes(make_checkpoint(config, params, state).to_bytes())
    assert with_state.tensors["adam.step"].tolist() == [1.0]
    np.testing.assert_array_equal(with_state.tensors["adam.m." + F_HAT], state.m[F_HAT])
    _, _, restored = restore(with_state)
    assert set(restored) == set(params)


# -- runs and suites ---------------------------------------------------------------------------


def test_split_and_noise_free_labels(tiny):
    config, scenes = tiny
    train_s, test_s = split_scenes(config, scenes)
    assert len(train_s) == 8 and len(test_s) == 4
    clean = training_samples(config, train_s, seed=0, sigma=0.0)
    assert [c for _, c in clean] == [float(s.count) for s in train_s]
    patched = training_samples(config.replace(patch_label_mode=True), train_s, seed=0)
    assert len(patched) == 48


def test_noise_draws_shared_across_sigmas(tiny):
    config, scenes = tiny
    a = [c for _, c in training_samples(config, scenes, seed=1, sigma=0.1)]
    b = [c for _, c in training_samples(config, scenes, seed=1, sigma=0.2)]
    base = [float(s.count) for s in scenes]
    for x, y, c in zip(a, b, base):
        if x > 0 and y > 0:
            assert math.isclose(y - c, 2 * (x - c), rel_tol=1e-9, abs_tol=1e-9)


def test_evaluate_run_is_deterministic(tiny):
    config, scenes = tiny
    a = evaluate_run("x", config, scenes, seed=1)
    b = evaluate_run("x", config, scenes, seed=1)
    assert a.csv_row() == b.csv_row()
    assert a.mse >= a.mae >= 0 and a.config_digest == config.digest()


def test_ablation_suite_layout(tiny):
    config, scenes = tiny
    config = config.replace(epochs=1)
    records = ablation_suite(config, scenes, [0, 1, 2])
    assert len(records) == 6 * 3
    assert [r.arm for r in records[::3]] == list(ABLATION_ARMS)
    by_arm = {}
    for r in records:
        by_arm.setdefault(r.arm, set()).add(r.config_digest)
    assert all(len(d) == 1 for d in by_arm.values())
    assert len(set.union(*by_arm.values())) == 6
    with pytest.raises(ValueError):
        ablation_suite(config, scenes, [0, 1])


def test_robustness_sweep_zero_sigma_equals_clean_run(tiny):
    config, scenes = tiny
    records = robustness_sweep(config, scenes, [0.0, 0.2], [0, 1])
    assert len(records) == 4
    clean = evaluate_run("clean", config, scenes, seed=1)
    assert (records[1].mae, records[1].mse, records[1].final_lr) == (clean.mae, clean.mse, clean.final_lr)
    with pytest.raises(ValueError):
        robustness_sweep(config, scenes, [-0.1], [0])


def test_suite_reports_partial_results(tiny):
    config, scenes = tiny
    bad = config.replace(epochs=1, lr=1e200)
    with pytest.raises(SuiteFailure) as info:
        robustness_sweep(bad, scenes, [0.0], [0, 1])
    assert len(info.value.failures) >= 1
    assert len(info.value.records) + len(info.value.failures) == 2


def test_patch_mode_run(tiny):
    config, scenes = tiny
    rec = evaluate_run("patch", config.replace(patch_label_mode=True, epochs=1), scenes, seed=0)
    assert rec.mae >= 0


# -- command line --------------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, tiny, capsys):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY)
    data = tmp_path / "d.wcds"
    assert cli.main(["datagen", "--spec", str(cfg_path), "--out", str(data)]) == 0
    ckpt = tmp_path / "m.sfsl"
    hist = tmp_path / "h.csv"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(ckpt),
                     "--history", str(hist)]) == 0
    assert len(hist.read_text().splitlines()) == 1 + 2
    out = tmp_path / "e.csv"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    assert read_csv(out)[0]["arm"] == "eval"
    a1, a2 = tmp_path / "a1.csv", tmp_path / "a2.csv"
    args = ["ablate", "--config", str(cfg_path), "--data", str(data), "--arms", "sfsl_lr,sfsl_lr_lc_n4"]
    assert cli.main(args + ["--out", str(a1)]) == 0
    assert cli.main(args + ["--out", str(a2)]) == 0
    assert a1.read_bytes() == a2.read_bytes()
    r = tmp_path / "r.csv"
    assert cli.main(["robustness", "--config", str(cfg_path), "--data", str(data), "--sigmas", "0,0.1",
                     "--out", str(r)]) == 0
    assert len(read_csv(r)) == 2 * 3


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alphaa = 1\n")
    assert cli.main(["datagen", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", "x", "--out", "y"]) == 1
    assert cli.main(["gradcheck", "--cases", "30"]) == 0


def test_cli_numeric_failure_exit_code(tmp_path, tiny):
    config, scenes = tiny
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(TINY + "lr = 1e200\nepochs = 1\n")
    data = tmp_path / "d.wcds"
    save_dataset(data, scenes)
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(tmp_path / "m")]) == 2
