from dataclasses import replace

import numpy as np
import pytest

from docdewarp.errors import ConfigError, NumericError
from docdewarp.model import ModelConfig, load_model
from docdewarp.synth import GenerationConfig, generate_samples
from docdewarp.synth.dataset import DatasetItem, write_dataset
from docdewarp.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    ablation_presets,
    evaluate,
    identity_baseline,
    read_log,
    rectify,
    split_indices,
    train,
)

TINY = ModelConfig(input_size=32, scale=0.125)


@pytest.fixture(scope="module")
def samples():
    return list(generate_samples(11, 4, GenerationConfig(size=64)))


@pytest.fixture(scope="module")
def items(samples):
    return [DatasetItem(r["index"], s.warped, s.flat, s.gt_grid, s.edge_mask, r) for s, r in samples]


def tiny_cfg(tmp_path, **kw):
    base = dict(epochs=1, batch_size=2, learning_rate=1e-3, val_fraction=0.0, out_dir=str(tmp_path), model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_saves_initial_model(tmp_path, items):
    res = train(tiny_cfg(tmp_path, epochs=0), items)
    assert res.log == []
    assert res.checkpoint.exists()
    assert read_log(tmp_path / "train_log.csv") == []
    assert (tmp_path / "train_log.csv").read_text().strip() == ",".join(LOG_COLUMNS)


def test_log_and_step_count(tmp_path, items):
    res = train(tiny_cfg(tmp_path, epochs=2), items)
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["step"] for r in rows] == [str(i) for i in range(1, 5)]
    assert [r["epoch"] for r in rows] == ["1", "1", "2", "2"]
    assert float(rows[-1]["combined_loss"]) == pytest.approx(res.log[-1].combined_loss, rel=1e-8)


def test_max_steps_caps_training(tmp_path, items):
    res = train(tiny_cfg(tmp_path, epochs=100, max_steps=3, checkpoint_every=2), items)
    assert len(res.log) == 3
    assert (tmp_path / "step_000002.gbsu").exists()


def test_training_is_reproducible(tmp_path, items):
    a = train(tiny_cfg(tmp_path / "a", epochs=2, seed=7), items)
    b = train(tiny_cfg(tmp_path / "b", epochs=2, seed=7), items)
    assert [r.combined_loss for r in a.log] == [r.combined_loss for r in b.log]
    for (_, pa), (_, pb) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    c = train(tiny_cfg(tmp_path / "c", epochs=2, seed=8), items)
    assert [r.combined_loss for r in a.log] != [r.combined_loss for r in c.log]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_diagnostic(tmp_path, items):
    cfg = tiny_cfg(tmp_path, epochs=50, optimizer="sgd", learning_rate=1e12, momentum=0.0)
    with pytest.raises(NumericError):
        train(cfg, items)
    assert (tmp_path / "diagnostic.gbsu").exists()


def test_loss_decreases_on_tiny_set(tmp_path, items):
    res = train(tiny_cfg(tmp_path, epochs=30, batch_size=4), items)
    assert res.log[-1].grid_loss < res.log[0].grid_loss


def test_validation_split_is_tail():
    assert split_indices(10, 0.2) == (list(range(8)), [8, 9])
    assert split_indices(3, 0.1) == ([0, 1, 2], [])


def test_train_from_dataset_directory(tmp_path, samples):
    write_dataset(samples, tmp_path / "data")
    res = train(tiny_cfg(tmp_path / "run", data_path=str(tmp_path / "data"), val_fraction=0.25))
    assert res.val_indices == [3]
    assert len(res.log) == 2


def test_config_text_round_trip():
    cfg = TrainConfig(epochs=3, learning_rate=3e-4, optimizer="sgd", data_path="d",
                      model=replace(TINY, gate_enabled=False))
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_overrides_and_errors():
    cfg = TrainConfig.from_text("epochs=2\nmodel.scale=0.5\n", {"epochs": "4", "objective.lam": "0"})
    assert cfg.epochs == 4 and cfg.model.scale == 0.5 and cfg.objective.lam == 0.0
    with pytest.raises(ConfigError):
        TrainConfig.from_text("epocs=2\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("batch_size=0\n")


def test_presets():
    presets = ablation_presets(TINY)
    assert set(presets) == {"full", "no_gate", "shared_decoders", "single_decoder"}
    assert not presets["no_gate"].gate_enabled
    assert presets["shared_decoders"].decoder_shared_weights
    assert not presets["single_decoder"].bifurcated
    assert all(p.input_size == 32 and p.scale == 0.125 for p in presets.values())


# ---------------------------------------------------------------- evaluation

def test_rectify_native_resolution_shape():
    img = np.random.default_rng(0).random((300, 200, 3))
    grid = np.zeros((32, 32, 2))
    assert rectify(img, grid, native=True).shape == (300, 200, 3)
    assert rectify(img, grid, native=True, size=(512, 512)).shape == (512, 512, 3)
    assert rectify(img, grid, native=False).shape == (32, 32, 3)


def test_evaluate_on_large_flat(items):
    big = replace(items[0], flat=np.asarray(np.kron(items[0].flat, np.ones((8, 8, 1))), dtype=np.uint8))
    assert big.flat.shape == (512, 512, 3)
    report = identity_baseline([big], 32)
    assert len(report.samples) == 1 and 0 < report.mean_ms_ssim <= 1


def test_evaluate_skips_items_without_flat(items):
    report = identity_baseline([replace(items[0], flat=None)] + items[1:], 32)
    assert report.skipped == 1 and len(report.samples) == 3


def test_checkpoint_reproduces_metrics(tmp_path, items):
    res = train(tiny_cfg(tmp_path, epochs=1), items)
    a = evaluate(res.model, items)
    b = evaluate(load_model(res.checkpoint), items)
    assert a.to_csv() == b.to_csv()


def test_identity_baseline_has_zero_ld_against_identity_truth(items):
    ident = [replace(it, grid=np.stack(np.meshgrid(np.linspace(-1, 1, 64), np.linspace(-1, 1, 64)), -1))
             for it in items]
    assert identity_baseline(ident, 32).mean_ld == pytest.approx(0.0, abs=1e-6)
