"""Acceptance criteria, one test per criterion (or per separable part).

Every test records a single ``[PASS]``/``[FAIL]`` line, printed in the
"acceptance criteria" section at the end of the pytest run. Two worked
examples disagree with their own formulas; they are run at the stated
tolerance, expected to fail, and reported as FAIL.

Set ``DEWARP_DIRECTIONAL=1`` to also run the long, non-gating ablation
comparison of criterion 7.
"""

import math
import os
import time

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from conftest import ACCEPTANCE_LINES
from docdewarp import grid as wg
from docdewarp.cli import main
from docdewarp.metrics import MS_SSIM_WEIGHTS, combine_levels, ms_ssim, ssim
from docdewarp.model import ModelConfig, StackedUNet, build_model, load_model, save_model
from docdewarp.nn import Tensor, no_grad
from docdewarp.objective import combine
from docdewarp.selfcheck import layer_grad_checks, model_grad_check
from docdewarp.synth import GenerationConfig, generate_samples, read_dataset, reconstruction_ssim, write_dataset
from docdewarp.synth.dataset import DatasetItem
from docdewarp.trainer import TrainConfig, ablation_presets, evaluate, identity_baseline, predict_grid, train

OVERFIT_STEPS = 500
OVERFIT_LR = 1e-3


def record(label: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def as_items(samples):
    return [DatasetItem(r["index"], s.warped, s.flat, s.gt_grid, s.edge_mask, r) for s, r in samples]


# ---------------------------------------------------------------- 1

def test_c1_shape_conformance():
    start = time.perf_counter()
    model = StackedUNet(ModelConfig(), seed=0)
    with no_grad():
        out = model(Tensor(np.random.default_rng(0).random((1, 3, 256, 256)).astype(np.float32)))
    elapsed = time.perf_counter() - start
    expected = {
        "L2": (64, 128, 128), "L4": (256, 32, 32), "L5": (512, 16, 16), "B": (1024, 8, 8),
        "O": (2, 256, 256), "Go": (16, 256, 256), "X": (32, 256, 256), "U1": (50, 256, 256),
        "B1": (512, 8, 8), "B2": (512, 8, 8), "O1": (1, 256, 256), "O2": (1, 256, 256), "g": (2, 256, 256),
    }
    wrong = {k: out.intermediates[k].shape[1:] for k, v in expected.items() if out.intermediates[k].shape[1:] != v}
    ok = not wrong and elapsed < 10.0
    record("1 shape conformance", ok, f"{len(expected) - len(wrong)}/{len(expected)} tensors match, "
           f"{model.num_parameters():,d} params, {elapsed:.1f}s")
    assert not wrong, wrong
    assert elapsed < 10.0


# ---------------------------------------------------------------- 2

def test_c2_gradient_integrity():
    start = time.perf_counter()
    layers = layer_grad_checks(rel_tol=1e-4)
    model = model_grad_check(scale=0.125, size=32, rel_tol=1e-3, max_entries=4)
    elapsed = time.perf_counter() - start
    bad_layers = [n for n, r in layers if not r.passed]
    worst_layer = max(r.max_rel_error for _, r in layers)
    ok = not bad_layers and model.passed and elapsed < 300
    record("2 gradient integrity", ok,
           f"{len(layers)} op types worst {worst_layer:.1e} (tol 1e-4); end-to-end worst {model.max_rel_error:.1e} "
           f"over {len(model.entries)} tensors (tol 1e-3); {elapsed:.0f}s")
    assert not bad_layers, bad_layers
    assert model.passed, model.table()
    assert elapsed < 300


# ---------------------------------------------------------------- 3

def test_c3_synthesis_round_trip():
    start = time.perf_counter()
    ssims, errs = [], []
    for sample, _ in generate_samples(2024, 50, GenerationConfig()):
        ssims.append(reconstruction_ssim(sample))
        fwd = sample.gt_grid.astype(np.float64)
        comp = wg.compose(fwd, wg.invert_grid(fwd))
        inside = np.all(np.abs(fwd) <= 1.0, axis=-1)
        errs.append(float(np.abs(comp - wg.identity_grid(256, 256))[inside].max() * 255 / 2))
    elapsed = time.perf_counter() - start
    ok = min(ssims) >= 0.90 and max(errs) <= 2.0 and elapsed < 120
    record("3 synthesis round-trip", ok, f"min SSIM {min(ssims):.4f} (>= 0.90), max compose error "
           f"{max(errs):.3f} px (<= 2), {elapsed:.0f}s")
    assert min(ssims) >= 0.90
    assert max(errs) <= 2.0
    assert elapsed < 120


# ---------------------------------------------------------------- 4

@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    items = as_items(generate_samples(0, 8, GenerationConfig(size=64)))
    cfg = TrainConfig(epochs=10 ** 6, max_steps=OVERFIT_STEPS, batch_size=8, learning_rate=OVERFIT_LR,
                      val_fraction=0.0, seed=0, out_dir=str(tmp_path_factory.mktemp("overfit")),
                      model=ModelConfig(input_size=64, scale=0.25))
    start = time.perf_counter()
    result = train(cfg, items)
    return items, result, time.perf_counter() - start


def test_c4_overfit_convergence(overfit):
    items, result, elapsed = overfit
    final = result.log[-1].grid_loss
    model_score = evaluate(result.model, items).mean_ms_ssim
    base_score = identity_baseline(items, 64).mean_ms_ssim
    ok = final < 0.005 and model_score - base_score >= 0.1 and len(result.log) <= 2000 and elapsed < 1800
    record("4 overfit convergence", ok, f"{len(result.log)} Adam steps, grid MSE {final:.5f} (< 0.005), "
           f"MS-SSIM {model_score:.4f} vs identity {base_score:.4f} (margin >= 0.1), {elapsed / 60:.1f} min")
    assert len(result.log) <= 2000
    assert final < 0.005
    assert model_score - base_score >= 0.1
    assert elapsed < 1800


def test_c4_trained_dewarp_beats_identity(overfit, tmp_path):
    items, result, _ = overfit
    ckpt = tmp_path / "m.gbsu"
    save_model(ckpt, result.model)
    it = items[0]
    Image.fromarray(it.warped).save(tmp_path / "in.png")
    assert main(["dewarp", "--checkpoint", str(ckpt), "--input", str(tmp_path / "in.png"),
                 "--output", str(tmp_path / "out.png"), "--native-res"]) == 0
    out = np.asarray(Image.open(tmp_path / "out.png")).astype(np.float64) / 255
    flat = it.flat.astype(np.float64) / 255
    gain = ms_ssim(out, flat) - ms_ssim(it.warped.astype(np.float64) / 255, flat)
    record("4 dewarp CLI on trained model", gain > 0, f"MS-SSIM gain over identity {gain:+.4f}")
    assert gain > 0


# ---------------------------------------------------------------- 5

def direct_ssim_11(x, y):
    c = np.arange(11) - 5.0
    g = np.exp(-c ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    mx, my = (w * x).sum(), (w * y).sum()
    vx, vy = (w * (x - mx) ** 2).sum(), (w * (y - my) ** 2).sum()
    cxy = (w * (x - mx) * (y - my)).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def test_c5_metric_oracles():
    rng = np.random.default_rng(5)
    x = rng.random((256, 256))
    self_ssim, self_ms = ssim(x, x), ms_ssim(x, x)
    weight_sum = sum(MS_SSIM_WEIGHTS)
    levels = [0.7, 0.8, 0.85, 0.9, 0.95]
    normalized = combine_levels(levels) == pytest.approx(np.dot(MS_SSIM_WEIGHTS, levels) / 1.0001, abs=1e-15)
    a, b = rng.random((11, 11)), rng.random((11, 11))
    oracle_err = abs(ssim(a, b) - direct_ssim_11(a, b))
    ok = (abs(self_ssim - 1) <= 1e-9 and abs(self_ms - 1) <= 1e-6 and abs(weight_sum - 1.0001) < 1e-12
          and normalized and oracle_err <= 1e-10)
    record("5 metric oracles", ok, f"ssim(x,x)-1={self_ssim - 1:.1e}, ms_ssim(x,x)-1={self_ms - 1:.1e}, "
           f"weight sum {weight_sum:.4f}, 11x11 oracle error {oracle_err:.1e}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the stated formula gives 0.945117 for these levels, not 0.9445")
def test_c5_worked_example():
    value = combine_levels([0.8, 0.9, 0.95, 0.99, 1.0])
    ok = abs(value - 0.9445) <= 1e-4
    record("5 MS-SSIM worked example", ok, f"weighted average = {value:.6f}, stated 0.9445 +/- 1e-4 "
           f"(product form {float(np.prod(np.array([0.8, 0.9, 0.95, 0.99, 1.0]) ** np.array(MS_SSIM_WEIGHTS))):.6f})")
    assert ok


# ---------------------------------------------------------------- 6

@pytest.mark.xfail(strict=True, reason="0.01 + 0.9 * log 2 = 0.633832; 0.633787 is off by 4.5e-5")
def test_c6_loss_arithmetic_log2():
    value = combine(0.01, math.log(2), 0.9)
    ok = abs(value - 0.633787) <= 1e-6
    record("6 combined loss with L_e = log 2", ok, f"L = {value:.6f}, stated 0.633787 +/- 1e-6")
    assert ok


def test_c6_lambda_zero():
    pure = combine(0.01, math.log(2), 0.0)
    rounded = combine(0.01, 0.6931, 0.9)
    ok = pure == 0.01 and abs(rounded - 0.63379) <= 1e-9
    record("6 lambda = 0 and rounded example", ok, f"lambda 0 -> {pure}, L_e 0.6931 -> {rounded:.6f}")
    assert ok


# ---------------------------------------------------------------- 7

def test_c7_ablation_contracts(tmp_path):
    presets = ablation_presets(ModelConfig(input_size=64, scale=0.25))
    models = {name: StackedUNet(cfg) for name, cfg in presets.items()}
    gated = models["no_gate"].gated_parameters()
    halves = (models["shared_decoders"].decoder_parameters(), models["full"].decoder_parameters())
    items = as_items(generate_samples(3, 8, GenerationConfig(size=64)))
    steps = {}
    for name, cfg in presets.items():
        tc = TrainConfig(epochs=10 ** 6, max_steps=50, batch_size=4, learning_rate=1e-3, val_fraction=0.0,
                         out_dir=str(tmp_path / name), model=cfg)
        log = train(tc, items).log
        steps[name] = (len(log), all(math.isfinite(r.combined_loss) for r in log))
    smoke = all(n == 50 and finite for n, finite in steps.values())
    ok = gated == 0 and 2 * halves[0] == halves[1] and smoke
    record("7 ablation contracts", ok, f"no_gate gated params {gated}, shared/full decoder params "
           f"{halves[0]}/{halves[1]}, 50-step smoke {'ok' if smoke else steps}")
    assert gated == 0
    assert 2 * halves[0] == halves[1]
    assert smoke, steps


@pytest.mark.slow
def test_c7_directional(tmp_path):
    if os.environ.get("DEWARP_DIRECTIONAL") != "1":
        ACCEPTANCE_LINES.append("[SKIP] 7 directional (non-gating): set DEWARP_DIRECTIONAL=1 to run")
        pytest.skip("long run; set DEWARP_DIRECTIONAL=1")
    items = as_items(generate_samples(512, 512, GenerationConfig(size=64), workers=os.cpu_count() or 1))
    train_items, held_out = items[:448], items[448:]
    scores = {}
    for name, cfg in ablation_presets(ModelConfig(input_size=64, scale=0.25)).items():
        tc = TrainConfig(epochs=3, batch_size=8, learning_rate=1e-3, val_fraction=0.0,
                         out_dir=str(tmp_path / name), model=cfg)
        scores[name] = evaluate(train(tc, train_items).model, held_out).mean_ms_ssim
    ok = all(scores["full"] >= s for s in scores.values())
    record("7 directional (non-gating)", ok, ", ".join(f"{k} {v:.4f}" for k, v in scores.items()))


# ---------------------------------------------------------------- 8

def test_c8_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--count", "4", "--seed", "9", "--size", "64", "--out", str(d)]) == 0
    gen_same = all((a / p.name).read_bytes() == p.read_bytes() for p in b.iterdir())

    def loss_columns(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    for d in (a, b):
        assert main(["train", "--data", str(d), "--out", str(d / "run"), "--epochs", "2", "--batch-size", "2",
                     "--seed", "4", "--set", "model.input_size=32", "--set", "model.scale=0.125",
                     "--set", "val_fraction=0"]) == 0
    train_same = loss_columns(a / "run" / "train_log.csv") == loss_columns(b / "run" / "train_log.csv")
    params_same = (a / "run" / "model.gbsu").read_bytes() == (b / "run" / "model.gbsu").read_bytes()
    for d in (a, b):
        assert main(["eval", "--checkpoint", str(d / "run" / "model.gbsu"), "--data", str(d),
                     "--csv", str(d / "eval.csv")]) == 0
    eval_same = (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()

    samples = list(generate_samples(9, 4, GenerationConfig(size=64)))
    write_dataset(samples, tmp_path / "rt")
    grids_same = all(np.array_equal(it.grid, s.gt_grid) and it.grid.dtype == s.gt_grid.dtype
                     for it, (s, _) in zip(read_dataset(tmp_path / "rt"), samples))
    ok = gen_same and train_same and params_same and eval_same and grids_same
    record("8 determinism", ok, f"generate {gen_same}, train log {train_same}, checkpoint {params_same}, "
           f"eval {eval_same}, grid round-trip {grids_same}")
    assert ok


# ---------------------------------------------------------------- 9

def test_c9_native_resolution(tmp_path):
    model = build_model(ModelConfig(input_size=256, scale=0.125), seed=1)
    ckpt = tmp_path / "m.gbsu"
    save_model(ckpt, model)
    rng = np.random.default_rng(0)
    img = ndimage.gaussian_filter(rng.random((768, 1024, 3)), (6, 6, 0))
    img = (255 * (img - img.min()) / np.ptp(img)).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "in.png")
    assert main(["dewarp", "--checkpoint", str(ckpt), "--input", str(tmp_path / "in.png"),
                 "--output", str(tmp_path / "out.png"), "--native-res"]) == 0
    out = np.asarray(Image.open(tmp_path / "out.png"))

    coarse = predict_grid(load_model(ckpt), img)
    fine = wg.upsample_grid(coarse, 768, 1024)
    # position of every 256x256 lattice point in native pixel coordinates
    rows = np.arange(256) * (767 / 255)
    cols = np.arange(256) * (1023 / 255)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    at_points = np.stack([ndimage.map_coordinates(fine[..., k], [rr, cc], order=1) for k in range(2)], -1)
    err = float(np.abs(at_points - coarse).max())
    expected_out = np.clip(np.rint(wg.sample(img.astype(np.float64) / 255, fine) * 255), 0, 255)
    pixels_match = np.abs(out.astype(int) - expected_out.astype(int)).max() <= 1
    ok = out.shape == (768, 1024, 3) and err <= 1e-2 and pixels_match
    record("9 native-resolution contract", ok, f"output {out.shape[1]}x{out.shape[0]}, max grid disagreement "
           f"{err:.2e} (<= 1e-2), output equals sampling through the upsampled grid: {pixels_match}")
    assert out.shape == (768, 1024, 3)
    assert err <= 1e-2
    assert pixels_match
