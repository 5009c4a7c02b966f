"""Built-in verification suites behind ``docdewarp gradcheck`` and ``selftest``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from docdewarp import grid as wg
from docdewarp.metrics import combine_levels, ms_ssim, ssim
from docdewarp.model import GCL, ModelConfig, StackedUNet
from docdewarp.nn import Conv2d, Tensor, functional as F, grad_check
from docdewarp.nn.gradcheck import GradCheckReport
from docdewarp.objective import combine, combined_loss, edge_loss, grid_loss


def _t(rng: np.random.Generator, shape, grad: bool = True, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=grad)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Random linear read-out so every output element carries a distinct weight."""
    w = rng.normal(size=out.shape)
    return lambda y: (y * w).sum()


def _layer_case(name: str, build, rng: np.random.Generator, rel_tol: float) -> GradCheckReport:
    fn, params = build(rng)
    readout = _projected(fn(), rng)
    report = grad_check(lambda: readout(fn()), params, rel_tol=rel_tol)
    report.layer = name
    return report


def layer_grad_checks(rel_tol: float = 1e-4, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference check of every differentiable op on small float64 inputs."""
    rng = np.random.default_rng(seed)

    def conv(k):
        def build(r):
            layer = Conv2d(3, 4, k, r, activation="none").astype(np.float64)
            layer.bias.data = r.normal(size=4)
            x = _t(r, (2, 3, 6, 5))
            return (lambda: layer(x)), {"x": x, "weight": layer.weight, "bias": layer.bias}
        return build

    def unary(op, scale=1.0, shape=(2, 3, 6, 6)):
        def build(r):
            x = _t(r, shape, scale=scale)
            return (lambda: op(x)), {"x": x}
        return build

    def concat(r):
        a, b = _t(r, (1, 2, 4, 4)), _t(r, (1, 3, 4, 4))
        return (lambda: F.concat_channels([a, b])), {"a": a, "b": b}

    def split(r):
        x = _t(r, (1, 4, 4, 4))
        return (lambda: F.concat_channels([p * (i + 1.0) for i, p in enumerate(F.split_channels(x, [1, 3]))])), {"x": x}

    def mse(r):
        x = _t(r, (1, 2, 4, 4))
        target = r.normal(size=(1, 2, 4, 4))
        return (lambda: F.mse(x, target) * Tensor(np.ones((1, 1, 1, 1)))), {"x": x}

    def bce(r):
        logits = _t(r, (1, 1, 5, 5))
        y = (r.random((1, 1, 5, 5)) > 0.5).astype(float)
        return (lambda: edge_loss(F.sigmoid(logits), y) * Tensor(np.ones((1, 1, 1, 1)))), {"logits": logits}

    def gcl(r):
        block = GCL(3, 5, r).astype(np.float64)
        block.att_stream.bias.data = r.normal(size=1)
        block.conv.bias.data = r.normal(size=3)
        stream, feat = _t(r, (1, 3, 4, 4)), _t(r, (1, 5, 2, 2))
        params = {"stream": stream, "feat": feat}
        params.update({f"gcl.{n}": p for n, p in block.named_parameters()})
        return (lambda: block(stream, feat)), params

    cases = [
        ("conv3x3", conv(3)),
        ("conv1x1", conv(1)),
        ("maxpool2x2", unary(F.maxpool2x2)),
        ("upsample2x", unary(F.upsample_bilinear2x, shape=(1, 2, 3, 4))),
        ("resize_bilinear", unary(lambda x: F.resize_bilinear(x, (7, 5)), shape=(1, 2, 3, 4))),
        ("relu", unary(F.relu)),
        ("sigmoid", unary(F.sigmoid, scale=2.0)),
        ("tanh", unary(F.tanh, scale=2.0)),
        ("concat", concat),
        ("split", split),
        ("mse", mse),
        ("edge_bce", bce),
        ("gcl", gcl),
    ]
    return [(name, _layer_case(name, build, rng, rel_tol)) for name, build in cases]


def model_grad_check(scale: float = 0.125, size: int = 32, rel_tol: float = 1e-3, max_entries: int = 2,
                     seed: int = 0, cfg: ModelConfig | None = None) -> GradCheckReport:
    """End-to-end check of the full stacked model in float64.

    ``max_entries`` coordinates of every parameter tensor are probed, so
    every layer (including both GCL attention convs) is covered.
    """
    cfg = cfg if cfg is not None else ModelConfig(input_size=size, scale=scale)
    rng = np.random.default_rng(seed)
    model = StackedUNet(cfg, seed=seed).astype(np.float64)
    # non-zero biases so bias gradients are exercised through every ReLU
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = rng.uniform(0.0, 0.05, size=p.shape)
    x = Tensor(rng.random((1, 3, cfg.input_size, cfg.input_size)))
    gt = rng.uniform(-0.9, 0.9, size=(1, 2, cfg.input_size, cfg.input_size))
    edges = (rng.random((1, 1, cfg.input_size, cfg.input_size)) > 0.8).astype(float)

    def loss_fn():
        return combined_loss(model(x), gt, edges).total

    return grad_check(loss_fn, dict(model.named_parameters()), rel_tol=rel_tol, max_entries=max_entries, rng=rng)


# ------------------------------------------------------------------ selftest

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - start)


def _check_sample_identity():
    img = np.random.default_rng(0).random((33, 47, 3))
    out = wg.sample(img, wg.identity_grid(33, 47))
    return np.array_equal(out, img), "sample(img, identity) == img"


def _check_grid_round_trip():
    from docdewarp.synth.mesh import SparseMesh, densify, perturb_mesh

    worst = 0.0
    for seed in range(3):
        mesh = perturb_mesh(SparseMesh.regular(), "fold", np.random.default_rng(seed))
        fwd = densify(mesh, 256, 256)
        comp = wg.compose(fwd, wg.invert_grid(fwd))
        inside = np.all(np.abs(fwd) <= 1, axis=-1)
        worst = max(worst, float(np.abs(comp - wg.identity_grid(256, 256))[inside].max() * 127.5))
    return worst <= 2.0, f"max compose(F, invert(F)) error {worst:.3f} px"


def _check_upsample():
    up = wg.upsample_grid(wg.identity_grid(256, 256), 1024, 768)
    err = float(np.abs(up - wg.identity_grid(1024, 768)).max())
    return err <= 1e-5, f"identity upsample error {err:.2e}"


def _check_metrics():
    rng = np.random.default_rng(1)
    x = rng.random((256, 256))
    s, m = ssim(x, x), ms_ssim(x, x)
    ok = abs(s - 1) <= 1e-9 and abs(m - 1) <= 1e-6
    return ok, f"ssim(x,x)={s:.12f} ms_ssim(x,x)={m:.9f} example={combine_levels([0.8, 0.9, 0.95, 0.99, 1.0]):.6f}"


def _check_losses():
    le = float(edge_loss(Tensor(np.array([0.9, 0.2]).reshape(1, 1, 1, 2)), np.array([1.0, 0.0]).reshape(1, 1, 1, 2)).data)
    g = wg.identity_grid(8, 8).transpose(2, 0, 1)[None]
    h = g.copy()
    h[:, 0] += 0.05
    lg = float(grid_loss(Tensor(g), h).data)
    total = combine(0.01, math.log(2), 0.9)
    ok = abs(le - 0.164252) < 1e-6 and abs(lg - 0.00125) < 1e-12 and combine(0.01, 0.5, 0.0) == 0.01
    return ok, f"edge={le:.6f} grid={lg:.6f} combined(0.01, log 2)={total:.6f}"


def _check_layer_grads():
    results = layer_grad_checks()
    bad = [n for n, r in results if not r.passed]
    worst = max(r.max_rel_error for _, r in results)
    return not bad, f"{len(results)} op types, worst rel err {worst:.2e}" + (f", failing: {bad}" if bad else "")


def _check_model_grads():
    rep = model_grad_check(scale=0.0625, size=32, max_entries=1)
    return rep.passed, f"{len(rep.entries)} parameter tensors, worst rel err {rep.max_rel_error:.2e}"


def _check_synthesis():
    from docdewarp.synth.dataset import GenerationConfig, generate_sample
    from docdewarp.synth.render import reconstruction_ssim

    scores = [reconstruction_ssim(generate_sample(7, i, GenerationConfig())[0]) for i in range(3)]
    return min(scores) >= 0.90, f"reconstruction SSIM min {min(scores):.4f}"


def _check_model_shapes():
    cfg = ModelConfig(input_size=64, scale=0.25)
    out = StackedUNet(cfg)(Tensor(np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)))
    g = out.grid.data
    ok = g.shape == (1, 2, 64, 64) and bool(np.all(np.abs(g) < 1)) and out.intermediates["B"].shape == (1, 256, 2, 2)
    return ok, f"grid {g.shape}, bottleneck {out.intermediates['B'].shape}"


SELFTESTS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("sample identity", _check_sample_identity),
    ("grid upsample", _check_upsample),
    ("grid invert/compose", _check_grid_round_trip),
    ("metric oracles", _check_metrics),
    ("loss arithmetic", _check_losses),
    ("layer gradients", _check_layer_grads),
    ("model gradients", _check_model_grads),
    ("model shapes", _check_model_shapes),
    ("synthesis round-trip", _check_synthesis),
]


def run_selftest(on_result: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in SELFTESTS:
        res = _timed(name, fn)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results
