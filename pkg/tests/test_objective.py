import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docdewarp import grid as wg
from docdewarp.errors import ConfigError, DimensionError
from docdewarp.model import ModelOutput
from docdewarp.nn import Tensor, functional as F, grad_check
from docdewarp.objective import ObjectiveConfig, combine, combined_loss, edge_loss, grid_loss


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def identity_nchw(n=8):
    return wg.identity_grid(n, n).transpose(2, 0, 1)[None]


# ---------------------------------------------------------------- edge loss

def test_edge_loss_hand_value():
    loss = edge_loss(t64([[[[0.9, 0.2]]]]), np.array([[[[1.0, 0.0]]]]))
    assert float(loss.data) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert float(loss.data) == pytest.approx(0.16425, abs=5e-6)


def test_edge_loss_half_is_log_two():
    y = (np.random.default_rng(0).random((1, 1, 6, 6)) > 0.5).astype(float)
    assert float(edge_loss(t64(np.full(y.shape, 0.5)), y).data) == pytest.approx(math.log(2), abs=1e-12)


def test_edge_loss_perfect_prediction_is_clamp_floor():
    y = (np.random.default_rng(1).random((1, 1, 6, 6)) > 0.5).astype(float)
    assert 0 < float(edge_loss(t64(y), y).data) <= -math.log(1 - 1e-7) + 1e-15


def test_edge_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        edge_loss(t64(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 3)))


def test_edge_loss_gradient():
    rng = np.random.default_rng(2)
    p = t64(rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)), grad=True)
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    assert grad_check(lambda: edge_loss(p, y), [p], rel_tol=1e-5).passed


def test_edge_loss_clamped_entries_get_no_gradient():
    p = t64([[[[0.0, 0.5]]]], grad=True)
    edge_loss(p, np.array([[[[1.0, 1.0]]]])).backward()
    assert p.grad[0, 0, 0, 0] == 0.0
    assert p.grad[0, 0, 0, 1] == pytest.approx(-1.0, abs=1e-9)


# ---------------------------------------------------------------- grid loss

def test_grid_loss_identical_is_zero():
    g = identity_nchw()
    assert float(grid_loss(t64(g), g).data) == 0.0


def test_grid_loss_constant_offset():
    g = identity_nchw()
    assert float(grid_loss(t64(g), g + 0.1).data) == pytest.approx(0.01, abs=1e-15)


def test_grid_loss_x_only_offset():
    g = identity_nchw()
    h = g.copy()
    h[:, 0] += 0.05
    assert float(grid_loss(t64(g), h).data) == pytest.approx(0.00125, abs=1e-15)


def test_grid_loss_l1_option():
    g = identity_nchw()
    assert float(grid_loss(t64(g), g + 0.1, norm="l1").data) == pytest.approx(0.1, abs=1e-12)


@pytest.mark.parametrize("norm", ["l2", "l1"])
def test_grid_loss_gradient(norm):
    rng = np.random.default_rng(3)
    p = t64(rng.normal(size=(1, 2, 4, 4)), grad=True)
    gt = rng.normal(size=(1, 2, 4, 4))
    assert grid_loss(p, gt, norm).data >= 0
    assert grad_check(lambda: grid_loss(p, gt, norm), [p], rel_tol=1e-5).passed


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_grid_loss_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
    lab, lba = float(grid_loss(t64(a), b).data), float(grid_loss(t64(b), a).data)
    assert lab >= 0 and lab == pytest.approx(lba, rel=1e-12)


# ---------------------------------------------------------------- combination

def test_combine_with_zero_edge_term():
    assert combine(0.037, 0.0, 0.9) == 0.037


def test_combine_arithmetic():
    assert combine(0.01, 0.6931, 0.9) == pytest.approx(0.63379, abs=1e-9)
    assert combine(0.01, math.log(2), 0.9) == pytest.approx(0.01 + 0.9 * math.log(2), abs=1e-15)


def test_lambda_zero_is_grid_loss_only():
    assert combine(0.01, math.log(2), 0.0) == 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        ObjectiveConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        ObjectiveConfig(bce_epsilon=0.5)
    with pytest.raises(ConfigError):
        ObjectiveConfig(grid_norm="huber")


def fake_output(rng, with_edges=True):
    grid = t64(rng.uniform(-0.9, 0.9, size=(1, 2, 4, 4)), grad=True)
    logits = t64(rng.normal(size=(1, 1, 4, 4)), grad=True) if with_edges else None
    return ModelOutput(grid=grid, edge_logits=logits, edge_features=t64(np.zeros((1, 1, 4, 4))))


def test_combined_loss_matches_components():
    rng = np.random.default_rng(4)
    out = fake_output(rng)
    gt = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    edges = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    res = combined_loss(out, gt, edges)
    lg = float(grid_loss(out.grid, gt).data)
    le = float(edge_loss(F.sigmoid(out.edge_logits), edges).data)
    assert res.grid == pytest.approx(lg) and res.edge == pytest.approx(le)
    assert float(res.total.data) == pytest.approx(lg + 0.9 * le, abs=1e-12)
    params = {"grid": out.grid, "logits": out.edge_logits}
    assert grad_check(lambda: combined_loss(out, gt, edges).total, params, rel_tol=1e-5).passed


def test_combined_loss_without_edge_head():
    rng = np.random.default_rng(5)
    out = fake_output(rng, with_edges=False)
    gt = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    res = combined_loss(out, gt, np.zeros((1, 1, 4, 4)))
    assert res.edge is None
    assert float(res.total.data) == pytest.approx(float(grid_loss(out.grid, gt).data))


def test_combined_loss_lambda_zero():
    rng = np.random.default_rng(6)
    out = fake_output(rng)
    gt = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    res = combined_loss(out, gt, np.ones((1, 1, 4, 4)), ObjectiveConfig(lam=0.0))
    assert float(res.total.data) == res.grid
