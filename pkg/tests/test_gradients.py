"""Finite-difference gradient suite: ten random small instances per layer."""

import numpy as np
import pytest

from tcfnet import autodiff as ad
from tcfnet import layers as L
from tcfnet.fnb import FuzzyRuleSet, fnb_forward
from tcfnet.sequence import LSTMCellParams, TCNConfig, TCNBlock, lstm_cell_step, lstm_layer

from conftest import check_gradients, project

TOL = 1e-4
SEEDS = range(10)


def away_from_zero(a, margin=1e-3):
    return np.where(np.abs(a) < margin, margin * np.sign(a + 1e-12) * 3, a)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d(seed):
    r = np.random.default_rng(seed)
    B, H, W, C, O = r.integers(1, 3), r.integers(3, 6), r.integers(3, 7), r.integers(1, 3), r.integers(1, 4)
    kh, kw = r.integers(1, H + 1), r.integers(1, W + 1)
    padding = ("valid", "same")[seed % 2]
    x, w, b = r.standard_normal((B, H, W, C)), r.standard_normal((kh, kw, C, O)), r.standard_normal(O)
    err = check_gradients(lambda t: project(L.conv2d(t[0], t[1], t[2], padding), seed), [x, w, b])
    assert err < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise(seed):
    r = np.random.default_rng(seed)
    B, H, W, C, M = r.integers(1, 3), r.integers(2, 6), r.integers(2, 6), r.integers(1, 4), r.integers(1, 3)
    kh, kw = r.integers(1, H + 1), r.integers(1, W + 1)
    padding = ("valid", "same")[seed % 2]
    x, w = r.standard_normal((B, H, W, C)), r.standard_normal((kh, kw, C, M))
    assert check_gradients(lambda t: project(L.depthwise_conv2d(t[0], t[1], padding=padding), seed), [x, w]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_full_height(seed):
    # the (channels, 1) spatial-filter case used by the EEG models
    r = np.random.default_rng(seed)
    H, C = r.integers(2, 5), r.integers(1, 4)
    x, w = r.standard_normal((2, H, 5, C)), r.standard_normal((H, 1, C, 2))
    assert check_gradients(lambda t: project(L.depthwise_conv2d(t[0], t[1]), seed), [x, w]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_separable(seed):
    r = np.random.default_rng(seed)
    C, O = r.integers(1, 4), r.integers(1, 4)
    x = r.standard_normal((2, 1, r.integers(4, 9), C))
    dw = r.standard_normal((1, r.integers(1, 4), C, 1))
    pw = r.standard_normal((1, 1, C, O))
    b = r.standard_normal(O)
    err = check_gradients(lambda t: project(L.separable_conv2d(t[0], t[1], t[2], t[3]), seed), [x, dw, pw, b])
    assert err < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_train(seed):
    r = np.random.default_rng(seed)
    shape = (int(r.integers(2, 5)), int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 4)))
    x = r.standard_normal(shape) * 3 + 1
    g, b = r.standard_normal(shape[-1]), r.standard_normal(shape[-1])
    err = check_gradients(lambda t: project(ad.batch_norm_train(t[0], t[1], t[2], 1e-3)[0], seed), [x, g, b])
    assert err < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_elu(seed):
    x = away_from_zero(np.random.default_rng(seed).standard_normal((3, 4)))
    assert check_gradients(lambda t: project(L.elu(t[0]), seed), [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dense(seed):
    r = np.random.default_rng(seed)
    n, m = r.integers(1, 6), r.integers(1, 6)
    x, w, b = r.standard_normal((3, n)), r.standard_normal((n, m)), r.standard_normal(m)
    act = (None, "elu", "sigmoid", "tanh", "softmax")[seed % 5]
    assert check_gradients(lambda t: project(L.dense(t[0], t[1], t[2], act), seed), [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy(seed):
    r = np.random.default_rng(seed)
    C = int(r.integers(2, 5))
    z = r.standard_normal((5, C)) * 2
    y = r.integers(0, C, 5)
    w = r.uniform(0.5, 2.0, C) if seed % 2 else None
    assert check_gradients(lambda t: L.cross_entropy(t[0], y, w), [z]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_cell(seed):
    r = np.random.default_rng(seed)
    n, h = int(r.integers(1, 4)), int(r.integers(1, 4))
    arrays = [r.standard_normal((2, n)), r.standard_normal((2, h)), r.standard_normal((2, h)),
              r.standard_normal((n, 4 * h)) * 0.5, r.standard_normal((h, 4 * h)) * 0.5, r.standard_normal(4 * h)]

    def loss(t):
        p = LSTMCellParams(ad.Parameter("W", t[3]), ad.Parameter("U", t[4]), ad.Parameter("b", t[5]), h)
        hh, cc = lstm_cell_step(t[0], t[1], t[2], p)
        return project(hh, seed) + project(cc, seed + 1)

    assert check_gradients(loss, arrays) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_unrolled(seed):
    r = np.random.default_rng(seed)
    n, h, T = 2, 3, int(r.integers(1, 5))
    arrays = [r.standard_normal((2, T, n)), r.standard_normal((n, 4 * h)) * 0.5,
              r.standard_normal((h, 4 * h)) * 0.5, r.standard_normal(4 * h)]

    def loss(t):
        p = LSTMCellParams(ad.Parameter("W", t[1]), ad.Parameter("U", t[2]), ad.Parameter("b", t[3]), h)
        return project(lstm_layer(t[0], p, "all"), seed)

    assert check_gradients(loss, arrays) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_tcn_block(seed):
    r = np.random.default_rng(seed)
    c_in = int(r.integers(1, 4))
    cfg = TCNConfig(filters=3, kernel_size=2, num_blocks=1, dilations=(int(2 ** (seed % 3)),))
    blk = TCNBlock("b", c_in, cfg, cfg.dilations[0], r)
    params = blk.params()
    x = r.standard_normal((2, int(r.integers(2, 7)), c_in))
    arrays = [x] + [p.data.copy() for p in params]

    def loss(t):
        for p, v in zip(params, t[1:]):
            p.tensor = v
        return project(blk(t[0], training=False, rng=None), seed)

    assert check_gradients(loss, arrays) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_fnb(seed):
    r = np.random.default_rng(seed)
    K, d = int(r.integers(1, 5)), int(r.integers(1, 6))
    rules = FuzzyRuleSet.init("fnb", K, d)
    rules.centroids.tensor.data = r.standard_normal((K, d))
    v, log_a = r.standard_normal((3, d)), r.uniform(-0.3, 0.5, d)

    def loss(t):
        rules.log_a.tensor = t[1]
        return project(fnb_forward(t[0], rules), seed)

    assert check_gradients(loss, [v, log_a]) < TOL


@pytest.mark.parametrize("op", ["avg_pool2d", "log_softmax", "concat", "pad", "getitem", "div", "sqrt"])
def test_misc_primitives(op):
    r = np.random.default_rng(7)
    x = r.uniform(0.5, 2.0, (2, 4, 6, 3))
    fns = {
        "avg_pool2d": lambda t: ad.avg_pool2d(t[0], (2, 3)),
        "log_softmax": lambda t: ad.log_softmax(t[0], axis=2),
        "concat": lambda t: ad.concat([t[0], t[0] * 2.0], axis=1),
        "pad": lambda t: ad.pad(t[0], ((0, 0), (1, 2), (0, 0), (0, 0))),
        "getitem": lambda t: t[0][:, 1:3, ::2],
        "div": lambda t: ad.div(1.0, t[0]),
        "sqrt": lambda t: ad.sqrt(t[0]),
    }
    assert check_gradients(lambda t: project(fns[op](t)), [x]) < TOL
