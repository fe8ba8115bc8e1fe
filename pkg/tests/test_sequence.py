"""LSTM and TCN against hand-written numpy references."""

import numpy as np
import pytest

from tcfnet import autodiff as ad
from tcfnet.autodiff import ShapeError
from tcfnet.sequence import (
    LSTM,
    TCN,
    LSTMCellParams,
    TCNConfig,
    causal_conv1d,
    lstm_cell_step,
    lstm_layer,
    tcn_forward,
)


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_reference(x, W, U, b):
    """Per-gate loop: gates i, f, o squashed; candidate and output left linear."""
    B, T, _ = x.shape
    H = U["i"].shape[0]
    h, c = np.zeros((B, H)), np.zeros((B, H))
    hs = []
    for t in range(T):
        xt = x[:, t]
        i = sig(xt @ W["i"] + h @ U["i"] + b["i"])
        f = sig(xt @ W["f"] + h @ U["f"] + b["f"])
        o = sig(xt @ W["o"] + h @ U["o"] + b["o"])
        c = f * c + i * (xt @ W["c"] + h @ U["c"] + b["c"])
        h = o * c
        hs.append(h)
    return np.stack(hs, 1), c


def random_gates(rng, n, h):
    W = {g: rng.standard_normal((n, h)) * 0.4 for g in "ifoc"}
    U = {g: rng.standard_normal((h, h)) * 0.4 for g in "ifoc"}
    b = {g: rng.standard_normal(h) * 0.1 for g in "ifoc"}
    return W, U, b


def test_lstm_matches_reference(rng):
    W, U, b = random_gates(rng, 4, 3)
    p = LSTMCellParams.from_gates("l", W, U, b)
    x = rng.standard_normal((2, 7, 4))
    ref, _ = lstm_reference(x, W, U, b)
    np.testing.assert_allclose(lstm_layer(x, p, "all").data, ref, atol=1e-12)
    np.testing.assert_allclose(lstm_layer(x, p, "last").data, ref[:, -1], atol=1e-12)


def test_lstm_cell_single_step(rng):
    W, U, b = random_gates(rng, 2, 2)
    p = LSTMCellParams.from_gates("l", W, U, b)
    x, h0, c0 = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)
    h, c = lstm_cell_step(x, h0, c0, p)
    i, f, o = (sig(x @ W[g] + h0 @ U[g] + b[g]) for g in "ifo")
    c_ref = f * c0 + i * (x @ W["c"] + h0 @ U["c"] + b["c"])
    np.testing.assert_allclose(c.data[0], c_ref, atol=1e-12)
    np.testing.assert_allclose(h.data[0], o * c_ref, atol=1e-12)


def test_lstm_forget_bias_and_shapes(rng):
    p = LSTMCellParams.init("l", 6, 30, rng)
    assert p.W.shape == (6, 120) and p.U.shape == (30, 120)
    np.testing.assert_array_equal(p.gate("b", "f"), np.ones(30))
    np.testing.assert_array_equal(p.gate("b", "i"), np.zeros(30))
    assert LSTM("x", 6, 30, rng, "all")(ad.Tensor(np.zeros((2, 6, 6)))).shape == (2, 6, 30)
    with pytest.raises(ShapeError):
        lstm_cell_step(np.zeros(5), np.zeros(30), np.zeros(30), p)
    with pytest.raises(ValueError):
        lstm_layer(np.zeros((1, 3, 6)), p, "middle")


def conv1d_reference(x, k, bias, d):
    B, T, _ = x.shape
    K = k.shape[0]
    out = np.tile(bias, (B, T, 1)).astype(float)
    for t in range(T):
        for i in range(K):
            src = t - (K - 1 - i) * d
            if src >= 0:
                out[:, t] += x[:, src] @ k[i]
    return out


@pytest.mark.parametrize("d", [1, 2, 4])
def test_causal_conv1d(rng, d):
    x, k, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((2, 3, 4)), rng.standard_normal(4)
    out = causal_conv1d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), d).data
    np.testing.assert_allclose(out, conv1d_reference(x, k, b, d), atol=1e-12)


def make_tcn(rng, c_in=8):
    return TCN("tcn", c_in, TCNConfig(), rng, return_sequence=True)


def test_tcn_is_causal(rng):
    tcn = make_tcn(rng)
    x = rng.standard_normal((1, 12, 8))
    base = tcn_forward(x, tcn, return_sequence=True).data
    x2 = x.copy()
    x2[:, 7:] += rng.standard_normal((1, 5, 8))
    moved = tcn_forward(x2, tcn, return_sequence=True).data
    np.testing.assert_array_equal(base[:, :7], moved[:, :7])
    assert not np.allclose(base[:, 7:], moved[:, 7:])


def test_tcn_receptive_field(rng):
    cfg = TCNConfig()
    assert cfg.receptive_field == 7
    tcn = make_tcn(rng)
    x = rng.standard_normal((1, 20, 8))
    last = tcn_forward(x, tcn).data
    far, near = x.copy(), x.copy()
    far[:, 20 - 8] += 5.0  # just outside the field of the last step
    near[:, 20 - 7] += 5.0  # oldest step inside it
    np.testing.assert_array_equal(tcn_forward(far, tcn).data, last)
    assert not np.allclose(tcn_forward(near, tcn).data, last)


def test_tcn_output_and_length_check(rng):
    tcn = TCN("tcn", 8, TCNConfig(), rng)
    assert tcn(ad.Tensor(rng.standard_normal((3, 6, 8)))).shape == (3, 6)
    with pytest.raises(ShapeError):
        tcn(ad.Tensor(rng.standard_normal((3, 1, 8))))


@pytest.mark.parametrize("dil", [(2, 1), (1, 3), (1, 1)])
def test_tcn_config_rejects_bad_dilations(dil):
    with pytest.raises(ValueError):
        TCNConfig(dilations=dil)
    with pytest.raises(ValueError):
        TCNConfig(num_blocks=3, dilations=(1, 2))
