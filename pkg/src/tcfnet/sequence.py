"""LSTM layers and the temporal convolutional network.

The LSTM follows the gate equations used by the EEG-TCFNet family
literally: the candidate cell is a plain affine map (no tanh) and the hidden
state is ``o * c`` (again no tanh). This differs from the textbook LSTM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .layers import Layer, _param, dropout, truncated_normal

log = logging.getLogger(__name__)

GATES = ("i", "f", "o", "c")


@dataclass
class LSTMCellParams:
    """Gate weights stored fused, gate order (i, f, o, c) along the last axis.

    ``W`` is (input, 4*hidden), ``U`` is (hidden, 4*hidden), ``b`` is (4*hidden,).
    """

    W: Parameter
    U: Parameter
    b: Parameter
    hidden_size: int

    def gate(self, which: str, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        h = self.hidden_size
        arr = {"W": self.W, "U": self.U, "b": self.b}[which].data
        return arr[..., k * h : (k + 1) * h]

    @classmethod
    def init(cls, name: str, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LSTMCellParams":
        h = hidden_size
        b = np.zeros(4 * h)
        b[h : 2 * h] = 1.0  # forget-gate bias
        return cls(
            W=_param(f"{name}.W", truncated_normal(rng, (input_size, 4 * h), input_size)),
            U=_param(f"{name}.U", truncated_normal(rng, (h, 4 * h), h)),
            b=_param(f"{name}.b", b),
            hidden_size=h,
        )

    @classmethod
    def from_gates(cls, name: str, W: dict, U: dict, b: dict) -> "LSTMCellParams":
        """Assemble from per-gate arrays keyed 'i', 'f', 'o', 'c'."""
        h = np.asarray(U["i"]).shape[0]
        return cls(
            W=_param(f"{name}.W", np.concatenate([np.asarray(W[g], float) for g in GATES], axis=1)),
            U=_param(f"{name}.U", np.concatenate([np.asarray(U[g], float) for g in GATES], axis=1)),
            b=_param(f"{name}.b", np.concatenate([np.asarray(b[g], float) for g in GATES])),
            hidden_size=h,
        )

    def params(self) -> list[Parameter]:
        return [self.W, self.U, self.b]


def _cell_from_preact(zx: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMCellParams):
    H = p.hidden_size
    z = zx + ad.matmul(h_prev, p.U.tensor)
    i = ad.sigmoid(z[:, 0:H])
    f = ad.sigmoid(z[:, H : 2 * H])
    o = ad.sigmoid(z[:, 2 * H : 3 * H])
    cand = z[:, 3 * H : 4 * H]
    c = f * c_prev + i * cand
    h = o * c
    return h, c


def lstm_cell_step(x_t, h_prev, c_prev, params: LSTMCellParams) -> tuple[Tensor, Tensor]:
    """One step: gates i, f, o = sigmoid(Wx + Uh + b); c = f*c_prev + i*(W_c x + U_c h + b_c); h = o*c."""
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    if x_t.ndim == 1:
        x_t, h_prev, c_prev = (ad.reshape(t, (1, -1)) for t in (x_t, h_prev, c_prev))
    if x_t.shape[-1] != params.W.shape[0] or h_prev.shape[-1] != params.hidden_size:
        raise ShapeError(
            f"lstm_cell_step: x {x_t.shape}, h {h_prev.shape} do not match W {params.W.shape}"
        )
    zx = ad.matmul(x_t, params.W.tensor) + params.b.tensor
    return _cell_from_preact(zx, h_prev, c_prev, params)


def lstm_layer(sequence, params: LSTMCellParams, return_mode: str = "all") -> Tensor:
    """Unroll over (batch, time, features) from a zero state.

    ``return_mode='all'`` gives (batch, time, hidden); ``'last'`` gives (batch, hidden).
    """
    x = ad.as_tensor(sequence)
    if x.ndim == 2:
        x = ad.reshape(x, (1, *x.shape))
    B, T, F = x.shape
    if T < 1:
        raise ShapeError("lstm_layer: empty sequence")
    if return_mode not in ("all", "last"):
        raise ValueError(f"return_mode must be 'all' or 'last', got {return_mode!r}")
    zx_all = ad.matmul(x, params.W.tensor) + params.b.tensor  # B,T,4H
    H = params.hidden_size
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(T):
        h, c = _cell_from_preact(zx_all[:, t, :], h, c, params)
        outs.append(ad.reshape(h, (B, 1, H)))
    if return_mode == "last":
        return h
    return ad.concat(outs, axis=1)


class LSTM(Layer):
    def __init__(self, name, input_size, hidden_size, rng, return_mode="all"):
        self.name = name
        self.return_mode = return_mode
        self.cell = LSTMCellParams.init(name, input_size, hidden_size, rng)

    def params(self):
        return self.cell.params()

    def __call__(self, x, training=False):
        return lstm_layer(x, self.cell, self.return_mode)


# ---------------------------------------------------------------- TCN


@dataclass
class TCNConfig:
    filters: int = 6
    kernel_size: int = 2
    num_blocks: int = 2
    dilations: tuple[int, ...] = (1, 2)
    dropout_p: float = 0.5

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != self.num_blocks:
            raise ValueError("one dilation per block required")
        for a, b in zip(self.dilations, self.dilations[1:]):
            if b <= a:
                raise ValueError(f"dilations must strictly increase, got {self.dilations}")
        for d in self.dilations:
            if d < 1 or d & (d - 1):
                raise ValueError(f"dilations must be powers of two, got {self.dilations}")

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel_size - 1) * sum(self.dilations)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None, dilation: int) -> Tensor:
    """Dilated causal convolution over (batch, time, channels); kernel is (k, C_in, C_out).

    Tap ``i`` looks back ``(k - 1 - i) * dilation`` steps; positions before
    the start read zeros.
    """
    B, T, _ = x.shape
    k = kernel.shape[0]
    reach = (k - 1) * dilation
    xp = ad.pad(x, ((0, 0), (reach, 0), (0, 0))) if reach else x
    out = None
    for i in range(k):
        start = i * dilation
        term = ad.matmul(xp[:, start : start + T, :], kernel[i])
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


class TCNBlock:
    def __init__(self, name, in_channels, cfg: TCNConfig, dilation, rng):
        k, F = cfg.kernel_size, cfg.filters
        self.dilation = dilation
        self.p = cfg.dropout_p
        self.conv0 = _param(f"{name}.conv0.kernel", truncated_normal(rng, (k, in_channels, F), k * in_channels))
        self.bias0 = _param(f"{name}.conv0.bias", np.zeros(F))
        self.conv1 = _param(f"{name}.conv1.kernel", truncated_normal(rng, (k, F, F), k * F))
        self.bias1 = _param(f"{name}.conv1.bias", np.zeros(F))
        if in_channels != F:
            self.proj = _param(f"{name}.proj.kernel", truncated_normal(rng, (in_channels, F), in_channels))
            self.proj_bias = _param(f"{name}.proj.bias", np.zeros(F))
        else:
            self.proj = self.proj_bias = None

    def params(self):
        ps = [self.conv0, self.bias0, self.conv1, self.bias1]
        if self.proj is not None:
            ps += [self.proj, self.proj_bias]
        return ps

    def __call__(self, x: Tensor, training: bool, rng) -> Tensor:
        y = ad.elu(causal_conv1d(x, self.conv0.tensor, self.bias0.tensor, self.dilation))
        y = dropout(y, self.p, training, rng)
        y = ad.elu(causal_conv1d(y, self.conv1.tensor, self.bias1.tensor, self.dilation))
        y = dropout(y, self.p, training, rng)
        res = x if self.proj is None else ad.matmul(x, self.proj.tensor) + self.proj_bias.tensor
        return y + res


class TCN(Layer):
    """Residual stack of dilated causal convolutions over (batch, time, channels)."""

    def __init__(self, name, in_channels, cfg: TCNConfig, rng, dropout_rng=None, return_sequence=False):
        self.name = name
        self.cfg = cfg
        self.return_sequence = return_sequence
        self.dropout_rng = dropout_rng
        self.blocks = []
        ch = in_channels
        for b, d in enumerate(cfg.dilations):
            self.blocks.append(TCNBlock(f"{name}.block{b}", ch, cfg, d, rng))
            ch = cfg.filters

    def params(self):
        return [p for blk in self.blocks for p in blk.params()]

    def __call__(self, x, training=False):
        return tcn_forward(x, self, training, self.return_sequence)


def tcn_forward(sequence, tcn: TCN, training: bool = False, return_sequence: bool = False) -> Tensor:
    """Run the TCN; returns last-step features (batch, filters) unless ``return_sequence``."""
    x = ad.as_tensor(sequence)
    if x.ndim == 2:
        x = ad.reshape(x, (1, *x.shape))
    T = x.shape[1]
    if T < tcn.cfg.kernel_size:
        raise ShapeError(
            f"tcn: sequence length {T} too short; need at least {tcn.cfg.kernel_size} time steps"
        )
    if tcn.cfg.receptive_field < T:
        log.debug("tcn receptive field %d does not cover %d steps", tcn.cfg.receptive_field, T)
    for blk in tcn.blocks:
        x = blk(x, training, tcn.dropout_rng)
    if return_sequence:
        return x
    return x[:, T - 1, :]
