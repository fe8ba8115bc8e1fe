"""The six classifier topologies.

========================  ==========================================================
``lenet``                 two conv/pool stages, dense 120 -> 84 -> 2
``lenet-fnb``             dense-120 features feed both the 84-unit dense layer and a FNB
``eeg-tcnet``             EEGNet front end, TCN, dense 2
``eeg-tcnet-fnb``         TCN features feed a 16-unit ELU dense layer and a FNB
``eeg-tcnet-lstm``        TCN sequence, two 30-unit LSTMs, dense 2
``eeg-tcfnet``            as above, LSTM output feeds a 16-unit ELU dense layer and a FNB
========================  ==========================================================

With a FNB the dense branch and the rule activations are concatenated and
mapped to two logits. Every model outputs (non-target, target) probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .fnb import FNB
from .layers import (
    AvgPool2D,
    BatchNorm,
    Conv2D,
    Dense,
    DepthwiseConv2D,
    Dropout,
    SeparableConv2D,
)
from .sequence import LSTM, TCN, TCNConfig

TOPOLOGIES = (
    "lenet",
    "lenet-fnb",
    "eeg-tcnet",
    "eeg-tcnet-fnb",
    "eeg-tcnet-lstm",
    "eeg-tcfnet",
)
FNB_PAIRS = (
    ("lenet", "lenet-fnb"),
    ("eeg-tcnet", "eeg-tcnet-fnb"),
    ("eeg-tcnet-lstm", "eeg-tcfnet"),
)
INPUT_SHAPE = (16, 120, 1)
TARGET = 1


@dataclass
class ModelConfig:
    seed: int = 0
    fnb_k: int = 4
    fc_width: int = 16
    eegnet_dropout: float = 0.25
    tcn_dropout: float = 0.5
    tcn_mode: str = "sequence"  # or "flat"
    fnb_grad_to_input: bool = True
    fnb_capacity: int = 4096
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    input_shape: tuple = INPUT_SHAPE

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass(frozen=True)
class MergeSpec:
    fc_branch_width: int
    fnb_K: int

    @property
    def width(self) -> int:
        return self.fc_branch_width + self.fnb_K


class ModelGraph:
    """A built topology: named parameters plus a forward function.

    ``logits`` records per-layer output shapes (without the batch axis) into
    ``trace`` when one is passed.
    """

    def __init__(self, topology: str, config: ModelConfig):
        self.topology = topology
        self.config = config
        init_ss, drop_ss, fnb_ss = np.random.SeedSequence(config.seed).spawn(3)
        self.init_rng = np.random.default_rng(init_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        self.fnb_rng = np.random.default_rng(fnb_ss)
        self.fnb: FNB | None = None
        self.merge: MergeSpec | None = None
        self.extra: list[Parameter] = []  # non-trainable state such as standardization stats
        self._modules: list = []

    # -- parameter bookkeeping
    def _add(self, module):
        self._modules.append(module)
        return module

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen = set()
        for mod in self._modules:
            for p in mod.params():
                if p.name in seen:
                    raise ValueError(f"duplicate parameter name {p.name}")
                seen.add(p.name)
                out.append(p)
        for p in self.extra:
            if p.name in seen:
                raise ValueError(f"duplicate parameter name {p.name}")
            seen.add(p.name)
            out.append(p)
        return out

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params() if p.trainable]

    def param(self, name: str) -> Parameter:
        for p in self.params():
            if p.name == name:
                return p
        raise KeyError(name)

    def set_extra(self, name: str, data) -> None:
        for p in self.extra:
            if p.name == name:
                p.tensor.data = np.asarray(data, dtype=float)
                return
        self.extra.append(Parameter(name, Tensor(np.asarray(data, dtype=float)), trainable=False))

    def get_extra(self, name: str) -> np.ndarray | None:
        for p in self.extra:
            if p.name == name:
                return p.data
        return None

    # -- forward
    def check_input(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
        exp = tuple(self.config.input_shape)
        if x.shape == exp:
            x = x[None]
        elif x.shape == exp[:2]:
            x = x[None, ..., None]
        elif x.ndim == 3 and x.shape[1:] == exp[:2]:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:] != exp:
            raise ShapeError(f"expected epochs of shape {exp} (optionally batched), got {x.shape}")
        return x

    def logits(self, x, training: bool = False, trace: list | None = None) -> Tensor:
        x = Tensor(self.check_input(x))
        return self._forward(x, training, trace)

    def _forward(self, x, training, trace):  # pragma: no cover - replaced per topology
        raise NotImplementedError

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = self.check_input(x)
        outs = [
            ad.softmax(self.logits(x[i : i + batch_size], training=False)).data
            for i in range(0, len(x), batch_size)
        ]
        return np.concatenate(outs) if outs else np.zeros((0, 2))

    def shape_trace(self) -> list[tuple[str, str, tuple]]:
        trace: list = []
        bns = [m for m in self._modules if isinstance(m, BatchNorm)]
        warned = [bn.warned for bn in bns]
        for bn in bns:
            bn.warned = True  # a shape probe is not a real inference
        try:
            self.logits(np.zeros((2, *self.config.input_shape)), training=False, trace=trace)
        finally:
            for bn, w in zip(bns, warned):
                bn.warned = w
        return trace


def _rec(trace, layer, kind, t: Tensor):
    if trace is not None:
        trace.append((layer, kind, tuple(t.shape[1:])))
    return t


# ---------------------------------------------------------------- builders


def _build_lenet(g: ModelGraph, with_fnb: bool):
    cfg, rng = g.config, g.init_rng
    conv1 = g._add(Conv2D("conv1", 1, 6, (5, 5), rng))
    conv2 = g._add(Conv2D("conv2", 6, 16, (5, 5), rng))
    dense4 = g._add(Dense("dense4", 432, 120, rng, "relu"))
    dense5 = g._add(Dense("dense5", 120, 84, rng, "relu"))
    if with_fnb:
        g.fnb = g._add(FNB("fnb", 120, cfg.fnb_k, g.fnb_rng, cfg.fnb_capacity, grad_to_input=cfg.fnb_grad_to_input))
        g.merge = MergeSpec(84, cfg.fnb_k)
        out = g._add(Dense("out", g.merge.width, 2, rng))
    else:
        out = g._add(Dense("out", 84, 2, rng))
    pool = AvgPool2D((2, 2))

    def forward(x, training, trace):
        _rec(trace, "L1", "Input", x)
        h = _rec(trace, "L1", "Conv2D", ad.relu(conv1(x)))
        h = _rec(trace, "L1", "AveragePool2D", pool(h))
        h = _rec(trace, "L2", "Conv2D", ad.relu(conv2(h)))
        h = _rec(trace, "L2", "AveragePool2D", pool(h))
        h = _rec(trace, "L3", "Flatten", ad.reshape(h, (h.shape[0], -1)))
        h4 = _rec(trace, "L4", "Dense", dense4(h))
        h5 = _rec(trace, "L5", "Dense", dense5(h4))
        if g.fnb is not None:
            f = _rec(trace, "FNB", "FNB", g.fnb(h4, training))
            h5 = _rec(trace, "Merge", "Concatenate", ad.concat([h5, f], axis=1))
        return _rec(trace, "L6", "Dense", out(h5))

    g._forward = forward


def _build_eeg_tcnet(g: ModelGraph, lstm: bool, with_fnb: bool):
    cfg, rng = g.config, g.init_rng
    H = cfg.input_shape[0]
    conv1 = g._add(Conv2D("conv1", 1, 8, (1, 20), rng, padding="same", use_bias=False))
    bn1 = g._add(BatchNorm("bn1", 8, cfg.bn_momentum, cfg.bn_eps))
    dw2 = g._add(DepthwiseConv2D("depthwise2", 8, (H, 1), 2, rng))
    bn2 = g._add(BatchNorm("bn2", 16, cfg.bn_momentum, cfg.bn_eps))
    sep3 = g._add(SeparableConv2D("separable3", 16, 8, (1, 6), rng))
    bn3 = g._add(BatchNorm("bn3", 8, cfg.bn_momentum, cfg.bn_eps))
    pool2, pool3 = AvgPool2D((1, 4)), AvgPool2D((1, 5))
    drop = Dropout(cfg.eegnet_dropout, g.dropout_rng)
    if cfg.tcn_mode not in ("sequence", "flat"):
        raise ValueError(f"tcn_mode must be 'sequence' or 'flat', got {cfg.tcn_mode!r}")
    tcn_in = 8 if cfg.tcn_mode == "sequence" else 1
    tcn_cfg = TCNConfig(filters=6, kernel_size=2, num_blocks=2, dilations=(1, 2), dropout_p=cfg.tcn_dropout)
    tcn = g._add(TCN("tcn", tcn_in, tcn_cfg, rng, g.dropout_rng, return_sequence=lstm))
    feat_width = 6
    if lstm:
        lstm1 = g._add(LSTM("lstm1", 6, 30, rng, "all"))
        lstm2 = g._add(LSTM("lstm2", 30, 30, rng, "last"))
        feat_width = 30
    if with_fnb:
        fc = g._add(Dense("fc", feat_width, cfg.fc_width, rng, "elu"))
        g.fnb = g._add(
            FNB("fnb", feat_width, cfg.fnb_k, g.fnb_rng, cfg.fnb_capacity, grad_to_input=cfg.fnb_grad_to_input)
        )
        g.merge = MergeSpec(cfg.fc_width, cfg.fnb_k)
        out = g._add(Dense("out", g.merge.width, 2, rng))
    else:
        out = g._add(Dense("out", feat_width, 2, rng))

    def forward(x, training, trace):
        _rec(trace, "L1", "Input", x)
        h = conv1(x)
        h = _rec(trace, "L1", "Conv2D+BatchNorm", bn1(h, training))
        h = ad.elu(bn2(dw2(h), training))
        _rec(trace, "L2", "DepthwiseConv2D+BatchNorm+ELU", h)
        h = _rec(trace, "L2", "AveragePool2D+Dropout", drop(pool2(h), training))
        h = ad.elu(bn3(sep3(h), training))
        _rec(trace, "L3", "SeparableConv2D+BatchNorm+ELU", h)
        h = _rec(trace, "L3", "AveragePool2D+Dropout", drop(pool3(h), training))
        B, _, T, M = h.shape
        flat = ad.reshape(h, (B, -1))
        if trace is not None:
            trace.append(("L4", "Flatten", (1, flat.shape[1])))
        # row-major flatten of (1, T, M) reshaped back is the (time, maps) sequence
        seq = ad.reshape(flat, (B, T, M)) if cfg.tcn_mode == "sequence" else ad.reshape(flat, (B, T * M, 1))
        feats = _rec(trace, "L5", "TCN", tcn(seq, training))
        layer = "L6"
        if lstm:
            feats = _rec(trace, "L6", "LSTM", lstm1(feats, training))
            feats = _rec(trace, "L7", "LSTM", lstm2(feats, training))
            layer = "L8"
        if g.fnb is not None:
            branch = _rec(trace, layer, "Dense", fc(feats))
            f = _rec(trace, layer, "FNB", g.fnb(feats, training))
            feats = _rec(trace, "Merge", "Concatenate", ad.concat([branch, f], axis=1))
        return _rec(trace, "Out", "Dense", out(feats))

    g._forward = forward


def build(topology: str, config: ModelConfig | dict | None = None) -> ModelGraph:
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}; valid: {', '.join(TOPOLOGIES)}")
    if config is None:
        config = ModelConfig()
    elif isinstance(config, dict):
        config = ModelConfig.from_mapping(config)
    g = ModelGraph(topology, config)
    if topology.startswith("lenet"):
        _build_lenet(g, topology == "lenet-fnb")
    else:
        _build_eeg_tcnet(
            g,
            lstm=topology in ("eeg-tcnet-lstm", "eeg-tcfnet"),
            with_fnb=topology in ("eeg-tcnet-fnb", "eeg-tcfnet"),
        )
    return g


def forward(model: ModelGraph, batch, mode: str = "infer") -> Tensor:
    """Class probabilities (B, 2) as a tensor."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return ad.softmax(model.logits(batch, training=mode == "train"))


def predict(model: ModelGraph, epoch) -> tuple[int, float]:
    """(label, confidence) for a single epoch; confidence is P(target)."""
    p = model.predict_proba(epoch)[0]
    return int(np.argmax(p)), float(p[TARGET])


def count_parameters(model: ModelGraph) -> int:
    return int(sum(p.tensor.size for p in model.trainable_params()))


def config_dict(model: ModelGraph) -> dict:
    d = asdict(model.config)
    d["architecture"] = model.topology
    return d
