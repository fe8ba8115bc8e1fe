"""Mini-batch training with ADAM, early stopping and resumable state.

One training epoch = shuffled mini-batches of forward / backward / ADAM
steps, then the fuzzy block (if any) reclusters its centroids, then the
validation split is scored in inference mode. Training stops when the
validation cross-entropy has not improved for ``patience`` epochs; the best
weights are restored.

The full float64 training state (weights, optimizer moments, every RNG
stream, history and early-stopping bookkeeping) can be written after each
epoch so an interrupted run continues exactly where it stopped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .architectures import ModelGraph
from .layers import BatchNorm, cross_entropy
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 64
    max_epochs: int = 200
    patience: int = 20
    class_weighting: str = "balanced"  # balanced | none | undersample
    seed: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    train_ce: float
    train_acc: float
    val_ce: float
    val_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ce: float = float("inf")
    stale: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "best_val_ce": self.best_val_ce,
            "stale": self.stale,
            "stopped_early": self.stopped_early,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "History":
        return cls([EpochRecord(**r) for r in d["records"]], d["best_epoch"], d["best_val_ce"], d["stale"], d["stopped_early"])


def check_disjoint(**splits: np.ndarray) -> None:
    """Reject overlapping splits; each value is an (N, k) array of epoch keys."""
    seen: dict[tuple, str] = {}
    for name, keys in splits.items():
        for row in map(tuple, np.asarray(keys).tolist()):
            other = seen.get(row)
            if other is not None and other != name:
                raise ValueError(f"splits {other!r} and {name!r} overlap (epoch {row})")
            seen[row] = name


def class_weights(labels: np.ndarray, mode: str) -> np.ndarray | None:
    if mode in ("none", "undersample"):
        return None
    if mode != "balanced":
        raise ValueError(f"class_weighting must be balanced, none or undersample, got {mode!r}")
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=2).astype(float)
    if (counts == 0).any():
        return None
    return counts.sum() / (2.0 * counts)


def evaluate_split(model: ModelGraph, x: np.ndarray, y: np.ndarray, weights=None) -> tuple[float, float]:
    """(cross-entropy in nats, accuracy in [0,1]) in inference mode."""
    if len(x) == 0:
        return float("nan"), float("nan")
    p = model.predict_proba(x)
    idx = np.arange(len(y))
    nll = -np.log(np.clip(p[idx, y], 1e-12, 1.0))
    if weights is not None:
        w = weights[y]
        ce = float((nll * w).sum() / w.sum())
    else:
        ce = float(nll.mean())
    return ce, float((p.argmax(1) == y).mean())


# ---------------------------------------------------------------- state capture


def _bn_layers(model: ModelGraph) -> list[BatchNorm]:
    return [m for m in model._modules if isinstance(m, BatchNorm)]


def _rngs(model: ModelGraph, rng: np.random.Generator) -> dict[str, np.random.Generator]:
    out = {"shuffle": rng, "dropout": model.dropout_rng}
    if model.fnb is not None:
        out["fnb.buffer"] = model.fnb.buffer.rng
        out["fnb.cluster"] = model.fnb.cluster_rng
    return out


def snapshot_params(model: ModelGraph) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.params()}


def restore_params(model: ModelGraph, values: dict[str, np.ndarray]) -> None:
    for p in model.params():
        if p.name in values:
            p.tensor.data = np.array(values[p.name], dtype=float)


def save_training_state(path, model, opt: AdamState, rng, history: History, best: dict, epoch: int) -> None:
    """Write the exact float64 training state to ``path`` (npz)."""
    arrays = {f"param/{k}": v for k, v in snapshot_params(model).items()}
    arrays.update({f"best/{k}": v for k, v in best.items()})
    arrays.update({f"m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"v/{k}": v for k, v in opt.v.items()})
    meta = {
        "epoch": epoch,
        "adam_step": opt.step,
        "rng": {k: g.bit_generator.state for k, g in _rngs(model, rng).items()},
        "history": history.to_dict(),
        "bn_updates": [bn.updates for bn in _bn_layers(model)],
        "fnb_updates": model.fnb.updates if model.fnb is not None else 0,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_training_state(path, model, opt: AdamState, rng) -> tuple[History, dict, int]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        groups: dict[str, dict] = {"param": {}, "best": {}, "m": {}, "v": {}}
        for key in z.files:
            if "/" in key:
                g, name = key.split("/", 1)
                groups[g][name] = z[key].copy()
    restore_params(model, groups["param"])
    opt.m, opt.v, opt.step = groups["m"], groups["v"], int(meta["adam_step"])
    for k, g in _rngs(model, rng).items():
        g.bit_generator.state = meta["rng"][k]
    for bn, n in zip(_bn_layers(model), meta["bn_updates"]):
        bn.updates = n
    if model.fnb is not None:
        model.fnb.updates = meta["fnb_updates"]
        model.fnb.buffer.clear()
    return History.from_dict(meta["history"]), groups["best"], int(meta["epoch"])


# ---------------------------------------------------------------- loop


def _undersample(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    n = min(len(pos), len(neg))
    return np.sort(np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)]))


def train(
    model: ModelGraph,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: TrainConfig | None = None,
    *,
    keys: dict[str, np.ndarray] | None = None,
    state_path: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> History:
    """Fit ``model`` in place and return its history.

    ``keys`` maps split names to per-epoch identifier rows; overlapping
    splits are rejected before any work. With ``state_path`` the training
    state is saved after every epoch; ``resume`` continues from it.
    ``stop_after`` ends the call after that many epochs in total (used to
    simulate an interruption).
    """
    cfg = config or TrainConfig()
    if keys:
        check_disjoint(**keys)
    train_x = model.check_input(train_x)
    val_x = model.check_input(val_x) if len(val_x) else val_x
    train_y = np.asarray(train_y, dtype=int)
    val_y = np.asarray(val_y, dtype=int)
    weights = class_weights(train_y, cfg.class_weighting)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    opt = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = History()
    best = snapshot_params(model)
    start = 0
    if resume:
        if state_path is None or not Path(state_path).exists():
            raise FileNotFoundError(f"no training state to resume at {state_path}")
        history, best, start = load_training_state(state_path, model, opt, rng)
        log.info("resumed at epoch %d", start)

    params = model.trainable_params()
    for epoch in range(start, cfg.max_epochs):
        if history.stopped_early or (stop_after is not None and epoch >= stop_after):
            break
        idx = _undersample(train_y, rng) if cfg.class_weighting == "undersample" else np.arange(len(train_y))
        order = rng.permutation(idx)
        tot_loss = tot_w = 0.0
        correct = 0
        for s in range(0, len(order), cfg.batch):
            b = order[s : s + cfg.batch]
            if len(b) < 2:
                continue  # batch norm needs two samples
            logits = model.logits(train_x[b], training=True)
            loss = cross_entropy(logits, train_y[b], weights)
            for p in params:
                p.tensor.zero_grad()
            grads = ad.backward(loss, params)
            adam_step(params, grads, opt)
            bw = float(weights[train_y[b]].sum()) if weights is not None else float(len(b))
            tot_loss += float(loss.data) * bw
            tot_w += bw
            correct += int((logits.data.argmax(1) == train_y[b]).sum())
        if model.fnb is not None:
            model.fnb.epoch_end()
        val_ce, val_acc = evaluate_split(model, val_x, val_y, weights)
        rec = EpochRecord(epoch, tot_loss / max(tot_w, 1e-300), correct / max(len(order), 1), val_ce, val_acc)
        history.records.append(rec)
        score = val_ce if np.isfinite(val_ce) else rec.train_ce
        if score < history.best_val_ce:
            history.best_val_ce, history.best_epoch, history.stale = score, epoch, 0
            best = snapshot_params(model)
        else:
            history.stale += 1
            if history.stale >= cfg.patience:
                history.stopped_early = True
        log.info(
            "epoch %d train_ce=%.4f train_acc=%.3f val_ce=%.4f val_acc=%.3f",
            epoch, rec.train_ce, rec.train_acc, rec.val_ce, rec.val_acc,
        )
        if on_epoch is not None:
            on_epoch(rec)
        if state_path is not None:
            save_training_state(state_path, model, opt, rng, history, best, epoch + 1)
    finished = history.stopped_early or len(history.records) >= cfg.max_epochs
    if finished:
        restore_params(model, best)
    return history
