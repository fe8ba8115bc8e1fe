"""End-to-end runs: preprocessing a dataset, training every fold, evaluating checkpoints.

Layout of a training output directory::

    config.txt            effective key=value configuration (+ config_hash)
    folds.json            fold plan with the epoch keys of every split
    <fold>/model.tcfn     final weights, batch-norm and fuzzy state, standardization stats
    <fold>/history.csv    per-epoch training record
    <fold>/state.npz      resumable float64 training state (removed once the fold completes)
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .architectures import ModelGraph, build
from .dsp import PreprocessConfig, Standardizer, preprocess_run
from .evaluation import (
    ResultRecord,
    accuracy,
    cross_entropy,
    curves_csv,
    make_folds,
    results_csv,
    split_epochs,
    target_by_block_curve,
)
from .evaluation import _csv
from .layers import BatchNorm
from .records import EpochSet
from .sim import SessionDataset, load_dataset
from .training import History, train

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_ce", "train_acc", "val_ce", "val_acc")
PREDICTION_COLUMNS = ("subject", "session", "run", "block", "item", "label", "p_target", "pred")


def parse_subjects(spec) -> list[int] | None:
    if spec in (None, "", ()):
        return None
    if isinstance(spec, (list, tuple)):
        return [int(s) for s in spec]
    return [int(s) for s in str(spec).split(",") if s.strip()]


def dataset_epochs(ds: SessionDataset, pre: PreprocessConfig, subjects=None) -> EpochSet:
    """Preprocess every run (optionally of selected subjects) into one epoch set."""
    sets = [preprocess_run(run, pre) for run in ds.iter_runs(subjects=subjects)]
    if not sets:
        raise ValueError("dataset has no runs for the requested subjects")
    return EpochSet.concat(sets)


def fold_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _keys_list(eps: EpochSet, idx) -> list:
    return eps.keys()[idx].tolist()


def _write_history(path: Path, h: History) -> None:
    rows = [[r.epoch, r.train_ce, r.train_acc, r.val_ce, r.val_acc] for r in h.records]
    path.write_text(_csv(rows, HISTORY_COLUMNS))


def train_fold(args) -> str:
    """Train one fold; returns its name. Safe to run in a worker process."""
    cfg, fold, index, eps, out, resume, stop_after = args
    tcfg, mcfg, _ = cfgmod.split(cfg)
    fdir = Path(out) / fold.name
    fdir.mkdir(parents=True, exist_ok=True)
    ckpt = fdir / "model.tcfn"
    if resume and ckpt.exists():
        log.info("fold %s already complete", fold.name)
        return fold.name
    tr, va, te = split_epochs(fold, eps, cfg["val_fraction"], cfg["seed"])
    std = Standardizer.fit(eps.data[tr])
    model = build(cfg["architecture"], replace(mcfg, seed=fold_seed(cfg["seed"], index)))
    model.set_extra("prep.mean", std.mean)
    model.set_extra("prep.std", std.std)
    state = fdir / "state.npz"
    history = train(
        model,
        std.apply(eps.data[tr]),
        eps.label[tr],
        std.apply(eps.data[va]),
        eps.label[va],
        replace(tcfg, seed=fold_seed(cfg["seed"], index)),
        keys={"train": eps.keys()[tr], "val": eps.keys()[va], "test": eps.keys()[te]},
        state_path=state,
        resume=resume and state.exists(),
        stop_after=stop_after,
    )
    _write_history(fdir / "history.csv", history)
    done = history.stopped_early or len(history.records) >= tcfg.max_epochs
    if done:
        checkpoint.save(model.params(), ckpt)
        state.unlink(missing_ok=True)
    return fold.name


def run_training(cfg: dict, data_dir, out_dir, jobs: int = 1, resume: bool = True, stop_after: int | None = None) -> dict:
    """Train one checkpoint per fold. Returns the fold manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    _, _, pre = cfgmod.split(cfg)
    subjects = parse_subjects(cfg.get("subjects"))
    eps = dataset_epochs(ds, pre, subjects)
    groups = sorted(set(zip(eps.subject.tolist(), eps.session.tolist())))
    plan = make_folds(groups, cfg["strategy"], cfg["val_fraction"], cfg["seed"])
    h = cfgmod.config_hash(cfg)
    (out / "config.txt").write_text(cfgmod.render(cfg) + f"# config_hash={h}\n# dataset_hash={ds.dataset_hash}\n")
    manifest = {"config_hash": h, "dataset_hash": ds.dataset_hash, **plan.to_dict(), "splits": {}}
    for fold in plan.folds:
        tr, va, te = split_epochs(fold, eps, cfg["val_fraction"], cfg["seed"])
        manifest["splits"][fold.name] = {
            "train": _keys_list(eps, tr), "val": _keys_list(eps, va), "test": _keys_list(eps, te),
        }
    (out / "folds.json").write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    jobs_args = [(cfg, f, i, eps, str(out), resume, stop_after) for i, f in enumerate(plan.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(train_fold, jobs_args))
    else:
        for a in jobs_args:
            train_fold(a)
    return manifest


# ---------------------------------------------------------------- evaluation


def read_run_config(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / "config.txt"
    return cfgmod.resolve(cfgmod.read_file(path))


def load_fold_model(cfg: dict, fold_dir: Path) -> tuple[ModelGraph, Standardizer]:
    _, mcfg, _ = cfgmod.split(cfg)
    model = build(cfg["architecture"], mcfg)
    entries = checkpoint.load(fold_dir / "model.tcfn")
    for name in ("prep.mean", "prep.std"):
        if name not in entries:
            raise checkpoint.CheckpointError(f"{fold_dir / 'model.tcfn'}: missing {name}")
        model.set_extra(name, entries[name][0])
    checkpoint.restore(model.params(), entries)
    for m in model._modules:
        if isinstance(m, BatchNorm):
            m.updates = max(m.updates, 1)  # running statistics come from training
    return model, Standardizer(model.get_extra("prep.mean"), model.get_extra("prep.std"))


class LabelOracle:
    """Scores each epoch with its true label: the ideal classifier."""

    def __call__(self, epochs: EpochSet) -> np.ndarray:
        return epochs.label.astype(float)


def run_evaluation(ckpt_dir, data_dir, out_dir, max_blocks: int = 20, oracle: bool = False,
                   strategy: str | None = None, cfg: dict | None = None) -> list[ResultRecord]:
    """Score every fold's test split and write results.csv, curves.csv and predictions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ckpt_dir is not None:
        cfg = read_run_config(ckpt_dir)
    elif cfg is None:
        cfg = cfgmod.resolve()
    if strategy:
        cfg = {**cfg, "strategy": strategy}
    ds = load_dataset(data_dir)
    _, _, pre = cfgmod.split(cfg)
    subjects = parse_subjects(cfg.get("subjects"))
    eps = dataset_epochs(ds, pre, subjects)
    groups = sorted(set(zip(eps.subject.tolist(), eps.session.tolist())))
    plan = make_folds(groups, cfg["strategy"], cfg["val_fraction"], cfg["seed"])
    topology = "oracle" if oracle else cfg["architecture"]
    h = cfgmod.config_hash(cfg)
    records = []
    pred_rows = []
    for fold in plan.folds:
        _, _, te = split_epochs(fold, eps, cfg["val_fraction"], cfg["seed"])
        test = eps.take(te)
        if oracle:
            model, std = LabelOracle(), None
            probs = np.stack([1.0 - test.label, test.label.astype(float)], axis=1)
        else:
            model, std = load_fold_model(cfg, Path(ckpt_dir) / fold.name)
            probs = model.predict_proba(std.apply(test.data))
        preds = probs.argmax(1)
        runs = [ds.get_run(s, ses, r.run) for s, ses in fold.test for r in ds.entries
                if (r.subject, r.session) == (s, ses)]
        nb = min(max_blocks, min(r.n_blocks for r in runs))
        if nb < max_blocks:
            log.warning("fold %s: curve truncated to %d blocks", fold.name, nb)
        curve = target_by_block_curve(model, runs, nb, pre, std)
        records.append(ResultRecord(
            topology, cfg["strategy"], int(fold.subject), fold.name, accuracy(preds, test.label),
            cross_entropy(probs, test.label), len(test), h, int(cfg["seed"]), curve,
        ))
        for i in range(len(test)):
            pred_rows.append([test.subject[i], test.session[i], test.run[i], test.block[i], test.item[i],
                              test.label[i], probs[i, 1], preds[i]])
    (out / "results.csv").write_text(results_csv(records))
    (out / "curves.csv").write_text(curves_csv(records))
    (out / "predictions.csv").write_text(_csv(pred_rows, PREDICTION_COLUMNS))
    (out / "config.txt").write_text(cfgmod.render(cfg) + f"# config_hash={h}\n")
    return records
