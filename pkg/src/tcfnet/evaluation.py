"""Cross-validation plans, metrics, target-by-block curves and paired statistics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import kolmogorov, ndtr

from .architectures import FNB_PAIRS, TOPOLOGIES
from .records import N_ITEMS, EpochSet

log = logging.getLogger(__name__)

STRATEGIES = ("leave_one_session_out", "leave_one_subject_out")
SELECTION_SECONDS_PER_BLOCK = N_ITEMS * 0.4


# ---------------------------------------------------------------- folds


@dataclass
class Fold:
    name: str
    strategy: str
    test: list[tuple[int, int]]  # (subject, session) groups held out
    train: list[tuple[int, int]]
    subject: int | None = None  # owning subject for session folds, held-out subject otherwise


@dataclass
class FoldPlan:
    strategy: str
    folds: list[Fold]
    val_fraction: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "val_fraction": self.val_fraction, "seed": self.seed,
                "folds": [asdict(f) for f in self.folds]}


def make_folds(groups: Iterable[tuple[int, int]], strategy: str, val_fraction: float = 0.1, seed: int = 0) -> FoldPlan:
    """Plan folds over (subject, session) groups.

    ``leave_one_session_out``: for each subject, each session is a test
    fold and that subject's other sessions train. ``leave_one_subject_out``:
    each subject is a test fold and every other subject trains. Validation is
    carved from the training epochs later (see :func:`split_epochs`).
    """
    groups = sorted(set((int(a), int(b)) for a, b in groups))
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    subjects = sorted({s for s, _ in groups})
    folds: list[Fold] = []
    if strategy == "leave_one_session_out":
        for subj in subjects:
            sess = [g for g in groups if g[0] == subj]
            if len(sess) < 2:
                raise ValueError(f"subject {subj} has {len(sess)} session(s); leave-one-session-out needs >= 2")
            for g in sess:
                folds.append(Fold(f"sub-{subj:02d}_ses-{g[1]}", strategy, [g], [h for h in sess if h != g], subj))
    else:
        if len(subjects) < 2:
            raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(subjects)}")
        for subj in subjects:
            test = [g for g in groups if g[0] == subj]
            folds.append(Fold(f"sub-{subj:02d}", strategy, test, [g for g in groups if g[0] != subj], subj))
    return FoldPlan(strategy, folds, val_fraction, seed)


def split_epochs(fold: Fold, epochs: EpochSet, val_fraction: float = 0.1, seed: int = 0):
    """Index arrays (train, val, test) into ``epochs`` for one fold; validation is a seeded carve of training epochs."""
    grp = list(zip(epochs.subject.tolist(), epochs.session.tolist()))
    test_set, train_set = set(fold.test), set(fold.train)
    test = np.array([i for i, g in enumerate(grp) if g in test_set], dtype=np.int64)
    pool = np.array([i for i, g in enumerate(grp) if g in train_set], dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), *map(ord, fold.name)]))
    perm = rng.permutation(len(pool))
    n_val = int(round(val_fraction * len(pool)))
    val = np.sort(pool[perm[:n_val]])
    train = np.sort(pool[perm[n_val:]])
    return train, val, test


# ---------------------------------------------------------------- metrics


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"accuracy: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(100.0 * np.mean(preds == labels))


def cross_entropy(probs, labels) -> float:
    """Mean negative log-likelihood in nats; ``probs`` is (N, C), probabilities clipped at 1e-12."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-12, 1.0)
    return 0.0 + float(-np.mean(np.log(p)))


def bits_per_selection(P: float, N: int = N_ITEMS) -> float:
    """Wolpaw information per selection; endpoint terms taken by continuity."""
    if N < 2:
        raise ValueError("need at least two alternatives")
    if not 0.0 <= P <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {P}")
    b = math.log2(N)
    if P > 0:
        b += P * math.log2(P)
    if P < 1:
        b += (1 - P) * math.log2((1 - P) / (N - 1))
    return b


def bitrate(P: float, N: int = N_ITEMS, T_seconds: float = SELECTION_SECONDS_PER_BLOCK) -> float:
    """Bits per minute at one selection every ``T_seconds``."""
    if T_seconds <= 0:
        raise ValueError("selection time must be positive")
    return bits_per_selection(P, N) * 60.0 / T_seconds


@dataclass
class CurvePoint:
    n_blocks: int
    time_s: float
    accuracy: float  # percent of runs whose item was selected correctly
    bitrate: float  # bits/min


def target_by_block_curve(model, runs, max_blocks: int, preprocessing=None, standardizer=None) -> list[CurvePoint]:
    """Selection accuracy and bitrate after n = 1..max_blocks blocks, over ``runs``."""
    from .sim import score_run, select_item

    runs = list(runs)
    if not runs:
        raise ValueError("no runs to evaluate")
    short = [r for r in runs if r.n_blocks < max_blocks]
    if short:
        raise ValueError(f"{len(short)} run(s) have fewer than {max_blocks} blocks")
    scored = [(r, *score_run(model, r, preprocessing, standardizer)) for r in runs]
    curve = []
    for n in range(1, max_blocks + 1):
        hits = 0
        for run, eps, conf in scored:
            pred, _ = select_item(conf, eps.item, eps.block, n)
            hits += int(pred == run.target_item)
        P = hits / len(runs)
        T = n * SELECTION_SECONDS_PER_BLOCK
        curve.append(CurvePoint(n, T, 100.0 * P, bitrate(P, N_ITEMS, T)))
    return curve


# ---------------------------------------------------------------- statistics


@dataclass
class WilcoxonResult:
    W: float
    p: float
    n: int
    method: str  # exact | normal | undefined


def _exact_null_cdf(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable 2*W+ over all 2^n sign assignments (dynamic programming)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = 25) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; tied magnitudes get midranks. W is the
    smaller of the positive and negative rank sums. For n <= ``exact_max_n``
    the p-value is exact (every sign assignment counted); above that a
    normal approximation with continuity and tie corrections is used.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1:
        raise ValueError("paired samples must be one-dimensional and of equal length")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(float("nan"), float("nan"), 0, "undefined")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    mag = np.abs(d)
    order = np.argsort(mag, kind="mergesort")
    ranks = np.empty(n)
    sorted_mag = mag[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_mag[j + 1] == sorted_mag[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_null_cdf(doubled)
        k = int(round(2 * W))
        tail = int(sum(counts[: k + 1]))
        p = min(1.0, 2.0 * tail / 2**n)
        return WilcoxonResult(W, p, n, "exact")
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(((tie_counts**3) - tie_counts).sum()) / 48
    z = (W - mean + 0.5) / math.sqrt(var)
    return WilcoxonResult(W, min(1.0, 2.0 * float(ndtr(z))), n, "normal")


def ks_normality(samples, mean: float | None = None, sd: float | None = None) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov test against a normal distribution.

    By default the normal takes the sample mean and SD (ddof=1); pass
    ``mean``/``sd`` to test against a fully specified normal. The p-value is
    the asymptotic Kolmogorov tail at sqrt(n) * D.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 5:
        raise ValueError(f"need at least 5 samples, got {n}")
    mu = float(x.mean()) if mean is None else float(mean)
    s = float(x.std(ddof=1)) if sd is None else float(sd)
    if not s > 0:
        raise ValueError("zero variance: normality test undefined")
    cdf = ndtr((x - mu) / s)
    i = np.arange(1, n + 1)
    D = float(max((i / n - cdf).max(), (cdf - (i - 1) / n).max()))
    return D, float(kolmogorov(math.sqrt(n) * D))


# ---------------------------------------------------------------- records and reports


@dataclass
class ResultRecord:
    topology: str
    strategy: str
    subject: int
    fold: str
    accuracy: float
    cross_entropy: float
    n_test: int
    config_hash: str
    seed: int
    curve: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")
        if self.cross_entropy < 0:
            raise ValueError(f"negative cross-entropy {self.cross_entropy}")


RESULT_COLUMNS = ("topology", "strategy", "subject", "fold", "accuracy", "cross_entropy", "n_test", "config_hash", "seed")
CURVE_COLUMNS = ("topology", "strategy", "subject", "fold", "n_blocks", "time_s", "accuracy", "bitrate")


def fmt(v) -> str:
    """Stable text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return f"{float(v):.10g}"
    return str(v)


def _csv(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return out.getvalue()


def results_csv(records: Sequence[ResultRecord]) -> str:
    return _csv(([getattr(r, c) for c in RESULT_COLUMNS] for r in records), RESULT_COLUMNS)


def curves_csv(records: Sequence[ResultRecord]) -> str:
    rows = []
    for r in records:
        for p in r.curve:
            rows.append([r.topology, r.strategy, r.subject, r.fold, p.n_blocks, p.time_s, p.accuracy, p.bitrate])
    return _csv(rows, CURVE_COLUMNS)


def read_results(text: str) -> list[ResultRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    missing = [c for c in RESULT_COLUMNS if rows and c not in rows[0]]
    if missing:
        raise ValueError(f"results file lacks column(s) {missing}")
    return [
        ResultRecord(
            r["topology"], r["strategy"], int(r["subject"]), r["fold"], float(r["accuracy"]),
            float(r["cross_entropy"]), int(r["n_test"]), r["config_hash"], int(r["seed"]),
        )
        for r in rows
    ]


COMPARE_COLUMNS = (
    "strategy", "topology", "base", "n_units", "mean_accuracy", "sd_accuracy", "mean_cross_entropy",
    "delta_vs_base", "wilcoxon_W", "p_value", "status",
)


def _unit_scores(records: list[ResultRecord], unit: str) -> dict:
    """Mean accuracy per pairing unit (subject, or individual fold)."""
    acc: dict = {}
    for r in records:
        key = r.subject if unit == "subject" else (r.subject, r.fold)
        acc.setdefault(key, []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}


def compare_report(records: Sequence[ResultRecord], strategies: Sequence[str] = STRATEGIES, unit: str = "subject"):
    """Table rows: per strategy and topology, mean/SD accuracy, and for FNB variants the paired test vs their base.

    Accuracy is first averaged per pairing ``unit`` (``subject`` or
    ``fold``); mean and SD (ddof=1) are taken over those units.
    """
    if unit not in ("subject", "fold"):
        raise ValueError("unit must be 'subject' or 'fold'")
    base_of = {fnb: base for base, fnb in FNB_PAIRS}
    rows = []
    for strategy in strategies:
        by_topo = {t: [r for r in records if r.strategy == strategy and r.topology == t] for t in TOPOLOGIES}
        for topo in TOPOLOGIES:
            recs = by_topo[topo]
            base = base_of.get(topo, "")
            if not recs:
                rows.append([strategy, topo, base, 0, float("nan"), float("nan"), float("nan"),
                             float("nan"), float("nan"), float("nan"), "incomplete: no results"])
                continue
            units = _unit_scores(recs, unit)
            vals = np.array(list(units.values()))
            mean = float(vals.mean())
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
            ce = float(np.mean([r.cross_entropy for r in recs]))
            delta = W = p = float("nan")
            status = "ok"
            if base:
                brecs = by_topo[base]
                if not brecs:
                    status = f"incomplete: no results for {base}"
                else:
                    bunits = _unit_scores(brecs, unit)
                    common = sorted(set(units) & set(bunits))
                    a = np.array([units[k] for k in common])
                    b = np.array([bunits[k] for k in common])
                    delta = float(a.mean() - b.mean()) if common else float("nan")
                    try:
                        res = wilcoxon_signed_rank(a, b)
                        W, p = res.W, res.p
                        if res.method == "undefined":
                            status = "p undefined: all differences zero"
                    except ValueError as exc:
                        status = f"p undefined: {exc}"
            rows.append([strategy, topo, base, len(vals), mean, sd, ce, delta, W, p, status])
    return rows


def compare_csv(rows) -> str:
    return _csv(rows, COMPARE_COLUMNS)


def stats_report(records: Sequence[ResultRecord], unit: str = "subject") -> str:
    """Plain-text Wilcoxon and Kolmogorov-Smirnov summary."""
    lines = []
    strategies = sorted({r.strategy for r in records})
    for strategy in strategies:
        lines.append(f"[{strategy}]")
        for topo in TOPOLOGIES:
            recs = [r for r in records if r.strategy == strategy and r.topology == topo]
            if not recs:
                continue
            vals = np.array(list(_unit_scores(recs, unit).values()))
            try:
                D, p = ks_normality(vals)
                lines.append(f"ks {topo}: n={len(vals)} D={fmt(D)} p={fmt(p)}")
            except ValueError as exc:
                lines.append(f"ks {topo}: n={len(vals)} undefined ({exc})")
        for row in compare_report(records, [strategy], unit):
            if row[2]:
                lines.append(
                    f"wilcoxon {row[1]} vs {row[2]}: n={row[3]} delta={fmt(row[7])} W={fmt(row[8])} p={fmt(row[9])} ({row[10]})"
                )
    return "\n".join(lines) + "\n"
