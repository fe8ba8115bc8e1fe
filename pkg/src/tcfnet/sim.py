"""Synthetic P300 sessions, the item-selection loop, and dataset files.

The generator follows the six-item oddball protocol: every block flashes
each item once in random order with a 400 ms stimulus-onset asynchrony
(100 ms flash, 300 ms blank), runs hold 20-25 blocks, and each of a
session's six runs has its own target item. Background activity mixes
spatially correlated pink noise, white noise, a posterior 10 Hz rhythm and
60 Hz line interference; target flashes additionally carry a Gaussian P300
bump with jittered latency, weighted towards centro-parietal electrodes.
Signals are in microvolts.

On disk a dataset is a tree ``sub-XX/ses-Y/run-Z.eeg`` (+ ``.events.csv``)
with a ``manifest.json`` holding per-file SHA-256 digests.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .records import N_CHANNELS, N_ITEMS, EpochSet, RawRun, StimulusEvent

log = logging.getLogger(__name__)

CHANNELS = ("Fz", "FC1", "FC2", "C3", "Cz", "C4", "CP1", "CP2", "P7", "P3", "Pz", "P4", "P8", "O1", "O2", "Oz")
# centro-parietal emphasis, Pz strongest
P300_WEIGHTS = (0.35, 0.5, 0.5, 0.6, 0.85, 0.6, 0.8, 0.8, 0.45, 0.85, 1.0, 0.85, 0.45, 0.4, 0.4, 0.45)
ALPHA_WEIGHTS = (0.2, 0.25, 0.25, 0.35, 0.35, 0.35, 0.5, 0.5, 0.8, 0.75, 0.75, 0.75, 0.8, 1.0, 1.0, 1.0)

SNR_PRESETS: dict[str, dict] = {
    "high": dict(p300_amplitude_uv=15.0, latency_jitter_ms=20.0, pink_uv=5.0, white_uv=2.0, alpha_uv=3.0, line_uv=10.0),
    "medium": dict(p300_amplitude_uv=5.0, latency_jitter_ms=35.0, pink_uv=8.0, white_uv=3.0, alpha_uv=5.0, line_uv=15.0),
    "street-noise": dict(p300_amplitude_uv=4.0, latency_jitter_ms=50.0, pink_uv=10.0, white_uv=6.0, alpha_uv=6.0, line_uv=40.0),
}

RAW_MAGIC = b"EEGR"
RAW_VERSION = 1
MANIFEST_VERSION = 1


@dataclass
class GeneratorConfig:
    subjects: int = 9
    sessions: int = 4
    runs_per_session: int = 6
    blocks_min: int = 20
    blocks_max: int = 25
    fs: float = 2400.0
    soa_ms: float = 400.0
    flash_ms: float = 100.0
    lead_in_ms: float = 2000.0
    tail_ms: float = 1500.0
    p300_amplitude_uv: float = 15.0
    p300_latency_ms: float = 300.0
    latency_jitter_ms: float = 20.0
    p300_width_ms: float = 60.0
    subject_latency_sd_ms: float = 15.0
    channel_weights: tuple = P300_WEIGHTS
    pink_uv: float = 5.0
    white_uv: float = 2.0
    alpha_uv: float = 3.0
    line_uv: float = 10.0
    pink_common: float = 0.3
    stroke_subjects: tuple = (7, 8, 9)
    stroke_attenuation: float = 0.6
    snr: str = "high"
    seed: int = 42

    def __post_init__(self):
        self.channel_weights = tuple(float(w) for w in self.channel_weights)
        self.stroke_subjects = tuple(int(s) for s in self.stroke_subjects)
        if len(self.channel_weights) != N_CHANNELS:
            raise ValueError(f"need {N_CHANNELS} channel weights, got {len(self.channel_weights)}")
        if not 20 <= self.blocks_min <= self.blocks_max <= 25:
            raise ValueError(f"blocks per run must lie in [20, 25], got {self.blocks_min}..{self.blocks_max}")
        for name in ("fs", "soa_ms", "flash_ms", "p300_width_ms", "tail_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.flash_ms > self.soa_ms:
            raise ValueError("flash duration exceeds the stimulus-onset asynchrony")
        if min(self.subjects, self.sessions, self.runs_per_session) < 1:
            raise ValueError("subjects, sessions and runs_per_session must be >= 1")

    @classmethod
    def preset(cls, snr: str = "high", **overrides) -> "GeneratorConfig":
        if snr not in SNR_PRESETS:
            raise ValueError(f"unknown SNR preset {snr!r}; valid: {', '.join(SNR_PRESETS)}")
        return cls(**{**SNR_PRESETS[snr], "snr": snr, **overrides})

    def samples(self, ms: float) -> int:
        return int(round(ms * self.fs / 1000.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_weights"] = list(self.channel_weights)
        d["stroke_subjects"] = list(self.stroke_subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def run_seed(master: int, subject: int, session: int, run: int) -> np.random.SeedSequence:
    """Independent stream per run, derived from the master seed and the run's ids."""
    return np.random.SeedSequence([int(master), int(subject), int(session), int(run)])


def _subject_traits(cfg: GeneratorConfig, subject: int) -> tuple[float, float]:
    """(amplitude factor, latency shift in ms) for a subject."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(subject), 0xA77]))
    shift = float(rng.normal(0.0, cfg.subject_latency_sd_ms)) if cfg.subject_latency_sd_ms > 0 else 0.0
    amp = float(rng.uniform(0.85, 1.15))
    if subject in cfg.stroke_subjects:
        amp *= cfg.stroke_attenuation
    return amp, shift


def session_targets(cfg: GeneratorConfig, subject: int, session: int) -> np.ndarray:
    """Target item of each run in a session: one per item, in seeded order."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(subject), int(session), 0x7A6]))
    order = rng.permutation(N_ITEMS)
    return np.resize(order, cfg.runs_per_session)


def pink_noise(rng: np.random.Generator, shape: tuple[int, int], fs: float, f_min: float = 0.5) -> np.ndarray:
    """Unit-RMS 1/f noise along the last axis (spectral shaping of white noise)."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    scale = 1.0 / np.sqrt(np.maximum(f, f_min))
    scale[0] = 0.0
    x = np.fft.irfft(spec * scale, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _events(cfg: GeneratorConfig, rng: np.random.Generator, target: int) -> list[StimulusEvent]:
    n_blocks = int(rng.integers(cfg.blocks_min, cfg.blocks_max + 1))
    soa = cfg.samples(cfg.soa_ms)
    start = cfg.samples(cfg.lead_in_ms)
    events = []
    k = 0
    for b in range(n_blocks):
        for item in rng.permutation(N_ITEMS):
            events.append(StimulusEvent(start + k * soa, int(item), bool(item == target), b))
            k += 1
    return events


def generate_run(cfg: GeneratorConfig, subject: int, session: int, run: int, seed: int | None = None) -> RawRun:
    """One continuous 16-channel recording plus its event table."""
    master = cfg.seed if seed is None else seed
    ss_events, ss_noise, ss_p300 = run_seed(master, subject, session, run).spawn(3)
    if seed is not None and seed != cfg.seed:
        cfg = replace(cfg, seed=seed)
    target = int(session_targets(cfg, subject, session)[(run - 1) % cfg.runs_per_session])
    events = _events(cfg, np.random.default_rng(ss_events), target)
    soa = cfg.samples(cfg.soa_ms)
    n = events[-1].onset_sample + soa + cfg.samples(cfg.tail_ms)
    fs = cfg.fs
    t = np.arange(n) / fs

    rng = np.random.default_rng(ss_noise)
    own = pink_noise(rng, (N_CHANNELS, n), fs)
    common = pink_noise(rng, (1, n), fs)
    pink = np.sqrt(1 - cfg.pink_common) * own + np.sqrt(cfg.pink_common) * common
    x = cfg.pink_uv * pink
    x += cfg.white_uv * rng.standard_normal((N_CHANNELS, n))
    # alpha: 10 Hz carrier with a slow random envelope
    env = pink_noise(rng, (1, n), fs, f_min=0.2)
    env = 1.0 + 0.5 * np.tanh(env)
    phase = rng.uniform(0, 2 * np.pi, (N_CHANNELS, 1))
    x += cfg.alpha_uv * np.asarray(ALPHA_WEIGHTS)[:, None] * env * np.sin(2 * np.pi * 10.0 * t + phase)
    line_gain = 1.0 + 0.1 * rng.standard_normal((N_CHANNELS, 1))
    x += cfg.line_uv * line_gain * np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))

    amp_factor, shift_ms = _subject_traits(cfg, subject)
    amp = cfg.p300_amplitude_uv * amp_factor
    w = np.asarray(cfg.channel_weights)[:, None]
    width = cfg.p300_width_ms / 1000.0
    half = int(6 * width * fs) + cfg.samples(cfg.p300_latency_ms + abs(shift_ms) + 4 * cfg.latency_jitter_ms)
    prng = np.random.default_rng(ss_p300)
    for ev in events:
        if not ev.is_target:
            continue
        lat = (cfg.p300_latency_ms + shift_ms + prng.normal(0.0, cfg.latency_jitter_ms) if cfg.latency_jitter_ms > 0
               else cfg.p300_latency_ms + shift_ms) / 1000.0
        lo = ev.onset_sample
        hi = min(n, lo + half)
        tt = np.arange(hi - lo) / fs
        x[:, lo:hi] += amp * w * np.exp(-0.5 * ((tt - lat) / width) ** 2)

    return RawRun(x.astype(np.float32), fs, events, subject, session, run, target)


# ---------------------------------------------------------------- item selection


def score_run(model, run: RawRun, preprocessing=None, standardizer=None) -> tuple[EpochSet, np.ndarray]:
    """Preprocess every flash of ``run`` and return (epochs, target confidences)."""
    from .dsp import PreprocessConfig, preprocess_run, standardize

    pre = preprocessing if preprocessing is not None else PreprocessConfig()
    epochs = pre(run) if callable(pre) else preprocess_run(run, pre)
    if standardizer is not None:
        epochs = standardize(epochs, standardizer)
    return epochs, _confidences(model, epochs)


def _confidences(model, epochs: EpochSet) -> np.ndarray:
    if len(epochs) == 0:
        return np.zeros(0)
    if hasattr(model, "predict_proba"):
        return model.predict_proba(epochs.data)[:, 1]
    return np.asarray(model(epochs), dtype=float).reshape(-1)


def select_item(confidence: np.ndarray, items: np.ndarray, blocks: np.ndarray, n_blocks_used: int):
    """Average per-item confidence over the first ``n_blocks_used`` blocks; argmax with lowest-index ties."""
    use = blocks < n_blocks_used
    per_item = np.full(N_ITEMS, -np.inf)
    for k in range(N_ITEMS):
        sel = use & (items == k)
        if sel.any():
            per_item[k] = confidence[sel].mean()
    best = per_item.max()
    winners = np.flatnonzero(per_item == best)
    if len(winners) > 1:
        log.debug("item selection tie between %s; choosing %d", winners.tolist(), winners[0])
    return int(winners[0]), per_item


def run_interaction(model, run: RawRun, preprocessing=None, n_blocks_used: int = 1, standardizer=None):
    """Select the attended item from the first ``n_blocks_used`` blocks of ``run``.

    ``model`` is a ModelGraph (or anything with ``predict_proba``) or a
    callable mapping an EpochSet to per-epoch target confidences. Only
    epochs of the first ``n_blocks_used`` blocks are scored, each once.
    Returns (predicted item, per-item mean confidence).
    """
    if n_blocks_used < 1:
        raise ValueError("n_blocks_used must be >= 1")
    if n_blocks_used > run.n_blocks:
        raise ValueError(f"run has {run.n_blocks} blocks, cannot use {n_blocks_used}")
    from .dsp import PreprocessConfig, preprocess_run, standardize

    pre = preprocessing if preprocessing is not None else PreprocessConfig()
    epochs = pre(run) if callable(pre) else preprocess_run(run, pre)
    epochs = epochs.take(np.flatnonzero(epochs.block < n_blocks_used))
    if standardizer is not None:
        epochs = standardize(epochs, standardizer)
    conf = _confidences(model, epochs)
    return select_item(conf, epochs.item, epochs.block, n_blocks_used)


# ---------------------------------------------------------------- persistence


class DatasetError(ValueError):
    pass


def encode_raw(run: RawRun) -> bytes:
    data = np.ascontiguousarray(run.samples, dtype="<f4")
    head = RAW_MAGIC + struct.pack("<HIQf", RAW_VERSION, data.shape[0], data.shape[1], run.fs)
    return head + data.tobytes()


def decode_raw(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, float]:
    hdr = struct.calcsize("<HIQf")
    if len(buf) < 4 + hdr:
        raise DatasetError(f"{source}: truncated header")
    if buf[:4] != RAW_MAGIC:
        raise DatasetError(f"{source}: bad magic {buf[:4]!r}, expected {RAW_MAGIC!r}")
    version, ch, n, fs = struct.unpack_from("<HIQf", buf, 4)
    if version != RAW_VERSION:
        raise DatasetError(f"{source}: unknown format version {version}")
    need = 4 + hdr + 4 * ch * n
    if len(buf) != need:
        raise DatasetError(f"{source}: expected {need} bytes, found {len(buf)} (truncated or padded)")
    data = np.frombuffer(buf, dtype="<f4", offset=4 + hdr).reshape(ch, n).astype(np.float32)
    return data, float(fs)


def encode_events(events: list[StimulusEvent]) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["onset_sample", "item_index", "is_target", "block_index"])
    for e in events:
        w.writerow([e.onset_sample, e.item_index, int(e.is_target), e.block_index])
    return out.getvalue().encode()


def decode_events(buf: bytes, source: str = "<bytes>") -> list[StimulusEvent]:
    rows = list(csv.reader(io.StringIO(buf.decode())))
    if not rows or rows[0] != ["onset_sample", "item_index", "is_target", "block_index"]:
        raise DatasetError(f"{source}: missing or wrong events header")
    try:
        return [StimulusEvent(int(a), int(b), bool(int(c)), int(d)) for a, b, c, d in rows[1:]]
    except ValueError as exc:
        raise DatasetError(f"{source}: malformed event row ({exc})") from None


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def run_relpath(subject: int, session: int, run: int) -> str:
    return f"sub-{subject:02d}/ses-{session}/run-{run}"


@dataclass
class RunEntry:
    subject: int
    session: int
    run: int
    target_item: int
    n_blocks: int
    signal: str
    events: str
    signal_sha256: str
    events_sha256: str


@dataclass
class SessionDataset:
    """Runs of one or more subjects/sessions, in memory or backed by a directory."""

    config: GeneratorConfig
    entries: list[RunEntry] = field(default_factory=list)
    root: Path | None = None
    _runs: dict = field(default_factory=dict, repr=False)

    @property
    def subjects(self) -> list[int]:
        return sorted({e.subject for e in self.entries})

    def sessions(self, subject: int | None = None) -> list[int]:
        return sorted({e.session for e in self.entries if subject is None or e.subject == subject})

    def entry(self, subject, session, run) -> RunEntry:
        for e in self.entries:
            if (e.subject, e.session, e.run) == (subject, session, run):
                return e
        raise KeyError((subject, session, run))

    def get_run(self, subject: int, session: int, run: int) -> RawRun:
        key = (subject, session, run)
        if key in self._runs:
            return self._runs[key]
        if self.root is None:
            raise KeyError(key)
        e = self.entry(*key)
        sig_path, ev_path = self.root / e.signal, self.root / e.events
        sig, ev = _read_checked(sig_path, e.signal_sha256), _read_checked(ev_path, e.events_sha256)
        data, fs = decode_raw(sig, str(sig_path))
        return RawRun(data, fs, decode_events(ev, str(ev_path)), e.subject, e.session, e.run, e.target_item)

    def iter_runs(self, subjects=None, sessions=None) -> Iterator[RawRun]:
        for e in self.entries:
            if subjects is not None and e.subject not in subjects:
                continue
            if sessions is not None and e.session not in sessions:
                continue
            yield self.get_run(e.subject, e.session, e.run)

    def add_run(self, run: RawRun) -> RunEntry:
        rel = run_relpath(run.subject, run.session, run.run)
        e = RunEntry(
            run.subject, run.session, run.run, run.target_item, run.n_blocks,
            rel + ".eeg", rel + ".events.csv", _sha(encode_raw(run)), _sha(encode_events(run.events)),
        )
        self.entries.append(e)
        self._runs[(run.subject, run.session, run.run)] = run
        return e

    @property
    def dataset_hash(self) -> str:
        h = hashlib.sha256(self.config.hash().encode())
        for e in sorted(self.entries, key=lambda e: (e.subject, e.session, e.run)):
            h.update(f"{e.signal}:{e.signal_sha256};{e.events}:{e.events_sha256};".encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "channels": list(CHANNELS),
            "runs": [asdict(e) for e in sorted(self.entries, key=lambda e: (e.subject, e.session, e.run))],
            "dataset_hash": self.dataset_hash,
        }


def _read_checked(path: Path, sha: str) -> bytes:
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"{path}: missing file") from None
    if _sha(buf) != sha:
        # decode first so structural problems get the more specific message
        if path.suffix == ".eeg":
            decode_raw(buf, str(path))
        raise DatasetError(f"{path}: content hash does not match manifest")
    return buf


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _write_manifest(ds: SessionDataset, out: Path) -> None:
    (out / "manifest.json").write_text(json.dumps(ds.manifest(), indent=1, sort_keys=True) + "\n")


def generate_dataset(
    cfg: GeneratorConfig, out: str | Path | None = None, progress: Callable[[RawRun], None] | None = None
) -> SessionDataset:
    """Generate every run; with ``out`` the runs are streamed to disk instead of kept in memory."""
    ds = SessionDataset(cfg, root=Path(out) if out is not None else None)
    for subject in range(1, cfg.subjects + 1):
        for session in range(1, cfg.sessions + 1):
            for run_id in range(1, cfg.runs_per_session + 1):
                run = generate_run(cfg, subject, session, run_id)
                e = ds.add_run(run)
                if out is not None:
                    _write(ds.root / e.signal, encode_raw(run))
                    _write(ds.root / e.events, encode_events(run.events))
                    ds._runs.clear()
                if progress is not None:
                    progress(run)
    if out is not None:
        _write_manifest(ds, ds.root)
    return ds


def save_dataset(ds: SessionDataset, out: str | Path) -> Path:
    out = Path(out)
    for e in ds.entries:
        run = ds.get_run(e.subject, e.session, e.run)
        _write(out / e.signal, encode_raw(run))
        _write(out / e.events, encode_events(run.events))
    _write_manifest(ds, out)
    return out


def load_dataset(path: str | Path, verify: bool = True) -> SessionDataset:
    """Open a dataset directory; with ``verify`` every file is checked against the manifest."""
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        man = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{mpath}: missing manifest") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: unreadable manifest ({exc})") from None
    if man.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: unknown format version {man.get('format_version')}")
    cfg = GeneratorConfig.from_dict(man["config"])
    if cfg.hash() != man.get("config_hash"):
        raise DatasetError(f"{mpath}: config hash mismatch")
    ds = SessionDataset(cfg, [RunEntry(**r) for r in man["runs"]], root)
    if ds.dataset_hash != man.get("dataset_hash"):
        raise DatasetError(f"{mpath}: dataset hash mismatch")
    if verify:
        for e in ds.entries:
            decode_raw(_read_checked(root / e.signal, e.signal_sha256), str(root / e.signal))
            _read_checked(root / e.events, e.events_sha256)
    return ds
