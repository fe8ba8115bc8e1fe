"""Signal conditioning: IIR filter design, decimation, winsorization, epoching.

Default pipeline for one run recorded at 2400 Hz::

    notch (60 Hz) -> Butterworth bandpass 1-15 Hz -> keep every 20th sample
    -> winsorize 10/90 per channel -> cut 1000 ms epochs at each flash
    -> z-score with training-split statistics

Filtering happens before decimation so the bandpass doubles as the
anti-aliasing filter. ``order="decimate-first"`` decimates first instead.

Filters are designed here (analog prototype, frequency transform, prewarped
bilinear map, second-order sections); applying them is delegated to
``scipy.signal.sosfilt`` / ``sosfiltfilt``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps

from .records import EpochSet, RawRun

log = logging.getLogger(__name__)

STABILITY_MARGIN = 1e-6


@dataclass
class BiquadCascade:
    """Second-order sections, one row (b0, b1, b2, a1, a2) each (a0 = 1)."""

    sections: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sections = np.atleast_2d(np.asarray(self.sections, dtype=float))
        if self.sections.shape[1] != 5:
            raise ValueError(f"sections must be (n, 5), got {self.sections.shape}")

    @property
    def sos(self) -> np.ndarray:
        """scipy layout (b0, b1, b2, 1, a1, a2)."""
        s = self.sections
        return np.column_stack([s[:, :3], np.ones(len(s)), s[:, 3:]])

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:]])

    def is_stable(self, margin: float = STABILITY_MARGIN) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def response(self, freqs, fs: float) -> np.ndarray:
        """Complex frequency response H(e^{jw}) at ``freqs`` (Hz)."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs, dtype=float) / fs)
        zi = 1.0 / z
        h = np.ones_like(z)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * zi + b2 * zi**2) / (1.0 + a1 * zi + a2 * zi**2)
        return h

    @classmethod
    def identity(cls) -> "BiquadCascade":
        return cls(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]]), {"type": "identity"})


def _check_stable(c: BiquadCascade) -> BiquadCascade:
    if not c.is_stable():
        raise ValueError(f"designed filter is unstable: max |pole| = {np.abs(c.poles()).max():.9f}")
    return c


def design_butterworth_bandpass(order: int = 6, f_lo: float = 1.0, f_hi: float = 15.0, fs: float = 2400.0):
    """Butterworth bandpass with ``order`` poles in total (prototype order ``order // 2``)."""
    if order < 2 or order % 2:
        raise ValueError(f"bandpass order must be a positive even number, got {order}")
    if not 0 < f_lo < f_hi:
        raise ValueError(f"need 0 < f_lo < f_hi, got {f_lo}, {f_hi}")
    if f_hi >= fs / 2:
        raise ValueError(f"corner {f_hi} Hz is at or above Nyquist ({fs / 2} Hz)")
    n = order // 2
    fs2 = 2.0 * fs
    # prewarped analog corners
    w_lo = fs2 * np.tan(np.pi * f_lo / fs)
    w_hi = fs2 * np.tan(np.pi * f_hi / fs)
    bw, w0sq = w_hi - w_lo, w_lo * w_hi
    # unit-cutoff prototype poles in the left half plane
    k = np.arange(1, n + 1)
    proto = np.exp(1j * np.pi * (2 * k + n - 1) / (2 * n))
    # lowpass -> bandpass: every prototype pole splits in two
    pb = proto * bw / 2
    disc = np.sqrt(pb**2 - w0sq + 0j)
    analog = np.concatenate([pb + disc, pb - disc])
    # bilinear map; the n zeros at s = 0 land on z = 1, the n at infinity on z = -1
    digital = (fs2 + analog) / (fs2 - analog)
    gain = np.real(bw**n * fs2**n / np.prod(fs2 - analog))
    sections = []
    for p1, p2 in _pair_poles(digital):
        a1 = -np.real(p1 + p2)
        a2 = np.real(p1 * p2)
        sections.append([1.0, 0.0, -1.0, a1, a2])
    sections = np.array(sections)
    g = abs(gain) ** (1.0 / n)
    sections[:, :3] *= g
    if gain < 0:
        sections[0, :3] *= -1
    meta = {"type": "butterworth-bandpass", "order": order, "f_lo": f_lo, "f_hi": f_hi, "fs": fs}
    return _check_stable(BiquadCascade(sections, meta))


def _pair_poles(poles: np.ndarray, tol: float = 1e-9) -> list[tuple[complex, complex]]:
    """Group poles into conjugate pairs; leftover real poles are paired with each other."""
    upper = sorted((p for p in poles if p.imag > tol), key=lambda p: abs(p))
    real = sorted((p.real for p in poles if abs(p.imag) <= tol))
    pairs = [(p, np.conj(p)) for p in upper]
    if len(real) % 2:
        raise ValueError("odd number of real poles cannot form biquads")
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return pairs


def design_notch(f0: float = 60.0, Q: float = 30.0, fs: float = 2400.0) -> BiquadCascade:
    """Second-order IIR notch at ``f0`` with -3 dB bandwidth ``f0 / Q``."""
    if not 0 < f0 < fs / 2:
        raise ValueError(f"notch frequency {f0} Hz must lie in (0, {fs / 2}) Hz")
    if Q <= 0:
        raise ValueError(f"Q must be positive, got {Q}")
    w0 = 2 * np.pi * f0 / fs
    beta = np.tan(w0 / Q / 2)
    g = 1.0 / (1.0 + beta)
    c = np.cos(w0)
    sec = [[g, -2 * g * c, g, -2 * g * c, 2 * g - 1]]
    return _check_stable(BiquadCascade(np.array(sec), {"type": "notch", "f0": f0, "Q": Q, "fs": fs}))


def chain(*cascades: BiquadCascade) -> BiquadCascade:
    return BiquadCascade(np.concatenate([c.sections for c in cascades]), {"type": "chain"})


def filter_apply(cascade: BiquadCascade, x, mode: str = "causal", zi=None, axis: int = -1):
    """Filter along ``axis``.

    ``causal`` runs each section as a direct-form II transposed recursion.
    Passing ``zi`` (as returned by :func:`initial_state`) returns
    ``(y, zf)`` so a signal can be processed chunk by chunk.
    ``zero_phase`` filters forwards then backwards.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("filter_apply: signal contains non-finite values")
    if mode == "causal":
        if zi is None:
            return sps.sosfilt(cascade.sos, x, axis=axis)
        return sps.sosfilt(cascade.sos, x, axis=axis, zi=zi)
    if mode == "zero_phase":
        if zi is not None:
            raise ValueError("zero-phase filtering is not streamable")
        return sps.sosfiltfilt(cascade.sos, x, axis=axis)
    raise ValueError(f"mode must be 'causal' or 'zero_phase', got {mode!r}")


def initial_state(cascade: BiquadCascade, shape_other: tuple = ()) -> np.ndarray:
    """Zero filter state for signals whose non-time axes are ``shape_other`` (time last)."""
    return np.zeros((len(cascade.sections), *shape_other, 2))


def decimate(x, factor: int = 20, axis: int = -1) -> np.ndarray:
    """Keep every ``factor``-th sample, dropping any trailing partial frame.

    No filtering happens here; the caller is responsible for band-limiting
    (the default pipeline filters first).
    """
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    x = np.asarray(x)
    usable = (x.shape[axis] // factor) * factor
    if usable == 0:
        raise ValueError(f"signal of {x.shape[axis]} samples is shorter than factor {factor}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, usable, factor)
    return x[tuple(sl)]


def winsorize(x, p_lo: float = 10.0, p_hi: float = 90.0) -> np.ndarray:
    """Clip each channel (row) to its own [p_lo, p_hi] percentiles.

    The limits are taken as sample values (the lower-rank sample for the
    floor, the higher-rank one for the ceiling) rather than interpolated,
    which makes a second pass a no-op.
    """
    if not 0 <= p_lo <= p_hi <= 100:
        raise ValueError(f"need 0 <= p_lo <= p_hi <= 100, got {p_lo}, {p_hi}")
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    lo = np.percentile(x2, p_lo, axis=-1, keepdims=True, method="lower")
    hi = np.percentile(x2, p_hi, axis=-1, keepdims=True, method="higher")
    out = np.clip(x2, lo, hi)
    return out[0] if squeeze else out


# ---------------------------------------------------------------- pipeline


@dataclass
class PreprocessConfig:
    notch_hz: float | None = 60.0
    notch_q: float = 30.0
    f_lo: float = 1.0
    f_hi: float = 15.0
    bandpass_order: int = 6
    factor: int = 20
    win_lo: float = 10.0
    win_hi: float = 90.0
    window_ms: float = 1000.0
    filter_mode: str = "causal"
    order: str = "filter-first"  # or "decimate-first"

    def to_dict(self) -> dict:
        return asdict(self)


def condition_run(run: RawRun, cfg: PreprocessConfig) -> tuple[np.ndarray, float, list[str]]:
    """Filter, decimate and winsorize one run.

    Returns the conditioned (channels, time) signal, its sampling rate and
    the ordered list of steps applied.
    """
    x = np.asarray(run.samples, dtype=float)
    fs = float(run.fs)
    steps: list[str] = []
    if cfg.order not in ("filter-first", "decimate-first"):
        raise ValueError(f"order must be 'filter-first' or 'decimate-first', got {cfg.order!r}")

    def _filter(x, fs):
        stages = []
        if cfg.notch_hz:
            if cfg.notch_hz < fs / 2:
                stages.append(design_notch(cfg.notch_hz, cfg.notch_q, fs))
                steps.append(f"notch {cfg.notch_hz:g} Hz Q={cfg.notch_q:g} @ {fs:g} Hz")
            else:
                log.info("notch at %g Hz skipped: at or above Nyquist for fs=%g", cfg.notch_hz, fs)
                steps.append(f"notch skipped @ {fs:g} Hz")
        stages.append(design_butterworth_bandpass(cfg.bandpass_order, cfg.f_lo, cfg.f_hi, fs))
        steps.append(f"bandpass {cfg.f_lo:g}-{cfg.f_hi:g} Hz order {cfg.bandpass_order} ({cfg.filter_mode}) @ {fs:g} Hz")
        return filter_apply(chain(*stages), x, cfg.filter_mode)

    if cfg.order == "filter-first":
        x = _filter(x, fs)
        x = decimate(x, cfg.factor)
        steps.append(f"decimate x{cfg.factor}")
        fs = fs / cfg.factor
    else:
        x = decimate(x, cfg.factor)
        steps.append(f"decimate x{cfg.factor}")
        fs = fs / cfg.factor
        x = _filter(x, fs)
    x = winsorize(x, cfg.win_lo, cfg.win_hi)
    steps.append(f"winsorize {cfg.win_lo:g}/{cfg.win_hi:g}")
    return x, fs, steps


def extract_epochs(
    signal: np.ndarray,
    fs: float,
    run: RawRun,
    window_ms: float = 1000.0,
    source_fs: float | None = None,
) -> EpochSet:
    """Cut ``[onset, onset + window)`` after every flash of ``run``.

    Onsets are given in the run's own sampling rate (``source_fs``, default
    ``run.fs``) and mapped onto ``fs``. Windows running past the end of the
    signal are dropped and counted in ``EpochSet.dropped``.
    """
    source_fs = float(run.fs if source_fs is None else source_fs)
    W = int(round(window_ms * fs / 1000.0))
    if W < 1:
        raise ValueError(f"window of {window_ms} ms is shorter than one sample at {fs} Hz")
    ev = run.event_arrays()
    onsets = np.floor(ev["onset"] * (fs / source_fs) + 1e-9).astype(np.int64)
    keep = onsets + W <= signal.shape[1]
    dropped = int((~keep).sum())
    if dropped:
        log.warning("run s%d/%d/%d: %d epochs dropped (window past end of signal)", run.subject, run.session, run.run, dropped)
    onsets = onsets[keep]
    idx = onsets[:, None] + np.arange(W)[None, :]
    data = signal[:, idx].transpose(1, 0, 2) if len(onsets) else np.zeros((0, signal.shape[0], W))
    n = len(onsets)
    return EpochSet(
        data=np.ascontiguousarray(data, dtype=float),
        label=ev["target"][keep].astype(np.int64),
        item=ev["item"][keep],
        block=ev["block"][keep],
        run=np.full(n, run.run, dtype=np.int64),
        session=np.full(n, run.session, dtype=np.int64),
        subject=np.full(n, run.subject, dtype=np.int64),
        dropped=dropped,
    )


def preprocess_run(run: RawRun, cfg: PreprocessConfig | None = None) -> EpochSet:
    """Full deterministic conditioning of one run into unstandardized epochs."""
    cfg = cfg or PreprocessConfig()
    x, fs, steps = condition_run(run, cfg)
    eps = extract_epochs(x, fs, run, cfg.window_ms)
    eps.meta["steps"] = steps
    return eps


@dataclass
class Standardizer:
    """Per-channel z-scoring with statistics from the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, train: EpochSet | np.ndarray) -> "Standardizer":
        data = train.data if isinstance(train, EpochSet) else np.asarray(train)
        if len(data) == 0:
            raise ValueError("cannot fit standardization on an empty training split")
        mean = data.mean(axis=(0, 2))
        std = data.std(axis=(0, 2))
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean[:, None]) / self.std[:, None]


def standardize(epochs: EpochSet, stats: Standardizer) -> EpochSet:
    out = epochs.take(np.arange(len(epochs)))
    out.data = stats.apply(epochs.data)
    out.dropped = epochs.dropped
    return out
