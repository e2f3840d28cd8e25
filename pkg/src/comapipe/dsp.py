"""EEG filtering, resampling and clean-window selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError
from .ingest import EegSegment

log = logging.getLogger(__name__)

# Artifact score weights: total = clip + flat + 0.5 * amplitude.
CLIP_WEIGHT = 1.0
FLAT_WEIGHT = 1.0
AMPLITUDE_WEIGHT = 0.5
RAIL_FRACTION = 0.01
FLAT_SD_UV = 0.1
HIGH_SD_UV = 500.0
# Window scores closer than this to the minimum count as tied.
TIE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class FilterSpec:
    band_low: float = 0.5
    band_high: float = 30.0
    notch_freqs: tuple = (50.0, 60.0)
    order: int = 4
    notch_q: float = 30.0


@dataclass(frozen=True)
class ArtifactScore:
    window_start: int
    window_len: int
    clip_frac: float
    flat_frac: float
    amplitude_penalty: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "total",
            CLIP_WEIGHT * self.clip_frac
            + FLAT_WEIGHT * self.flat_frac
            + AMPLITUDE_WEIGHT * self.amplitude_penalty,
        )


def design_filter(spec: FilterSpec, fs: float):
    """Return second-order sections for band-pass + notches, and skipped notches."""
    nyq = fs / 2.0
    if not 0 < spec.band_low < spec.band_high:
        raise ConfigError(f"invalid band {spec.band_low}-{spec.band_high} Hz")
    if spec.band_high >= nyq:
        raise ConfigError(
            f"fs={fs} Hz too low for a {spec.band_high} Hz band edge (need fs > {2 * spec.band_high})"
        )
    if spec.order < 1:
        raise ConfigError("filter order must be positive")
    sos = [signal.butter(spec.order, [spec.band_low, spec.band_high],
                         btype="bandpass", fs=fs, output="sos")]
    skipped = []
    for f0 in spec.notch_freqs:
        if f0 >= nyq:
            skipped.append(f0)
            continue
        b, a = signal.iirnotch(f0, spec.notch_q, fs=fs)
        sos.append(signal.tf2sos(b, a))
    return np.vstack(sos), skipped


def bandpass_notch(seg: EegSegment, spec: FilterSpec = FilterSpec()) -> EegSegment:
    """Zero-phase (forward-backward) band-pass plus notch filtering per channel."""
    x = seg.samples
    if not np.all(np.isfinite(x)):
        raise DataError("segment contains NaN or infinite samples")
    sos, skipped = design_filter(spec, seg.fs)
    for f0 in skipped:
        log.warning("notch at %g Hz skipped: at or above Nyquist for fs=%g", f0, seg.fs)
    if seg.n_samples <= 3 * spec.order:
        raise ConfigError(
            f"segment of {seg.n_samples} samples too short for order-{spec.order} filtering"
        )
    padlen = min(3 * (2 * spec.order + 1), seg.n_samples - 1)
    y = signal.sosfiltfilt(sos, x, axis=-1, padtype="odd", padlen=padlen)
    return seg.replace(y)


def resample(seg: EegSegment, fs_target: float) -> EegSegment:
    """Resample to ``fs_target``; polyphase when the ratio is rational."""
    if not fs_target > 0:
        raise ValueError(f"target sampling rate must be > 0, got {fs_target}")
    if fs_target == seg.fs:
        return seg
    ratio = Fraction(fs_target / seg.fs).limit_denominator(1000)
    n_out = int(round(seg.n_samples * fs_target / seg.fs))
    if abs(float(ratio) - fs_target / seg.fs) <= 1e-9 * fs_target / seg.fs:
        y = signal.resample_poly(seg.samples, ratio.numerator, ratio.denominator, axis=-1)
        y = y[:, :n_out] if y.shape[1] > n_out else y
    else:
        y = signal.resample(seg.samples, max(n_out, 1), axis=-1)
    return seg.replace(y, fs=fs_target)


def _window_starts(n: int, win: int, stride: int) -> np.ndarray:
    return np.arange(0, n - win + 1, stride, dtype=np.int64)


def score_windows(seg: EegSegment, window_s: float, stride_s: float) -> list:
    """Artifact score for every candidate window, in start order."""
    fs = seg.fs
    win = int(round(window_s * fs))
    stride = max(int(round(stride_s * fs)), 1)
    n = seg.n_samples
    if win < 1:
        raise ValueError("window must span at least one sample")
    if n < win:
        raise DataError(
            f"recording of {seg.duration:.1f} s is shorter than the {window_s} s "
            "artifact window; shorten the window or skip this segment"
        )
    x = seg.samples
    starts = _window_starts(n, win, stride)

    lo = x.min(axis=1, keepdims=True)
    hi = x.max(axis=1, keepdims=True)
    span = hi - lo
    tol = RAIL_FRACTION * span
    rail = ((x >= hi - tol) | (x <= lo + tol)) & (span > 0)
    rail_cum = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(rail, axis=1)], axis=1)
    clip = (rail_cum[:, starts + win] - rail_cum[:, starts]) / win  # [ch, windows]

    block = max(int(round(fs)), 1)
    n_blocks = win // block
    if n_blocks >= 1:
        xc = x - x.mean(axis=1, keepdims=True)
        c1 = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(xc, axis=1)], axis=1)
        c2 = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(xc * xc, axis=1)], axis=1)
        b0 = starts[:, None] + block * np.arange(n_blocks)[None, :]  # [windows, blocks]
        s1 = c1[:, b0 + block] - c1[:, b0]
        s2 = c2[:, b0 + block] - c2[:, b0]
        var = np.maximum(s2 / block - (s1 / block) ** 2, 0.0)
        sd = np.sqrt(var)  # [ch, windows, blocks]
        flat = (sd < FLAT_SD_UV).mean(axis=2)
        loud = (sd > HIGH_SD_UV).mean(axis=2)
    else:
        flat = np.zeros_like(clip)
        loud = np.zeros_like(clip)

    clip_m, flat_m, loud_m = clip.mean(axis=0), flat.mean(axis=0), loud.mean(axis=0)
    return [
        ArtifactScore(int(s), win, float(c), float(f), float(a))
        for s, c, f, a in zip(starts, clip_m, flat_m, loud_m)
    ]


def select_cleanest(seg: EegSegment, window_s: float = 300.0, stride_s: float = 10.0):
    """Return the window with the lowest artifact score and that score.

    Scores within ``TIE_TOLERANCE`` of the minimum are tied; the earliest
    tied window wins. The returned samples are an unmodified slice.
    """
    scores = score_windows(seg, window_s, stride_s)
    totals = np.array([s.total for s in scores])
    best = scores[int(np.flatnonzero(totals <= totals.min() + TIE_TOLERANCE)[0])]
    window = seg.samples[:, best.window_start:best.window_start + best.window_len]
    return seg.replace(window), best


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Truncate or zero-pad the last axis to exactly ``n`` samples."""
    if x.shape[-1] >= n:
        return x[..., :n]
    pad = [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])]
    return np.pad(x, pad)
