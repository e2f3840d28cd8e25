"""Clinical encoding, EEG summary statistics and signal-availability flags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError
from .ingest import TTM, ClinicalRecord, PatientRecord, Sex

CLINICAL_NAMES = (
    "age", "age_missing", "sex_male", "sex_missing", "rosc", "rosc_missing",
    "ohca", "ohca_missing", "shockable", "shockable_missing",
    "ttm_33", "ttm_36", "ttm_none",
)

BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
}
METRICS = ("delta", "theta", "alpha", "beta", "alpha_delta_ratio", "total_power",
           "sd", "line_length", "spectral_entropy")
SUMMARY_NAMES = tuple(f"eeg_{m}_{agg}" for agg in ("mean", "sd") for m in METRICS)
FLAG_NAMES = ("has_eeg", "n_hours_available", "n_channels_available",
              "earliest_hour", "latest_hour")

WELCH_SECONDS = 4.0


@dataclass(frozen=True)
class ImputationStats:
    """Medians from a training fold used to fill absent clinical values."""

    age: float
    rosc: float
    sex_male: float = 0.0
    ohca: float = 0.0
    shockable: float = 0.0

    @classmethod
    def fit(cls, records: Sequence) -> "ImputationStats":
        clin = [r.clinical if isinstance(r, PatientRecord) else r for r in records]

        def med(vals, default=0.0):
            vals = [float(v) for v in vals if v is not None]
            return float(np.median(vals)) if vals else default

        return cls(
            age=med(c.age for c in clin),
            rosc=med(c.rosc_minutes for c in clin),
            sex_male=med(None if c.sex is None else c.sex is Sex.MALE for c in clin),
            ohca=med(c.ohca for c in clin),
            shockable=med(c.shockable_rhythm for c in clin),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ImputationStats":
        missing = {"age", "rosc"} - set(d)
        if missing:
            raise ConfigError(f"imputation statistics missing {sorted(missing)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True, eq=False)
class EncodedClinical:
    values: np.ndarray
    names: tuple = CLINICAL_NAMES
    missing_flags: np.ndarray = field(default=None)


def encode_clinical(rec: ClinicalRecord, imputation) -> EncodedClinical:
    if isinstance(rec, PatientRecord):
        rec = rec.clinical
    if isinstance(imputation, dict):
        imputation = ImputationStats.from_dict(imputation)
    if imputation is None or imputation.age is None or imputation.rosc is None:
        raise ConfigError("imputation statistics are required for age and ROSC")

    def num(v, fill):
        return (fill, 1.0) if v is None else (float(v), 0.0)

    age = num(rec.age, imputation.age)
    sex = num(None if rec.sex is None else rec.sex is Sex.MALE, imputation.sex_male)
    rosc = num(rec.rosc_minutes, imputation.rosc)
    ohca = num(rec.ohca, imputation.ohca)
    shock = num(rec.shockable_rhythm, imputation.shockable)
    ttm = [float(rec.ttm is TTM.T33), float(rec.ttm is TTM.T36), float(rec.ttm is TTM.NONE)]
    values = np.array([*age, *sex, *rosc, *ohca, *shock, *ttm])
    flags = np.array([age[1], sex[1], rosc[1], ohca[1], shock[1]], dtype=bool)
    return EncodedClinical(values, CLINICAL_NAMES, flags)


@dataclass(frozen=True)
class SignalFlags:
    has_eeg: bool
    n_hours_available: int
    n_channels_available: int
    earliest_hour: int
    latest_hour: int

    def as_vector(self) -> np.ndarray:
        return np.array([float(self.has_eeg), self.n_hours_available,
                         self.n_channels_available, self.earliest_hour,
                         self.latest_hour], dtype=float)


def signal_flags(rec: PatientRecord) -> SignalFlags:
    hours = [s.hour for s in rec.segments]
    if not hours:
        return SignalFlags(False, 0, 0, -1, -1)
    channels = {c for s in rec.segments for c in s.channels}
    return SignalFlags(True, len(set(hours)), len(channels), min(hours), max(hours))


@dataclass(frozen=True, eq=False)
class EegSummary:
    per_pair: np.ndarray  # [n_pairs, len(METRICS)]
    values: np.ndarray  # means then SDs, aligned with SUMMARY_NAMES
    has_data: bool
    names: tuple = SUMMARY_NAMES

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))


def channel_metrics(x: np.ndarray, fs: float) -> np.ndarray:
    """Summary metrics for each row of ``x`` -> [n_channels, len(METRICS)]."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[1]
    nperseg = min(int(round(WELCH_SECONDS * fs)), n)
    freqs, psd = signal.welch(x, fs=fs, window="hann", nperseg=nperseg,
                              noverlap=nperseg // 2, axis=-1)
    df = freqs[1] - freqs[0] if freqs.size > 1 else fs
    out = np.zeros((x.shape[0], len(METRICS)))
    for i, (lo, hi) in enumerate(BANDS.values()):
        upper = freqs <= hi if hi == BANDS["beta"][1] else freqs < hi
        out[:, i] = psd[:, (freqs >= lo) & upper].sum(axis=1) * df
    delta, alpha = out[:, 0], out[:, 2]
    out[:, 4] = np.divide(alpha, delta, out=np.zeros_like(alpha), where=delta > 0)
    out[:, 5] = psd.sum(axis=1) * df
    out[:, 6] = x.std(axis=1)
    out[:, 7] = np.abs(np.diff(x, axis=1)).mean(axis=1) if n > 1 else 0.0
    band = (freqs >= BANDS["delta"][0]) & (freqs <= BANDS["beta"][1])
    p = psd[:, band]
    tot = p.sum(axis=1, keepdims=True)
    p = np.divide(p, tot, out=np.zeros_like(p), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
    out[:, 8] = -(p * logp).sum(axis=1)
    return out


def eeg_summary(segments: Sequence, channels: Sequence[str] | None = None) -> EegSummary:
    """Aggregate per-(hour, channel) metrics into per-patient mean and SD.

    ``channels`` restricts which channels count; by default all present ones.
    """
    rows = []
    for seg in segments:
        if channels is None:
            x = seg.samples
        else:
            keep = [i for i, c in enumerate(seg.channels) if c in set(channels)]
            if not keep:
                continue
            x = seg.samples[keep]
        rows.append(channel_metrics(x, seg.fs))
    if not rows:
        return EegSummary(np.zeros((0, len(METRICS))), np.zeros(len(SUMMARY_NAMES)), False)
    per_pair = np.vstack(rows)
    values = np.concatenate([per_pair.mean(axis=0), per_pair.std(axis=0)])
    return EegSummary(per_pair, values, True)
