"""Synthetic cohort generator with a planted EEG signal.

Clinical fields follow fixed cohort marginals (counts are allocated exactly
and then shuffled) and are independent of outcome. EEG is coloured noise
plus an alpha rhythm; Poor patients get attenuated alpha and suppression
epochs, both scaled by ``effect_size`` (0 means no signal at all).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal, stats

from .config import CANONICAL_CHANNELS, PipelineConfig, save_config, CONFIG_FILENAME
from .ingest import TTM, ClinicalRecord, EegSegment, Outcome, PatientRecord, Sex, write_patient
from .io import write_csv

# Marginals of the reference training cohort (607 patients).
REFERENCE_N = 607
AGE_MEAN, AGE_SD, AGE_MISSING = 61.0, 16.0, 1
ROSC_MEAN, ROSC_SD, ROSC_MISSING = 23.0, 19.0, 304
SEX_MALE = 417
OHCA_TRUE, OHCA_MISSING = 442, 41
SHOCK_TRUE, SHOCK_MISSING = 297, 32
TTM_COUNTS = {TTM.T33: 448, TTM.T36: 61, TTM.NONE: 98}
POOR_FRACTION = 0.52


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    seed: int = 0
    effect_size: float = 1.0
    eeg: bool = True
    fs: float = 256.0
    duration_s: float = 80.0
    min_hours: int = 1
    max_hours: int = 3
    channels: tuple = CANONICAL_CHANNELS
    poor_fraction: float = POOR_FRACTION
    no_eeg_fraction: float = 0.02
    artifact_prob: float = 0.3


def benchmark_config(**run) -> PipelineConfig:
    """Pipeline settings sized for synthetic recordings (short windows, fewer kernels)."""
    cfg = PipelineConfig()
    cfg = cfg.override("dsp", window_s=60.0, stride_s=5.0)
    cfg = cfg.override("rocket", n_kernels=1000)
    cfg = cfg.override("learners", n_trees=200)
    return cfg.override("run", **run) if run else cfg


def _allocate(n: int, counts: list) -> list:
    """Scale reference counts to ``n`` by largest remainder."""
    total = sum(counts)
    raw = [c * n / total for c in counts]
    out = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (out[i] - raw[i], i))
    for i in order[: n - sum(out)]:
        out[i] += 1
    return out


def _assign(rng, n: int, categories: list, counts: list) -> list:
    values = [c for c, k in zip(categories, _allocate(n, counts)) for _ in range(k)]
    return [values[i] for i in rng.permutation(n)]


def _calibrated(rng, n: int, mean: float, sd: float, dist=None) -> np.ndarray:
    """``n`` draws whose sample mean and SD match exactly."""
    if n == 0:
        return np.zeros(0)
    q = (np.arange(n) + 0.5) / n
    base = stats.norm.ppf(q) if dist is None else dist.ppf(q)
    base = base[rng.permutation(n)]
    if n > 1:
        base = (base - base.mean()) / base.std(ddof=1)
    return mean + sd * base


def synth_clinical(n: int, seed: int, poor_fraction: float = POOR_FRACTION) -> list:
    rng = np.random.Generator(np.random.Philox(int(seed)))
    age_missing = _assign(rng, n, [True, False], [AGE_MISSING, REFERENCE_N - AGE_MISSING])
    ages = iter(np.clip(np.round(_calibrated(rng, n - sum(age_missing), AGE_MEAN, AGE_SD)),
                        18, 100))
    rosc_missing = _assign(rng, n, [True, False], [ROSC_MISSING, REFERENCE_N - ROSC_MISSING])
    shape = (ROSC_MEAN / ROSC_SD) ** 2
    roscs = iter(np.maximum(np.round(_calibrated(
        rng, n - sum(rosc_missing), ROSC_MEAN, ROSC_SD, stats.gamma(shape))), 0))
    sex = _assign(rng, n, [Sex.MALE, Sex.FEMALE], [SEX_MALE, REFERENCE_N - SEX_MALE])
    ohca = _assign(rng, n, [True, False, None],
                   [OHCA_TRUE, REFERENCE_N - OHCA_TRUE - OHCA_MISSING, OHCA_MISSING])
    shock = _assign(rng, n, [True, False, None],
                    [SHOCK_TRUE, REFERENCE_N - SHOCK_TRUE - SHOCK_MISSING, SHOCK_MISSING])
    ttm = _assign(rng, n, list(TTM_COUNTS), list(TTM_COUNTS.values()))
    n_poor = int(round(poor_fraction * n))
    poor = _assign(rng, n, [True, False], [n_poor, n - n_poor])
    out = []
    for i in range(n):
        cpc = int(rng.integers(3, 6)) if poor[i] else int(rng.integers(1, 3))
        out.append(ClinicalRecord(
            patient_id=f"{i + 1:04d}",
            age=None if age_missing[i] else float(next(ages)),
            sex=sex[i],
            rosc_minutes=None if rosc_missing[i] else float(next(roscs)),
            ohca=ohca[i],
            shockable_rhythm=shock[i],
            ttm=ttm[i],
            cpc=cpc,
        ))
    return out


def _patient_eeg(rng, poor: bool, cfg: SynthConfig) -> list:
    if rng.random() < cfg.no_eeg_fraction:
        return []
    effect = cfg.effect_size if poor else 0.0
    n_hours = int(rng.integers(cfg.min_hours, cfg.max_hours + 1))
    hours = np.sort(rng.choice(np.arange(6, 73), n_hours, replace=False))
    channels = list(cfg.channels)
    if rng.random() < 0.05:
        drop = rng.choice(len(channels), int(rng.integers(1, 4)), replace=False)
        channels = [c for i, c in enumerate(channels) if i not in set(drop)]
    alpha_f = rng.uniform(8.5, 11.5)
    alpha_amp = 12.0 * np.exp(rng.normal(0, 0.35)) * (1.0 - 0.6 * effect)
    bg_amp = 15.0 * np.exp(rng.normal(0, 0.25))
    suppressed_frac = 0.4 * effect
    n = int(round(cfg.duration_s * cfg.fs))
    t = np.arange(n) / cfg.fs
    segs = []
    for hour in hours:
        x = np.empty((len(channels), n))
        envelope = np.ones(n)
        if suppressed_frac > 0:
            covered = 0
            while covered < suppressed_frac * n:
                length = int(rng.uniform(1.0, 3.0) * cfg.fs)
                start = int(rng.integers(0, max(n - length, 1)))
                envelope[start:start + length] = 0.15
                covered += length
        mod = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.05, 0.2) * t)
        line_f = 60.0 if rng.random() < 0.5 else 50.0
        for c in range(len(channels)):
            bg = signal.lfilter([1.0], [1.0, -0.95], rng.standard_normal(n))
            bg *= bg_amp / bg.std()
            alpha = alpha_amp * mod * np.sin(2 * np.pi * alpha_f * t + rng.uniform(0, 2 * np.pi))
            x[c] = envelope * (bg + alpha) + 5.0 * np.sin(2 * np.pi * line_f * t)
        if rng.random() < cfg.artifact_prob:
            length = int(5 * cfg.fs)
            start = int(rng.integers(0, n - length))
            rail = np.where(rng.random(len(channels)) < 0.5, -300.0, 300.0)
            x[:, start:start + length] = rail[:, None]
        segs.append(EegSegment(tuple(channels), cfg.fs, int(hour), x.astype(np.float32)))
    return segs


def synth_cohort(cfg: SynthConfig) -> list:
    if cfg.n_patients < 20:
        raise ValueError(f"synthetic cohort needs at least 20 patients, got {cfg.n_patients}")
    clinical = synth_clinical(cfg.n_patients, cfg.seed, cfg.poor_fraction)
    rng = np.random.Generator(np.random.Philox(int(cfg.seed) + 1))
    records = []
    for rec in clinical:
        segs = _patient_eeg(rng, rec.outcome is Outcome.POOR, cfg) if cfg.eeg else []
        records.append(PatientRecord(rec, tuple(segs)))
    return records


def cmd_synth(out_dir, n_patients: int = 200, seed: int = 0, effect_size: float = 1.0,
              eeg: bool = True, **kwargs) -> Path:
    """Write a synthetic data root with ground truth and a matching config."""
    cfg = SynthConfig(n_patients=n_patients, seed=seed, effect_size=effect_size, eeg=eeg,
                      **kwargs)
    records = synth_cohort(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_patient(out, rec)
    write_csv(out / "truth.csv", ["patient_id", "outcome", "cpc"],
              [(r.patient_id, r.clinical.outcome.value, r.clinical.cpc) for r in records])
    save_config(out / CONFIG_FILENAME, benchmark_config(data_root=str(out), seed=seed))
    return out


__all__ = ["SynthConfig", "synth_cohort", "synth_clinical", "cmd_synth", "benchmark_config"]
