"""The six model variants M1-M6: feature assembly, fitting and prediction.

Each variant adds to the previous one::

    M1  clinical + signal flags + EEG summary statistics -> random forest
    M2  + per-channel spectrogram embeddings of the latest hour
    M3  embeddings pooled over (hour, channel) + segment-head aggregates
    M4  M3 with the clinical vector fused into the embedding
    M5  M3 + ROCKET ridge decision value
    M6  M4 + ROCKET ridge decision value

Segment-head and ROCKET ridge outputs for the training rows are cross-fitted
over patient-level inner folds so the forest never sees in-sample ridge fits.
"""

from __future__ import annotations

import base64
import gzip
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsp, features, rocket, spectro
from .config import PipelineConfig
from .errors import BundleError, ComaPipeError, ConfigError, DataError, TrainingError
from .evaluate import challenge_score, stratified_folds
from .features import CLINICAL_NAMES, FLAG_NAMES, SUMMARY_NAMES, ImputationStats
from .ingest import EegSegment, PatientRecord, poor_mask
from .learners import (ForestConfig, ForestModel, RidgeModel, forest_fit,
                       forest_predict_proba_many, ridge_decision_many, ridge_fit)

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "comapipe-bundle"
BUNDLE_VERSION = 1

CHANNEL_ALIASES = {"T7": "T3", "T8": "T4", "P7": "T5", "P8": "T6"}


@dataclass(frozen=True)
class ModelVariant:
    id: str
    uses_embeddings: bool = False
    aggregate_time_channels: bool = False
    intermediate_fusion: bool = False
    uses_rocket: bool = False

    def __post_init__(self):
        if self.aggregate_time_channels and not self.uses_embeddings:
            raise ConfigError(f"{self.id}: aggregation requires embeddings")
        if self.intermediate_fusion and not self.aggregate_time_channels:
            raise ConfigError(f"{self.id}: intermediate fusion builds on aggregated embeddings")
        if self.uses_rocket and not self.aggregate_time_channels:
            raise ConfigError(f"{self.id}: ROCKET features build on aggregated embeddings")

    def flags(self) -> dict:
        return {k: getattr(self, k) for k in ("uses_embeddings", "aggregate_time_channels",
                                              "intermediate_fusion", "uses_rocket")}


VARIANTS = {
    "M1": ModelVariant("M1"),
    "M2": ModelVariant("M2", True),
    "M3": ModelVariant("M3", True, True),
    "M4": ModelVariant("M4", True, True, True),
    "M5": ModelVariant("M5", True, True, False, True),
    "M6": ModelVariant("M6", True, True, True, True),
}


def get_variant(v) -> ModelVariant:
    if isinstance(v, ModelVariant):
        return v
    try:
        return VARIANTS[str(v).upper()]
    except KeyError:
        raise ConfigError(f"unknown model variant {v!r}; choose from {sorted(VARIANTS)}") from None


def default_config() -> PipelineConfig:
    return PipelineConfig()


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def canonical_channel(name: str, channels: Sequence[str]) -> Optional[str]:
    lookup = {c.lower(): c for c in channels}
    alias = CHANNEL_ALIASES.get(name.upper())
    return lookup.get((alias or name).lower())


# ---------------------------------------------------------------- per-patient cache


@dataclass(eq=False)
class CleanHour:
    hour: int
    data: np.ndarray  # [n_channels, n] at the target rate; zero rows where absent
    present: np.ndarray  # bool [n_channels]


@dataclass(eq=False)
class PatientFeatures:
    """Everything about a patient that does not depend on training data."""

    record: PatientRecord
    flags: features.SignalFlags
    hours: list
    summary: np.ndarray
    grid: np.ndarray = None  # [n_segments, 2*grid**2]
    seg_hour: np.ndarray = None  # hour index into ``hours`` per segment
    seg_channel: np.ndarray = None  # channel index per segment
    rocket: dict = field(default_factory=dict)  # bank key -> [n_hours, n_features]


def preprocess_hour(seg: EegSegment, config: PipelineConfig) -> Optional[CleanHour]:
    """Filter, resample and artifact-select one recording onto the channel grid."""
    channels = config.run.channels
    idx, keep = [], []
    for i, name in enumerate(seg.channels):
        c = canonical_channel(name, channels)
        if c is not None and channels.index(c) not in idx:
            idx.append(channels.index(c))
            keep.append(i)
    if not keep:
        log.warning("hour %d: no recognised EEG channels, skipped", seg.hour)
        return None
    sub = EegSegment(tuple(channels[i] for i in idx), seg.fs, seg.hour, seg.samples[keep])
    d = config.dsp
    spec = dsp.FilterSpec(d.band_low, d.band_high, tuple(d.notch_freqs), d.order, d.notch_q)
    try:
        clean = dsp.bandpass_notch(sub, spec)
        clean = dsp.resample(clean, d.fs_target)
        clean, _ = dsp.select_cleanest(clean, d.window_s, d.stride_s)
    except (DataError, ConfigError) as exc:
        log.warning("hour %d skipped: %s", seg.hour, exc)
        return None
    data = np.zeros((len(channels), clean.n_samples))
    data[idx] = clean.samples
    present = np.zeros(len(channels), dtype=bool)
    present[idx] = True
    return CleanHour(seg.hour, data, present)


class FeatureCache:
    """Memoizes training-independent features per patient.

    Entries are keyed by patient id and invalidated when a different record
    object arrives under the same id.
    """

    def __init__(self, config: PipelineConfig, jobs: int = 1):
        self.config = config
        self.jobs = max(1, int(jobs))
        self._items: dict = {}
        self._banks: dict = {}

    def get(self, rec: PatientRecord) -> PatientFeatures:
        pf = self._items.get(rec.patient_id)
        if pf is None or pf.record is not rec:
            pf = self._compute(rec)
            self._items[rec.patient_id] = pf
        return pf

    def prepare(self, records: Sequence[PatientRecord]) -> list:
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as ex:
                return list(ex.map(self.get, records))
        return [self.get(r) for r in records]

    def _compute(self, rec: PatientRecord) -> PatientFeatures:
        cfg = self.config
        view = rec.up_to_hour(cfg.dsp.max_hour)
        hours = [h for h in (preprocess_hour(s, cfg) for s in view.segments) if h is not None]
        fs = cfg.dsp.fs_target
        segs = [EegSegment(tuple(c for c, p in zip(cfg.run.channels, h.present) if p),
                           fs, h.hour, h.data[h.present]) for h in hours]
        summary = features.eeg_summary(segs).values
        return PatientFeatures(rec, features.signal_flags(view), hours, summary)

    def grid(self, pf: PatientFeatures) -> PatientFeatures:
        if pf.grid is not None:
            return pf
        sc = self.config.spectro
        params = spectro.StftParams(sc.frame, sc.hop, sc.n_mels or None, sc.fmin, sc.fmax,
                                    sc.floor_db)
        rows, hix, cix = [], [], []
        for i, h in enumerate(pf.hours):
            for c in np.flatnonzero(h.present):
                spec = spectro.spectrogram(h.data[c], self.config.dsp.fs_target, params,
                                           self.config.run.channels[c], h.hour)
                rows.append(spectro.grid_features(spec.values, sc.grid))
                hix.append(i)
                cix.append(c)
        width = 2 * sc.grid * sc.grid
        pf.grid = np.array(rows).reshape(len(rows), width)
        pf.seg_hour = np.array(hix, dtype=int)
        pf.seg_channel = np.array(cix, dtype=int)
        return pf

    def bank(self, seed: int) -> rocket.KernelBank:
        rp = self.config.rocket
        key = (seed, rp)
        if key not in self._banks:
            self._banks[key] = rocket.generate_bank(
                seed, len(self.config.run.channels), self.series_len,
                rocket.RocketConfig(rp.n_kernels, rp.features_per_kernel, rp.max_dilation))
        return self._banks[key]

    @property
    def series_len(self) -> int:
        return int(round(self.config.rocket.series_seconds * self.config.dsp.fs_target))

    def rocket_features(self, pf: PatientFeatures, bank: rocket.KernelBank) -> np.ndarray:
        key = bank.to_bytes()
        if key not in pf.rocket:
            pf.rocket[key] = rocket.transform_many(
                [dsp.fit_length(h.data, bank.series_len) for h in pf.hours], bank)
        return pf.rocket[key]


# ---------------------------------------------------------------- feature rows


def feature_names(variant: ModelVariant, channels: Sequence[str], output_dim: int) -> list:
    variant = get_variant(variant)
    names = list(CLINICAL_NAMES) + list(FLAG_NAMES) + list(SUMMARY_NAMES)
    if variant.uses_embeddings and not variant.aggregate_time_channels:
        names += [f"emb_{c}_{i}" for c in channels for i in range(output_dim)]
        names += [f"emb_{c}_present" for c in channels]
    if variant.aggregate_time_channels:
        names += [f"emb_agg_{i}" for i in range(output_dim)]
        names += ["head_mean_prob_agg", "head_vote_frac_agg"]
    if variant.uses_rocket:
        names.append("rocket_decision_agg")
    return names


def head_probability(decision: np.ndarray) -> np.ndarray:
    """Map ridge decisions on the +/-1 scale to [0, 1]."""
    return np.clip((1.0 + decision) / 2.0, 0.0, 1.0)


def aggregate_head(decisions: np.ndarray) -> np.ndarray:
    """(mean segment probability, fraction of segments voting Poor)."""
    if decisions.size == 0:
        return np.zeros(2)
    # fsum is correctly rounded, so the aggregate does not depend on segment order
    probs = head_probability(decisions)
    return np.array([math.fsum(probs) / probs.size, float((decisions > 0).mean())])


@dataclass(frozen=True, eq=False)
class PatientFeatureRow:
    patient_id: str
    values: np.ndarray
    names: tuple
    diagnostics: dict = field(default_factory=dict)


def _segment_embeddings(pf, clin_vec, provider) -> np.ndarray:
    if pf.grid.shape[0] == 0:
        return np.zeros((0, provider.output_dim))
    return spectro.embed_grid(pf.grid, clin_vec if provider.fuse_clinical else None, provider)


def _assemble(variant: ModelVariant, channels, output_dim, clin_vec, pf, emb,
              head_vals, rocket_val) -> np.ndarray:
    parts = [clin_vec, pf.flags.as_vector(), pf.summary]
    if variant.uses_embeddings and not variant.aggregate_time_channels:
        block = np.zeros((len(channels), output_dim))
        present = np.zeros(len(channels))
        if emb.shape[0]:
            last = pf.seg_hour.max()
            sel = pf.seg_hour == last
            block[pf.seg_channel[sel]] = emb[sel]
            present[pf.seg_channel[sel]] = 1.0
        parts += [block.ravel(), present]
    if variant.aggregate_time_channels:
        parts.append(emb.mean(axis=0) if emb.shape[0] else np.zeros(output_dim))
        parts.append(head_vals)
    if variant.uses_rocket:
        parts.append([rocket_val])
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


# ---------------------------------------------------------------- bundle


@dataclass(frozen=True, eq=False)
class ModelBundle:
    variant: ModelVariant
    channels: tuple
    seed: int
    config: dict  # the pipeline sections that shape features
    imputation: ImputationStats
    feature_names: tuple
    forest: ForestModel
    provider: Optional[spectro.EmbeddingProviderSpec] = None
    head: Optional[RidgeModel] = None
    rocket_bank: Optional[bytes] = None  # seed + config blob, regenerates the bank
    rocket_ridge: Optional[RidgeModel] = None
    threshold: Optional[float] = None
    version: int = BUNDLE_VERSION

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": self.version,
            "variant": {"id": self.variant.id, **self.variant.flags()},
            "channels": list(self.channels),
            "seed": self.seed,
            "config": self.config,
            "imputation": self.imputation.to_dict(),
            "feature_names": list(self.feature_names),
            "provider": None if self.provider is None else self.provider.to_dict(),
            "head": None if self.head is None else self.head.to_dict(),
            "rocket_bank": None if self.rocket_bank is None
            else base64.b64encode(self.rocket_bank).decode("ascii"),
            "rocket_ridge": None if self.rocket_ridge is None else self.rocket_ridge.to_dict(),
            "threshold": self.threshold,
            "forest": self.forest.to_dict(),
        }

    def to_bytes(self) -> bytes:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return gzip.compress(payload, compresslevel=6, mtime=0)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelBundle":
        try:
            d = json.loads(gzip.decompress(blob))
        except (OSError, EOFError, ValueError) as exc:
            raise BundleError(f"corrupted model bundle: {exc}") from None
        return cls.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if not isinstance(d, dict) or d.get("format") != BUNDLE_FORMAT:
            raise BundleError("not a model bundle")
        if d.get("version") != BUNDLE_VERSION:
            raise BundleError(f"unsupported bundle version {d.get('version')}")
        try:
            v = d["variant"]
            variant = ModelVariant(v["id"], v["uses_embeddings"], v["aggregate_time_channels"],
                                   v["intermediate_fusion"], v["uses_rocket"])
            return cls(
                variant=variant,
                channels=tuple(d["channels"]),
                seed=int(d["seed"]),
                config=d["config"],
                imputation=ImputationStats.from_dict(d["imputation"]),
                feature_names=tuple(d["feature_names"]),
                forest=ForestModel.from_dict(d["forest"]),
                provider=None if d["provider"] is None
                else spectro.EmbeddingProviderSpec(**d["provider"]),
                head=None if d["head"] is None else RidgeModel.from_dict(d["head"]),
                rocket_bank=None if d["rocket_bank"] is None
                else base64.b64decode(d["rocket_bank"]),
                rocket_ridge=None if d["rocket_ridge"] is None
                else RidgeModel.from_dict(d["rocket_ridge"]),
                threshold=d["threshold"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ComaPipeError):
                raise
            raise BundleError(f"malformed model bundle: {exc!r}") from None

    def pipeline_config(self) -> PipelineConfig:
        d = dict(self.config)
        d["run"] = {"channels": list(self.channels), "seed": self.seed,
                    "variant": self.variant.id}
        return PipelineConfig.from_dict(d)

    def save(self, path) -> None:
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except OSError as exc:
            raise BundleError(f"cannot read bundle {path}: {exc}") from None


def bundle_filename(variant, seed: int) -> str:
    return f"{get_variant(variant).id}_{seed}.bundle"


# ---------------------------------------------------------------- fitting


def _try_ridge(X: np.ndarray, y: np.ndarray) -> Optional[RidgeModel]:
    if X.shape[0] < 3 or y.min() == y.max():
        return None
    try:
        return ridge_fit(X, y)
    except TrainingError as exc:
        log.warning("ridge fit skipped: %s", exc)
        return None


def _cross_fit(groups: list, y: np.ndarray, ids: list, inner: dict, k: int,
               predict_group) -> list:
    """Out-of-fold ridge decisions per patient.

    ``groups[i]`` holds patient i's rows; each inner fold's ridge is trained
    on the other folds' rows and applied to the held-out patients.
    """
    out = [np.zeros(0) for _ in groups]
    for fold in range(k):
        tr = [i for i, pid in enumerate(ids) if inner[pid] != fold]
        te = [i for i, pid in enumerate(ids) if inner[pid] == fold]
        Xtr = [groups[i] for i in tr if groups[i].shape[0]]
        if not Xtr:
            continue
        Xtr = np.vstack(Xtr)
        ytr = np.concatenate([np.full(groups[i].shape[0], y[i]) for i in tr])
        model = _try_ridge(Xtr, ytr)
        for i in te:
            out[i] = predict_group(model, groups[i])
    return out


def _decisions(model: Optional[RidgeModel], X: np.ndarray) -> np.ndarray:
    if model is None or X.shape[0] == 0:
        return np.zeros(0)
    return ridge_decision_many(model, X)


def fit_variant(train: Sequence[PatientRecord], variant="M1",
                config: Optional[PipelineConfig] = None, seed: int = 0,
                cache: Optional[FeatureCache] = None,
                forest_overrides: Optional[dict] = None) -> ModelBundle:
    variant = get_variant(variant)
    config = config or default_config()
    cache = cache if cache is not None else FeatureCache(config)
    if cache.config != config:
        raise ConfigError("feature cache was built for a different configuration")
    train = [r for r in train if r.clinical.outcome is not None]
    if not train:
        raise TrainingError("no labelled training patients")
    y = poor_mask([r.clinical.outcome for r in train])
    if y.min() == y.max():
        raise TrainingError("training set contains a single outcome class")
    channels = tuple(config.run.channels)
    sc = config.spectro
    pfs = cache.prepare(train)
    imputation = ImputationStats.fit(train)
    clin = [features.encode_clinical(r.clinical, imputation).values for r in train]
    ids = [r.patient_id for r in train]
    n = len(train)
    k_inner = max(2, min(config.learners.inner_folds, int(y.sum()), int((~y).sum())))

    provider = head = bank_blob = rocket_model = None
    emb = [np.zeros((0, sc.output_dim))] * n
    head_vals = [np.zeros(2)] * n
    rocket_vals = [0.0] * n
    yf = y.astype(float)

    if variant.uses_embeddings:
        provider = spectro.EmbeddingProviderSpec(
            seed=derive_seed(seed, "embedding"), output_dim=sc.output_dim,
            fuse_clinical=variant.intermediate_fusion, grid=sc.grid)
        emb = [_segment_embeddings(cache.grid(pf), c, provider) for pf, c in zip(pfs, clin)]

    if variant.aggregate_time_channels or variant.uses_rocket:
        inner = stratified_folds(ids, y, k_inner, derive_seed(seed, "inner-folds"))

    if variant.aggregate_time_channels:
        oof = _cross_fit(emb, yf, ids, inner, k_inner,
                         lambda m, X: aggregate_head(_decisions(m, X)))
        head_vals = [v if v.size else np.zeros(2) for v in oof]
        rows = [e for e in emb if e.shape[0]]
        if rows:
            head = _try_ridge(np.vstack(rows),
                              np.concatenate([np.full(e.shape[0], t) for e, t in zip(emb, yf)]))

    if variant.uses_rocket:
        bank = cache.bank(derive_seed(seed, "rocket"))
        bank_blob = bank.to_bytes()
        rk = [cache.rocket_features(pf, bank) for pf in pfs]
        oof = _cross_fit(rk, yf, ids, inner, k_inner,
                         lambda m, X: np.atleast_1d(_decisions(m, X).mean())
                         if X.shape[0] and m is not None else np.zeros(0))
        rocket_vals = [float(v[0]) if v.size else 0.0 for v in oof]
        rows = [r for r in rk if r.shape[0]]
        if rows:
            rocket_model = _try_ridge(
                np.vstack(rows), np.concatenate([np.full(r.shape[0], t) for r, t in zip(rk, yf)]))

    X = np.vstack([
        _assemble(variant, channels, sc.output_dim, clin[i], pfs[i], emb[i],
                  head_vals[i], rocket_vals[i])
        for i in range(n)
    ])
    names = feature_names(variant, channels, sc.output_dim)
    assert X.shape[1] == len(names)
    lc = config.learners
    fcfg = dict(n_trees=lc.n_trees, mtry=lc.mtry or None, seed=derive_seed(seed, "forest"),
                min_leaf=lc.min_leaf)
    fcfg.update(forest_overrides or {})
    forest = forest_fit(X, y, ForestConfig(**fcfg))
    threshold = None
    if forest.oob_proba is not None:
        ok = ~np.isnan(forest.oob_proba)
        if ok.any():
            theta = challenge_score(y[ok], forest.oob_proba[ok]).theta
            threshold = None if math.isinf(theta) else float(theta)

    cfg = config.to_dict()
    return ModelBundle(
        variant=variant, channels=channels, seed=int(seed),
        config={s: cfg[s] for s in ("dsp", "spectro", "rocket", "learners")},
        imputation=imputation, feature_names=tuple(names), forest=forest,
        provider=provider, head=head, rocket_bank=bank_blob, rocket_ridge=rocket_model,
        threshold=threshold,
    )


# ---------------------------------------------------------------- inference


def _compatible(a: PipelineConfig, b: PipelineConfig) -> bool:
    return (a.dsp, a.spectro, tuple(a.run.channels)) == (b.dsp, b.spectro, tuple(b.run.channels))


def build_features(rec: PatientRecord, bundle: ModelBundle,
                   cache: Optional[FeatureCache] = None) -> PatientFeatureRow:
    """Assemble the forest input row for one patient using a fitted bundle."""
    config = bundle.pipeline_config()
    if cache is None or not _compatible(cache.config, config):
        cache = FeatureCache(config)
    variant = bundle.variant
    pf = cache.get(rec)
    clin = features.encode_clinical(rec.clinical, bundle.imputation).values
    out_dim = bundle.config["spectro"]["output_dim"]
    emb = np.zeros((0, out_dim))
    head_vals = np.zeros(2)
    rocket_val = 0.0
    if variant.uses_embeddings:
        emb = _segment_embeddings(cache.grid(pf), clin, bundle.provider)
    if variant.aggregate_time_channels:
        head_vals = aggregate_head(_decisions(bundle.head, emb))
    if variant.uses_rocket and bundle.rocket_bank is not None:
        bank = rocket.KernelBank.from_bytes(bundle.rocket_bank)
        d = _decisions(bundle.rocket_ridge, cache.rocket_features(pf, bank))
        rocket_val = float(d.mean()) if d.size else 0.0
    values = _assemble(variant, bundle.channels, out_dim, clin, pf, emb, head_vals, rocket_val)
    present = set()
    for h in pf.hours:
        present.update(np.asarray(bundle.channels)[h.present].tolist())
    diagnostics = {
        "n_hours_used": len(pf.hours),
        "missing_channels": [c for c in bundle.channels if c not in present],
        "has_eeg": bool(pf.hours),
    }
    return PatientFeatureRow(rec.patient_id, values, bundle.feature_names, diagnostics)


def predict_with_diagnostics(bundle: ModelBundle, rec: PatientRecord,
                             cache: Optional[FeatureCache] = None):
    row = build_features(rec, bundle, cache)
    return float(forest_predict_proba_many(bundle.forest, row.values[None, :])[0]), row.diagnostics


def predict(bundle: ModelBundle, rec: PatientRecord,
            cache: Optional[FeatureCache] = None) -> float:
    """Probability of Poor outcome in [0, 1]."""
    return predict_with_diagnostics(bundle, rec, cache)[0]


def predict_many(bundle: ModelBundle, records: Sequence[PatientRecord],
                 cache: Optional[FeatureCache] = None) -> np.ndarray:
    if not records:
        return np.zeros(0)
    if cache is not None:
        cache.prepare(records)
    X = np.vstack([build_features(r, bundle, cache).values for r in records])
    return forest_predict_proba_many(bundle.forest, X)
