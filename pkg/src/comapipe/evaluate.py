"""Challenge score, ROC/AUC, threshold sweeps and stratified cross-validation.

Poor outcome is the positive class. A patient is predicted Poor when its
probability is at or above the threshold (see :func:`predicts_poor`).
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, ValidationError
from .ingest import poor_mask

MAX_FPR = 0.05


def predicts_poor(probs: np.ndarray, theta: float) -> np.ndarray:
    """The single place where the decision rule lives (inclusive)."""
    return probs >= theta


def _check(labels, probs):
    pos = poor_mask(labels)
    p = np.asarray(probs, dtype=float)
    if pos.size == 0 or p.size == 0:
        raise ValueError("labels and probabilities must be non-empty")
    if pos.size != p.size:
        raise ValueError(f"{pos.size} labels but {p.size} probabilities")
    if np.any(~np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    return pos, p


@dataclass(frozen=True)
class ScoreReport:
    challenge_score: float
    theta: float  # +inf when no finite threshold is feasible
    tpr_at_theta: float
    fpr_at_theta: float
    n_pos: int
    n_neg: int

    def to_dict(self) -> dict:
        d = dict(vars(self))
        if math.isinf(self.theta):
            d["theta"] = "+inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        d = dict(d)
        d["theta"] = math.inf if d["theta"] == "+inf" else float(d["theta"])
        return cls(**d)


def _confusion(pos: np.ndarray, p: np.ndarray, thetas: np.ndarray):
    """TP and FP counts for each threshold, vectorized."""
    sp = np.sort(p[pos])
    sn = np.sort(p[~pos])
    tp = sp.size - np.searchsorted(sp, thetas, side="left")
    fp = sn.size - np.searchsorted(sn, thetas, side="left")
    return tp, fp


def challenge_score(labels, probs, max_fpr: float = MAX_FPR) -> ScoreReport:
    """Highest TPR over thresholds drawn from the predictions with FPR <= max_fpr.

    Ties in TPR go to the highest threshold. A sentinel threshold above every
    prediction (nobody predicted Poor) is always a candidate.
    """
    pos, p = _check(labels, probs)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    thetas = np.append(np.unique(p), math.inf)
    tp, fp = _confusion(pos, p, thetas)
    tpr = tp / n_pos if n_pos else np.zeros(thetas.size)
    fpr = fp / n_neg if n_neg else np.zeros(thetas.size)
    feasible = fp <= max_fpr * n_neg if n_neg else np.ones(thetas.size, dtype=bool)
    cand = np.flatnonzero(feasible)
    best_tpr = tpr[cand].max()
    i = cand[tpr[cand] == best_tpr].max()  # thetas ascending -> highest
    return ScoreReport(float(tpr[i]), float(thetas[i]), float(tpr[i]), float(fpr[i]),
                       n_pos, n_neg)


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf first, then unique predictions descending
    auc: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def auc_rank(labels, probs) -> float:
    """Probability a random Poor outranks a random Good, ties counted 1/2."""
    pos, p = _check(labels, probs)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined with a single class")
    ranks = rankdata(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(labels, probs) -> RocCurve:
    pos, p = _check(labels, probs)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC/AUC is undefined with a single class")
    thetas = np.concatenate([[math.inf], np.unique(p)[::-1]])
    tp, fp = _confusion(pos, p, thetas)
    return RocCurve(fp / n_neg, tp / n_pos, thetas, auc_rank(labels, probs))


@dataclass(frozen=True)
class SweepRow:
    theta: float
    accuracy: float
    fpr: float
    fnr: float


def threshold_sweep(labels, probs, grid: Sequence[float]) -> list:
    pos, p = _check(labels, probs)
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ValueError("threshold grid is empty")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    tp, fp = _confusion(pos, p, grid)
    tn, fn = n_neg - fp, n_pos - tp
    return [
        SweepRow(float(t), (tp_i + tn_i) / p.size,
                 fp_i / n_neg if n_neg else 0.0, fn_i / n_pos if n_pos else 0.0)
        for t, tp_i, tn_i, fp_i, fn_i in zip(grid, tp, tn, fp, fn)
    ]


# ---------------------------------------------------------------- cross-validation


def stratified_folds(ids: Sequence[str], labels, k: int, seed: int) -> dict:
    """Patient-level stratified fold assignment ``{patient_id: fold}``.

    Patients are ordered by id before shuffling, so the result does not
    depend on input order. Dealing Poor then Good patients round-robin with
    a shared counter keeps fold sizes and per-fold class counts within one.
    """
    pos = poor_mask(labels)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rng = np.random.Generator(np.random.Philox(int(seed)))
    out = {}
    counter = 0
    for cls in (True, False):
        members = [ids[i] for i in order if pos[i] == cls]
        if len(members) < k:
            raise DataError(
                f"need at least {k} patients per class for {k}-fold CV, "
                f"got {len(members)} {'Poor' if cls else 'Good'}"
            )
        for j in rng.permutation(len(members)):
            out[members[j]] = counter % k
            counter += 1
    return out


@dataclass(frozen=True)
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    score: ScoreReport
    auc: float

    def to_dict(self) -> dict:
        return {"fold": self.fold, "n_train": self.n_train, "n_test": self.n_test,
                "auc": self.auc, "score": self.score.to_dict()}


@dataclass(frozen=True)
class CvResult:
    variant: str
    seed: int
    k: int
    folds: list
    assignments: dict
    cv_score_mean: float
    cv_score_sd: float
    cv_auc_mean: float
    cv_auc_sd: float
    predictions: list = field(default_factory=list)  # (patient_id, label, prob, fold)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "k": self.k,
            "cv_score_mean": self.cv_score_mean,
            "cv_score_sd": self.cv_score_sd,
            "cv_auc_mean": self.cv_auc_mean,
            "cv_auc_sd": self.cv_auc_sd,
            "folds": [f.to_dict() for f in self.folds],
            "assignments": dict(sorted(self.assignments.items())),
            "predictions": [
                {"patient_id": pid, "outcome": lab, "probability_poor": prob, "fold": fold}
                for pid, lab, prob, fold in self.predictions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvResult":
        return cls(
            variant=d["variant"], seed=d["seed"], k=d["k"],
            folds=[FoldResult(f["fold"], f["n_train"], f["n_test"],
                              ScoreReport.from_dict(f["score"]), f["auc"]) for f in d["folds"]],
            assignments=dict(d["assignments"]),
            cv_score_mean=d["cv_score_mean"], cv_score_sd=d["cv_score_sd"],
            cv_auc_mean=d["cv_auc_mean"], cv_auc_sd=d["cv_auc_sd"],
            predictions=[(p["patient_id"], p["outcome"], p["probability_poor"], p["fold"])
                         for p in d.get("predictions", [])],
        )


def _mean_sd(xs):
    xs = list(xs)
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def cross_validate(records, variant="M1", k: int = 5, seed: int = 0,
                   config=None, cache=None) -> CvResult:
    """k-fold patient-level CV; every fitted component is fold-local."""
    from . import models

    config = config or models.default_config()
    variant = models.get_variant(variant)
    records = [r for r in records if r.clinical.outcome is not None]
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids in cohort")
    labels = [r.clinical.outcome for r in records]
    assign = stratified_folds(ids, labels, k, seed)
    cache = cache if cache is not None else models.FeatureCache(config)
    by_id = {r.patient_id: r for r in records}
    folds, preds = [], []
    for fold in range(k):
        train = [by_id[i] for i in sorted(ids) if assign[i] != fold]
        test = [by_id[i] for i in sorted(ids) if assign[i] == fold]
        bundle = models.fit_variant(train, variant, config, seed=seed, cache=cache)
        probs = models.predict_many(bundle, test, cache=cache)
        labs = [r.clinical.outcome for r in test]
        folds.append(FoldResult(fold, len(train), len(test),
                                challenge_score(labs, probs), roc_auc(labs, probs).auc))
        preds += [(r.patient_id, r.clinical.outcome.value, float(pr), fold)
                  for r, pr in zip(test, probs)]
    s_mean, s_sd = _mean_sd(f.score.challenge_score for f in folds)
    a_mean, a_sd = _mean_sd(f.auc for f in folds)
    preds.sort()
    return CvResult(variant.id, int(seed), k, folds, assign, s_mean, s_sd, a_mean, a_sd, preds)


def pooled_predictions(result: CvResult):
    labels = [p[1] for p in result.predictions]
    probs = np.array([p[2] for p in result.predictions])
    return labels, probs


def best_threshold(labels, probs) -> Optional[float]:
    theta = challenge_score(labels, probs).theta
    return None if math.isinf(theta) else theta
