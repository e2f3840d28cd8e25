import numpy as np
import pytest

from comapipe import models
from comapipe.errors import BundleError, ConfigError, TrainingError
from comapipe.ingest import ClinicalRecord, EegSegment, PatientRecord
from comapipe.models import (VARIANTS, FeatureCache, ModelBundle, ModelVariant, aggregate_head,
                             feature_names, fit_variant, predict, predict_many,
                             predict_with_diagnostics)
from comapipe.config import CANONICAL_CHANNELS
from comapipe.synth import synth_clinical

from .conftest import clinical


def strip_variant(bundle):
    d = bundle.to_dict()
    d.pop("variant")
    d.pop("feature_names")
    return d


@pytest.fixture(scope="module")
def cache(fast_config):
    return FeatureCache(fast_config)


@pytest.fixture(scope="module")
def fitted(small_cohort, fast_config, cache):
    return {v: fit_variant(small_cohort, v, fast_config, seed=2, cache=cache) for v in VARIANTS}


def test_variant_flags_follow_cumulative_structure():
    v = VARIANTS
    assert not v["M1"].uses_embeddings
    assert v["M2"].uses_embeddings and not v["M2"].aggregate_time_channels
    assert v["M3"].aggregate_time_channels and not v["M3"].intermediate_fusion
    assert v["M4"].intermediate_fusion and not v["M4"].uses_rocket
    assert v["M5"].uses_rocket and not v["M5"].intermediate_fusion
    assert v["M6"].uses_rocket and v["M6"].intermediate_fusion
    with pytest.raises(ConfigError):
        ModelVariant("X", uses_rocket=True)
    with pytest.raises(ConfigError):
        models.get_variant("M9")


def test_feature_name_supersets():
    names = {k: feature_names(k, CANONICAL_CHANNELS, 64) for k in VARIANTS}
    s = {k: set(v) for k, v in names.items()}
    assert s["M1"] < s["M2"] and s["M1"] < s["M3"]
    assert not any(n.startswith("emb_agg") for n in s["M2"])
    assert not any(n.startswith("emb_F") for n in s["M3"])
    assert names["M4"] == names["M3"]
    assert s["M5"] - s["M3"] == {"rocket_decision_agg"} and names["M6"] == names["M5"]
    assert len(names["M1"]) == 13 + 5 + 18
    assert len(names["M2"]) == len(names["M1"]) + 19 * 64 + 19


def test_fusion_toggle_reduces_m4_to_m3(small_cohort, fast_config, cache, fitted):
    m4_plain = ModelVariant("M4", True, True, False, False)
    b = fit_variant(small_cohort, m4_plain, fast_config, seed=2, cache=cache)
    assert strip_variant(b) == strip_variant(fitted["M3"])
    assert b.to_dict()["feature_names"] == fitted["M4"].to_dict()["feature_names"]


def test_m6_without_rocket_equals_m4(small_cohort, fast_config, cache, fitted):
    m6_plain = ModelVariant("M6", True, True, True, False)
    b = fit_variant(small_cohort, m6_plain, fast_config, seed=2, cache=cache)
    assert strip_variant(b) == strip_variant(fitted["M4"])


def test_m5_differs_from_m3_only_in_rocket_and_forest(fitted):
    a, b = fitted["M3"].to_dict(), fitted["M5"].to_dict()
    differing = {k for k in a if a[k] != b[k]}
    assert differing <= {"variant", "feature_names", "rocket_bank", "rocket_ridge", "forest",
                         "threshold"}
    assert b["rocket_bank"] is not None and b["rocket_ridge"] is not None


def test_fit_is_byte_deterministic(small_cohort, fast_config, fitted):
    again = fit_variant(small_cohort, "M5", fast_config, seed=2)
    assert again.to_bytes() == fitted["M5"].to_bytes()


def test_bundle_round_trip(tmp_path, small_cohort, fitted, cache):
    for v in ("M2", "M6"):
        path = tmp_path / models.bundle_filename(v, 2)
        fitted[v].save(path)
        back = ModelBundle.load(path)
        assert back.to_bytes() == fitted[v].to_bytes()
        assert np.array_equal(predict_many(back, small_cohort[:10]),
                              predict_many(fitted[v], small_cohort[:10], cache))


def test_corrupted_bundle(tmp_path, fitted):
    blob = bytearray(fitted["M1"].to_bytes())
    with pytest.raises(BundleError):
        ModelBundle.from_bytes(bytes(blob[: len(blob) // 2]))
    with pytest.raises(BundleError):
        ModelBundle.from_bytes(b"not a bundle")
    with pytest.raises(BundleError):
        ModelBundle.load(tmp_path / "missing.bundle")


def test_predictions_in_unit_interval(small_cohort, fitted, cache):
    for b in fitted.values():
        p = predict_many(b, small_cohort, cache)
        assert np.all((p >= 0) & (p <= 1))


def test_prediction_ignores_segment_input_order(small_cohort, fitted):
    rec = next(r for r in small_cohort if len(r.segments) > 1)
    flipped = PatientRecord(rec.clinical, tuple(reversed(rec.segments)))
    assert predict(fitted["M3"], rec) == predict(fitted["M3"], flipped)


def test_missing_channel_zero_fill(small_cohort, fitted):
    rec = next(r for r in small_cohort if r.segments)
    drop = [EegSegment(s.channels[1:], s.fs, s.hour, s.samples[1:]) for s in rec.segments]
    p, diag = predict_with_diagnostics(fitted["M2"], PatientRecord(rec.clinical, tuple(drop)))
    assert 0 <= p <= 1
    assert rec.segments[0].channels[0] in diag["missing_channels"] and diag["has_eeg"]


def test_no_eeg_patient_neutral_features(fitted):
    rec = PatientRecord(clinical("9999", cpc=None), ())
    row = models.build_features(rec, fitted["M6"])
    names = list(row.names)
    agg = [i for i, n in enumerate(names) if n.startswith("emb_agg") or n.endswith("_agg")]
    assert np.all(row.values[agg] == 0.0)
    assert row.values[names.index("has_eeg")] == 0.0 and not row.diagnostics["has_eeg"]


def test_aggregation_rules():
    probs = np.array([0.2, 0.4])
    mean_prob, _ = aggregate_head(2 * probs - 1)
    assert mean_prob == pytest.approx(0.3)
    _, vote = aggregate_head(np.array([0.5, 0.1, -0.3]))  # Poor, Poor, Good
    assert vote == pytest.approx(2 / 3)
    d = np.random.default_rng(0).standard_normal(9)
    assert np.array_equal(aggregate_head(d), aggregate_head(d[::-1]))
    assert np.array_equal(aggregate_head(np.zeros(0)), np.zeros(2))


def test_single_segment_mean_is_that_embedding(small_cohort, fast_config, fitted):
    cache = FeatureCache(fast_config)
    rec = next(r for r in small_cohort if r.segments)
    one = PatientRecord(rec.clinical, rec.segments[:1])
    bundle = fitted["M3"]
    row = models.build_features(one, bundle, cache)
    pf = cache.grid(cache.get(one))
    emb = models._segment_embeddings(pf, None, bundle.provider)
    names = list(row.names)
    agg = row.values[names.index("emb_agg_0"):names.index("emb_agg_63") + 1]
    if emb.shape[0] == 1:
        assert np.array_equal(agg, emb[0])
    else:  # several channels of the one hour
        assert np.allclose(agg, emb.mean(axis=0))


def test_planted_clinical_rule():
    clin = synth_clinical(120, seed=4)
    rosc = [c.rosc_minutes for c in clin if c.rosc_minutes is not None]
    med = float(np.median(rosc))
    recs = []
    for c in clin:
        if c.rosc_minutes is None:
            continue
        cpc = 4 if c.rosc_minutes > med else 1
        recs.append(PatientRecord(ClinicalRecord(c.patient_id, c.age, c.sex, c.rosc_minutes,
                                                 c.ohca, c.shockable_rhythm, c.ttm, cpc), ()))
    bundle = fit_variant(recs, "M1", seed=0)
    p = predict_many(bundle, recs)
    y = np.array([r.clinical.cpc > 2 for r in recs])
    assert np.mean((p >= 0.5) == y) > 0.95


def test_fit_errors(small_cohort, fast_config):
    good = [r for r in small_cohort if r.clinical.cpc <= 2]
    with pytest.raises(TrainingError):
        fit_variant(good, "M1", fast_config)
    with pytest.raises(ConfigError):
        fit_variant(small_cohort, "M1", fast_config, cache=FeatureCache(models.default_config()))


def test_feature_cache_reuses_entries(small_cohort, fast_config):
    cache = FeatureCache(fast_config)
    rec = small_cohort[0]
    assert cache.get(rec) is cache.get(rec)
    clone = PatientRecord(rec.clinical, rec.segments)
    assert cache.get(clone).record is clone  # new object under the same id recomputes
