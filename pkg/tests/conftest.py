import numpy as np
import pytest

from comapipe import synth
from comapipe.ingest import TTM, ClinicalRecord, EegSegment, PatientRecord, Sex


def make_rng(seed=0):
    return np.random.default_rng(seed)


def clinical(pid="0001", **kw):
    base = dict(age=60.0, sex=Sex.MALE, rosc_minutes=20.0, ohca=True, shockable_rhythm=False,
                ttm=TTM.T33, cpc=1)
    base.update(kw)
    return ClinicalRecord(patient_id=pid, **base)


def noise_segment(channels=("F3", "F4"), fs=128.0, seconds=80, hour=10, seed=0, scale=10.0):
    rng = make_rng(seed)
    x = rng.standard_normal((len(channels), int(fs * seconds))) * scale
    return EegSegment(tuple(channels), fs, hour, x)


@pytest.fixture(scope="session")
def small_cohort():
    """40 synthetic patients with a strong planted EEG effect, in memory."""
    cfg = synth.SynthConfig(n_patients=40, seed=3, duration_s=70.0, max_hours=2)
    return synth.synth_cohort(cfg)


@pytest.fixture(scope="session")
def fast_config():
    return (synth.benchmark_config()
            .override("rocket", n_kernels=100)
            .override("learners", n_trees=50, inner_folds=3))


# Acceptance criteria report their outcome here; the summary hook prints one line each.
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
                                    + (f"  [{detail}]" if detail else ""))
