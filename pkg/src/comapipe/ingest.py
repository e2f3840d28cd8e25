"""Patient data model, clinical/signal file parsing and cohort summaries.

On-disk layout::

    <data_root>/<patient_id>/clinical.txt
    <data_root>/<patient_id>/<patient_id>_<hour>_EEG.sig

``clinical.txt`` holds ``Key: Value`` lines. A ``.sig`` file starts with a
single ASCII header line ``fs=<float> channels=<a,b,...> hour=<int>
[n_samples=<int>]`` followed by little-endian float32 samples in
channel-major order (all of channel 0, then all of channel 1, ...), in µV.
"""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, ParseError, ValidationError

log = logging.getLogger(__name__)

MISSING_MARKERS = {"", "nan", "none"}
SIGNAL_SUFFIX = "_EEG.sig"


class Sex(str, enum.Enum):
    MALE = "Male"
    FEMALE = "Female"


class TTM(str, enum.Enum):
    T33 = "33"
    T36 = "36"
    NONE = "None"


class Outcome(str, enum.Enum):
    GOOD = "Good"
    POOR = "Poor"

    @property
    def rank(self) -> int:
        return 0 if self is Outcome.GOOD else 1


def outcome_from_cpc(cpc: int) -> Outcome:
    """Dichotomize the Cerebral Performance Category: 1-2 Good, 3-5 Poor."""
    if isinstance(cpc, bool) or int(cpc) != cpc or not 1 <= cpc <= 5:
        raise ValidationError(f"CPC must be an integer in 1..5, got {cpc!r}")
    return Outcome.GOOD if cpc <= 2 else Outcome.POOR


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    age: Optional[float] = None
    sex: Optional[Sex] = None
    rosc_minutes: Optional[float] = None
    ohca: Optional[bool] = None
    shockable_rhythm: Optional[bool] = None
    ttm: TTM = TTM.NONE
    cpc: Optional[int] = None
    outcome: Optional[Outcome] = None

    def __post_init__(self):
        if self.age is not None and not 0 <= self.age <= 130:
            raise ValidationError(f"age out of range [0, 130]: {self.age}")
        if self.rosc_minutes is not None and self.rosc_minutes < 0:
            raise ValidationError(f"ROSC must be >= 0: {self.rosc_minutes}")
        if self.cpc is not None:
            implied = outcome_from_cpc(self.cpc)
            if self.outcome is None:
                object.__setattr__(self, "outcome", implied)
            elif self.outcome is not implied:
                raise ValidationError(
                    f"outcome {self.outcome.value} inconsistent with CPC {self.cpc}"
                )


# file key -> (attribute, converter)
def _to_float(value: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ValidationError(f"not a number: {value!r}") from None
    if math.isnan(out):
        raise ValidationError("NaN not allowed here")
    return out


def _to_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes", "y"):
        return True
    if v in ("false", "0", "no", "n"):
        return False
    raise ValidationError(f"not a boolean: {value!r}")


def _to_sex(value: str) -> Sex:
    v = value.strip().lower()
    if v in ("male", "m"):
        return Sex.MALE
    if v in ("female", "f"):
        return Sex.FEMALE
    raise ValidationError(f"unknown sex: {value!r}")


def _to_ttm(value: str) -> TTM:
    try:
        t = float(value)
    except ValueError:
        return TTM.NONE
    if t == 33:
        return TTM.T33
    if t == 36:
        return TTM.T36
    return TTM.NONE


def _to_cpc(value: str) -> int:
    f = _to_float(value)
    if f != int(f) or not 1 <= f <= 5:
        raise ValidationError(f"CPC must be an integer in 1..5, got {value!r}")
    return int(f)


def _to_outcome(value: str) -> Outcome:
    v = value.strip().lower()
    for o in Outcome:
        if o.value.lower() == v:
            return o
    raise ValidationError(f"unknown outcome: {value!r}")


_FIELDS = {
    "patient": ("patient_id", str.strip),
    "age": ("age", _to_float),
    "sex": ("sex", _to_sex),
    "rosc": ("rosc_minutes", _to_float),
    "ohca": ("ohca", _to_bool),
    "shockable rhythm": ("shockable_rhythm", _to_bool),
    "ttm": ("ttm", _to_ttm),
    "cpc": ("cpc", _to_cpc),
    "outcome": ("outcome", _to_outcome),
}


def parse_clinical(text: str, patient_id: str = "") -> ClinicalRecord:
    """Parse ``Key: Value`` lines into a :class:`ClinicalRecord`.

    Unknown keys are ignored with a warning. Empty values and the markers
    ``nan``/``None`` (any case) mean absent, except for TTM where anything
    other than 33 or 36 maps to ``TTM.NONE``.
    """
    kwargs: dict = {"patient_id": patient_id}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ParseError(f"expected 'Key: Value', got {raw!r}", line=lineno)
        key, value = (s.strip() for s in line.split(":", 1))
        spec = _FIELDS.get(key.lower())
        if spec is None:
            log.warning("clinical line %d: ignoring unknown key %r", lineno, key)
            continue
        attr, convert = spec
        if attr == "ttm":
            kwargs[attr] = _to_ttm(value)
            continue
        if value.lower() in MISSING_MARKERS:
            continue
        try:
            kwargs[attr] = convert(value)
        except ValidationError as exc:
            raise ValidationError(f"line {lineno} ({key}): {exc}") from None
    return ClinicalRecord(**kwargs)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_clinical(rec: ClinicalRecord) -> str:
    def opt(v, fmt=str):
        return "nan" if v is None else fmt(v)

    lines = [
        f"Patient: {rec.patient_id}",
        f"Age: {opt(rec.age, _fmt_num)}",
        f"Sex: {opt(rec.sex, lambda s: s.value)}",
        f"ROSC: {opt(rec.rosc_minutes, _fmt_num)}",
        f"OHCA: {opt(rec.ohca)}",
        f"Shockable Rhythm: {opt(rec.shockable_rhythm)}",
        f"TTM: {'nan' if rec.ttm is TTM.NONE else rec.ttm.value}",
        f"CPC: {opt(rec.cpc)}",
        f"Outcome: {opt(rec.outcome, lambda o: o.value)}",
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class EegSegment:
    channels: tuple
    fs: float
    hour: int
    samples: np.ndarray  # [n_channels, n_samples], µV

    def __post_init__(self):
        channels = tuple(str(c) for c in self.channels)
        object.__setattr__(self, "channels", channels)
        if not (self.fs > 0 and math.isfinite(self.fs)):
            raise FormatError(f"sampling rate must be > 0, got {self.fs}")
        if int(self.hour) != self.hour or self.hour < 0:
            raise FormatError(f"hour must be a non-negative integer, got {self.hour}")
        object.__setattr__(self, "hour", int(self.hour))
        if len(set(channels)) != len(channels):
            raise FormatError(f"duplicate channel names: {channels}")
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != len(channels):
            raise FormatError(
                f"samples shape {samples.shape} does not match {len(channels)} channels"
            )
        if samples.shape[1] < 1:
            raise FormatError("segment has no samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.fs

    def replace(self, samples: np.ndarray, fs: float | None = None,
                channels: Sequence[str] | None = None) -> "EegSegment":
        return EegSegment(
            channels=self.channels if channels is None else tuple(channels),
            fs=self.fs if fs is None else fs,
            hour=self.hour,
            samples=samples,
        )


def _parse_header(line: str, path) -> dict:
    fields = {}
    for tok in line.split():
        if "=" not in tok:
            raise FormatError(f"{path}: bad header token {tok!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    missing = {"fs", "channels", "hour"} - fields.keys()
    if missing:
        raise FormatError(f"{path}: header missing {sorted(missing)}")
    try:
        out = {
            "fs": float(fields["fs"]),
            "channels": [c for c in fields["channels"].split(",") if c],
            "hour": int(fields["hour"]),
        }
        if "n_samples" in fields:
            out["n_samples"] = int(fields["n_samples"])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header value: {exc}") from None
    if not out["channels"]:
        raise FormatError(f"{path}: no channels in header")
    if not out["fs"] > 0:
        raise FormatError(f"{path}: fs must be > 0")
    return out


def read_segment_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.readline()
    try:
        return _parse_header(head.decode("ascii").strip(), path)
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII") from None


def read_segment(path) -> EegSegment:
    """Read a ``.sig`` container into an :class:`EegSegment`."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: no header line")
    try:
        header = _parse_header(data[:nl].decode("ascii").strip(), path)
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not ASCII") from None
    body = data[nl + 1:]
    n_ch = len(header["channels"])
    if len(body) == 0:
        raise FormatError(f"{path}: empty sample block")
    if len(body) % 4:
        raise FormatError(f"{path}: sample block is not a whole number of float32 values")
    flat = np.frombuffer(body, dtype="<f4")
    if flat.size % n_ch:
        raise FormatError(
            f"{path}: {flat.size} samples do not divide evenly into {n_ch} channels"
        )
    n = flat.size // n_ch
    if "n_samples" in header and header["n_samples"] != n:
        raise FormatError(
            f"{path}: header declares {header['n_samples']} samples per channel "
            f"for {n_ch} channels but block holds {flat.size} values"
        )
    return EegSegment(
        channels=tuple(header["channels"]),
        fs=header["fs"],
        hour=header["hour"],
        samples=flat.reshape(n_ch, n).astype(np.float64),
    )


def write_segment(path, seg: EegSegment) -> None:
    header = (
        f"fs={_fmt_num(seg.fs)} channels={','.join(seg.channels)} "
        f"hour={seg.hour} n_samples={seg.n_samples}\n"
    )
    body = np.ascontiguousarray(seg.samples, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body)
    os.replace(tmp, path)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    clinical: ClinicalRecord
    segments: tuple = field(default_factory=tuple)

    def __post_init__(self):
        segs = tuple(sorted(self.segments, key=lambda s: s.hour))
        hours = [s.hour for s in segs]
        if len(set(hours)) != len(hours):
            raise ValidationError(
                f"patient {self.clinical.patient_id}: more than one segment per hour"
            )
        object.__setattr__(self, "segments", segs)

    @property
    def patient_id(self) -> str:
        return self.clinical.patient_id

    @property
    def flags(self):
        from .features import signal_flags

        return signal_flags(self)

    def up_to_hour(self, max_hour: int | None) -> "PatientRecord":
        if max_hour is None:
            return self
        return PatientRecord(self.clinical, tuple(s for s in self.segments if s.hour <= max_hour))


def load_patient(patient_dir, signals: bool = True) -> PatientRecord:
    patient_dir = Path(patient_dir)
    clin_path = patient_dir / "clinical.txt"
    try:
        text = clin_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {clin_path}: {exc}") from None
    rec = parse_clinical(text, patient_id=patient_dir.name)
    if not rec.patient_id:
        rec = ClinicalRecord(**{**rec.__dict__, "patient_id": patient_dir.name})
    segments = []
    if signals:
        for sig in sorted(patient_dir.glob("*.sig")):
            segments.append(read_segment(sig))
    return PatientRecord(rec, tuple(segments))


def load_cohort(data_root, signals: bool = True) -> list:
    """Load every patient directory under ``data_root``, sorted by id."""
    root = Path(data_root)
    if not root.is_dir():
        raise FormatError(f"data root {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "clinical.txt").is_file())
    if not dirs:
        raise FormatError(f"no patient directories with clinical.txt under {root}")
    return [load_patient(d, signals=signals) for d in dirs]


def write_patient(data_root, rec: PatientRecord) -> Path:
    pdir = Path(data_root) / rec.patient_id
    pdir.mkdir(parents=True, exist_ok=True)
    (pdir / "clinical.txt").write_text(render_clinical(rec.clinical), encoding="utf-8")
    for seg in rec.segments:
        write_segment(pdir / f"{rec.patient_id}_{seg.hour:03d}{SIGNAL_SUFFIX}", seg)
    return pdir


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class NumericSummary:
    mean: float
    sd: float
    n_present: int
    n_missing: int


@dataclass(frozen=True)
class CategoricalSummary:
    counts: dict  # category -> count, includes "missing" when any
    n: int

    def percent(self, category) -> float:
        return 100.0 * self.counts.get(category, 0) / self.n

    @property
    def n_missing(self) -> int:
        return self.counts.get("missing", 0)


@dataclass(frozen=True)
class CohortSummary:
    n_patients: int
    numeric: dict
    categorical: dict
    n_poor: int
    poor_percent: float
    n_outcome_missing: int

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "numeric": {k: vars(v) for k, v in self.numeric.items()},
            "categorical": {k: dict(v.counts) for k, v in self.categorical.items()},
            "outcome": {
                "n_poor": self.n_poor,
                "poor_percent": self.poor_percent,
                "n_missing": self.n_outcome_missing,
            },
        }

    def format_table(self) -> str:
        """Render the cohort as a fixed-width table of baseline characteristics."""
        rows = [("Feature", "Value", "Missing")]
        age, rosc = self.numeric["age"], self.numeric["rosc"]
        sex = self.categorical["sex"]
        ohca, shock = self.categorical["ohca"], self.categorical["shockable_rhythm"]
        ttm = self.categorical["ttm"]

        def pct_of_present(cat: CategoricalSummary, key) -> str:
            present = cat.n - cat.n_missing
            c = cat.counts.get(key, 0)
            return f"{c} ({100.0 * c / present:.0f})" if present else "0 (-)"

        rows += [
            ("Age [years], mean (SD)", f"{age.mean:.0f} ({age.sd:.0f})", str(age.n_missing)),
            ("Sex ['Men'], N(%)", pct_of_present(sex, "Male"), str(sex.n_missing)),
            ("ROSC [minutes], mean (SD)", f"{rosc.mean:.0f} ({rosc.sd:.0f})", str(rosc.n_missing)),
            ("OHCA ['True'], N(%)", pct_of_present(ohca, "True"), str(ohca.n_missing)),
            ("Shockable rhythm ['True'], N(%)", pct_of_present(shock, "True"), str(shock.n_missing)),
            ("TTM, N at 33/36/na",
             "/".join(str(ttm.counts.get(k, 0)) for k in ("33", "36", "None")), "0"),
            ("Outcome ['Poor'], N(%)", f"{self.n_poor} ({self.poor_percent:.0f})",
             str(self.n_outcome_missing)),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        lines = [f"{a:<{w0}}  {b:>{w1}}  {c:>7}" for a, b, c in rows]
        lines.insert(1, "-" * len(lines[0]))
        return f"N = {self.n_patients} patients\n" + "\n".join(lines)


def _numeric(values: Iterable[Optional[float]], n: int) -> NumericSummary:
    present = np.array([v for v in values if v is not None], dtype=float)
    if present.size == 0:
        return NumericSummary(math.nan, math.nan, 0, n)
    sd = float(present.std(ddof=1)) if present.size > 1 else math.nan
    return NumericSummary(float(present.mean()), sd, int(present.size), n - int(present.size))


def _categorical(values: Iterable, n: int) -> CategoricalSummary:
    counts: dict = {}
    for v in values:
        key = "missing" if v is None else (v.value if isinstance(v, enum.Enum) else str(v))
        counts[key] = counts.get(key, 0) + 1
    return CategoricalSummary(dict(sorted(counts.items())), n)


def summarize_cohort(records: Sequence[PatientRecord]) -> CohortSummary:
    if not records:
        raise ValueError("cannot summarize an empty cohort")
    clin = [r.clinical if isinstance(r, PatientRecord) else r for r in records]
    n = len(clin)
    numeric = {
        "age": _numeric((c.age for c in clin), n),
        "rosc": _numeric((c.rosc_minutes for c in clin), n),
    }
    categorical = {
        "sex": _categorical((c.sex for c in clin), n),
        "ohca": _categorical((c.ohca for c in clin), n),
        "shockable_rhythm": _categorical((c.shockable_rhythm for c in clin), n),
        "ttm": _categorical((c.ttm for c in clin), n),
        "outcome": _categorical((c.outcome for c in clin), n),
    }
    n_poor = sum(c.outcome is Outcome.POOR for c in clin)
    n_out_missing = sum(c.outcome is None for c in clin)
    return CohortSummary(
        n_patients=n,
        numeric=numeric,
        categorical=categorical,
        n_poor=n_poor,
        poor_percent=100.0 * n_poor / n,
        n_outcome_missing=n_out_missing,
    )


def poor_mask(labels) -> np.ndarray:
    """Boolean array, True where the label means Poor outcome.

    Accepts :class:`Outcome` members, their string values, booleans or 0/1.
    """
    out = []
    for lab in labels:
        if isinstance(lab, Outcome):
            out.append(lab is Outcome.POOR)
        elif isinstance(lab, str):
            out.append(_to_outcome(lab) is Outcome.POOR)
        elif lab is None:
            raise ValidationError("missing outcome label")
        else:
            v = float(lab)
            if v not in (0.0, 1.0):
                raise ValidationError(f"label must be 0/1, got {lab!r}")
            out.append(v == 1.0)
    return np.array(out, dtype=bool)
