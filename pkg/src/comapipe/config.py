"""Pipeline configuration: a sectioned TOML file, overridable from the CLI."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

CANONICAL_CHANNELS = (
    "Fp1", "Fp2", "F3", "F4", "F7", "F8", "Fz", "C3", "C4", "Cz",
    "P3", "P4", "Pz", "T3", "T4", "T5", "T6", "O1", "O2",
)
CONFIG_FILENAME = "comapipe.toml"


@dataclass(frozen=True)
class DspConfig:
    band_low: float = 0.5
    band_high: float = 30.0
    notch_freqs: tuple = (50.0, 60.0)
    order: int = 4
    notch_q: float = 30.0
    fs_target: float = 128.0
    window_s: float = 300.0
    stride_s: float = 10.0
    max_hour: int = 72


@dataclass(frozen=True)
class SpectroConfig:
    frame: int = 256
    hop: int = 64
    n_mels: int = 64
    fmin: float = 0.5
    fmax: float = 30.0
    floor_db: float = -80.0
    output_dim: int = 64
    grid: int = 8


@dataclass(frozen=True)
class RocketParams:
    n_kernels: int = 10_000
    features_per_kernel: int = 2
    max_dilation: int = 32
    series_seconds: float = 60.0


@dataclass(frozen=True)
class LearnerConfig:
    n_trees: int = 300
    mtry: int = 0  # 0 -> floor(sqrt(p))
    min_leaf: int = 1
    inner_folds: int = 5


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    data_root: str = ""
    variant: str = "M1"
    seed: int = 0
    output_dir: str = "out"
    jobs: int = 1
    channels: tuple = CANONICAL_CHANNELS


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    spectro: SpectroConfig = field(default_factory=SpectroConfig)
    rocket: RocketParams = field(default_factory=RocketParams)
    learners: LearnerConfig = field(default_factory=LearnerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        def conv(v):
            return list(v) if isinstance(v, tuple) else v

        return {
            f.name: {k: conv(v) for k, v in dataclasses.asdict(getattr(self, f.name)).items()}
            for f in dataclasses.fields(self)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            sect_cls = f.default_factory
            values = d.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"section [{name}] must be a table")
            known = {sf.name: sf for sf in dataclasses.fields(sect_cls)}
            bad = set(values) - set(known)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            clean = {}
            for k, v in values.items():
                default = known[k].default
                if isinstance(default, tuple):
                    v = tuple(v)
                elif isinstance(default, bool):
                    v = bool(v)
                elif isinstance(default, int) and not isinstance(v, bool):
                    if float(v) != int(v):
                        raise ConfigError(f"[{name}] {k} must be an integer")
                    v = int(v)
                elif isinstance(default, float):
                    v = float(v)
                clean[k] = v
            kwargs[name] = sect_cls(**clean)
        return cls(**kwargs)

    def override(self, section: str, **values) -> "PipelineConfig":
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        d = self.to_dict()
        d[section].update(values)
        return PipelineConfig.from_dict(d)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return PipelineConfig.from_dict(data)


def save_config(path, config: PipelineConfig) -> None:
    Path(path).write_text(config.dumps(), encoding="utf-8")
