"""Power spectrograms in dB relative to peak, and spectrogram embeddings.

The embedding provider stands in for a pretrained image CNN: it summarizes
a spectrogram on a coarse time x band grid and projects the summary (plus,
optionally, the encoded clinical vector) through a fixed seeded random
linear map.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.signal import get_window

from .errors import ContractError


@dataclass(frozen=True)
class StftParams:
    frame: int = 256
    hop: int = 64
    n_mels: Optional[int] = 64
    fmin: float = 0.5
    fmax: float = 30.0
    floor_db: float = -80.0


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # [n_bands, n_frames], dB re peak
    band_centers: np.ndarray
    frame_times: np.ndarray
    channel: str = ""
    hour: int = 0
    zero_energy: bool = False

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_freqs: np.ndarray, fmin: float, fmax: float):
    """Triangular filters on the HTK mel scale; returns (weights, centers)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    f = fft_freqs[None, :]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights, edges[1:-1]


def power_stft(x: np.ndarray, fs: float, frame: int, hop: int):
    """Hann-windowed |STFT|^2 over frames fully inside the signal."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("expected a single-channel signal")
    if frame > x.size:
        raise ValueError(f"frame of {frame} samples longer than signal ({x.size})")
    n_frames = 1 + (x.size - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", frame)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # [frames, bins]
    freqs = np.fft.rfftfreq(frame, 1.0 / fs)
    times = (np.arange(n_frames) * hop + frame / 2) / fs
    return power.T, freqs, times


def spectrogram(x, fs: float, params: StftParams = StftParams(),
                channel: str = "", hour: int = 0) -> Spectrogram:
    power, freqs, times = power_stft(x, fs, params.frame, params.hop)
    if params.n_mels:
        weights, centers = mel_filterbank(params.n_mels, freqs, params.fmin, params.fmax)
        bands = weights @ power
    else:
        keep = (freqs >= params.fmin) & (freqs <= params.fmax)
        bands, centers = power[keep], freqs[keep]
    peak = bands.max()
    if not peak > 0:
        values = np.full(bands.shape, params.floor_db)
        return Spectrogram(values, centers, times, channel, hour, zero_energy=True)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(bands / peak)
    values = np.maximum(values, params.floor_db)
    return Spectrogram(values, centers, times, channel, hour)


@dataclass(frozen=True)
class EmbeddingProviderSpec:
    kind: str = "ReferenceGrid"
    seed: int = 0
    output_dim: int = 64
    fuse_clinical: bool = False
    grid: int = 8

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "output_dim": self.output_dim,
                "fuse_clinical": self.fuse_clinical, "grid": self.grid}


def _cells(n: int, k: int) -> np.ndarray:
    # cell boundaries so that cell i covers [b[i], b[i+1])
    return (np.arange(k + 1) * n) // k


def grid_features(values: np.ndarray, grid: int = 8) -> np.ndarray:
    """Per-cell mean and SD of a [bands, frames] map: means first, then SDs."""
    n_bands, n_frames = values.shape
    if n_bands < grid or n_frames < grid:
        raise ValueError(
            f"spectrogram {values.shape} smaller than the {grid}x{grid} embedding grid"
        )
    tb, bb = _cells(n_frames, grid), _cells(n_bands, grid)
    means = np.empty((grid, grid))
    sds = np.empty((grid, grid))
    for i in range(grid):
        for j in range(grid):
            cell = values[bb[j]:bb[j + 1], tb[i]:tb[i + 1]]
            means[i, j] = cell.mean()
            sds[i, j] = cell.std()
    return np.concatenate([means.ravel(), sds.ravel()])


@lru_cache(maxsize=32)
def _projection(seed: int, output_dim: int, input_dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    w = rng.standard_normal((output_dim, input_dim)) / np.sqrt(input_dim)
    w.setflags(write=False)
    return w


def embed_grid(features: np.ndarray, clinical: Optional[np.ndarray],
               provider: EmbeddingProviderSpec) -> np.ndarray:
    """Project precomputed grid features [n, 2*grid**2] (batch form of ``embed``)."""
    _check_provider(clinical, provider)
    features = np.atleast_2d(features)
    if clinical is not None:
        clin = np.broadcast_to(np.asarray(clinical, dtype=float),
                               (features.shape[0], len(clinical)))
        features = np.hstack([features, clin])
    w = _projection(provider.seed, provider.output_dim, features.shape[1])
    return features @ w.T


def _check_provider(clinical, provider: EmbeddingProviderSpec) -> None:
    if provider.kind != "ReferenceGrid":
        raise ContractError(f"unknown embedding provider {provider.kind!r}")
    if provider.fuse_clinical and clinical is None:
        raise ContractError("provider fuses clinical data but no clinical vector was given")
    if not provider.fuse_clinical and clinical is not None:
        raise ContractError("clinical vector given to a provider without clinical fusion")


def embed(spec: Spectrogram, clinical: Optional[np.ndarray],
          provider: EmbeddingProviderSpec) -> np.ndarray:
    _check_provider(clinical, provider)
    v = grid_features(spec.values, provider.grid)
    if clinical is not None:
        v = np.concatenate([v, np.asarray(clinical, dtype=float)])
    return _projection(provider.seed, provider.output_dim, v.size) @ v
