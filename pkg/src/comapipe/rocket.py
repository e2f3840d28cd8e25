"""Random convolutional kernel transform for multichannel series.

Kernels are drawn from a Philox counter-based generator so a bank is fully
determined by ``(seed, n_channels, series_len, config)``. Each kernel is a
dilated convolution summed over a random channel subset; its output is
pooled to ``ppv`` and ``max`` (and ``mpv``, ``lspv`` in 4-feature mode).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .errors import BundleError, ContractError

CANDIDATE_LENGTHS = (7, 9, 11)
_MAGIC = b"CMPRKT"
_VERSION = 1
_HEADER = struct.Struct("<6sHQIIIIIB")


@dataclass(frozen=True)
class RocketConfig:
    n_kernels: int = 10_000
    features_per_kernel: int = 2
    max_dilation: int = 32

    def __post_init__(self):
        if self.features_per_kernel not in (2, 4):
            raise ValueError("features_per_kernel must be 2 or 4")
        if self.n_kernels < 1 or self.max_dilation < 1:
            raise ValueError("n_kernels and max_dilation must be positive")


@dataclass(frozen=True, eq=False)
class RocketKernel:
    weights: np.ndarray  # [n_selected_channels, length]
    bias: float
    dilation: int
    padding: int
    channel_indices: tuple

    @property
    def length(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class KernelBank:
    seed: int
    n_input_channels: int
    series_len: int
    config: RocketConfig
    lengths: np.ndarray
    weights: np.ndarray  # flat, kernel by kernel, channel-row-major
    biases: np.ndarray
    dilations: np.ndarray
    paddings: np.ndarray
    n_selected: np.ndarray
    channel_indices: np.ndarray  # flat

    @property
    def features_per_kernel(self) -> int:
        return self.config.features_per_kernel

    @property
    def n_kernels(self) -> int:
        return int(self.lengths.size)

    @property
    def n_features(self) -> int:
        return self.n_kernels * self.features_per_kernel

    def kernel(self, i: int) -> RocketKernel:
        w0 = int(np.sum(self.lengths[:i] * self.n_selected[:i]))
        c0 = int(np.sum(self.n_selected[:i]))
        k, L = int(self.n_selected[i]), int(self.lengths[i])
        return RocketKernel(
            weights=self.weights[w0:w0 + k * L].reshape(k, L),
            bias=float(self.biases[i]),
            dilation=int(self.dilations[i]),
            padding=int(self.paddings[i]),
            channel_indices=tuple(int(c) for c in self.channel_indices[c0:c0 + k]),
        )

    @property
    def kernels(self) -> list:
        return [self.kernel(i) for i in range(self.n_kernels)]

    def feature_names(self, prefix: str = "rocket") -> list:
        tags = ("ppv", "max", "mpv", "lspv")[: self.features_per_kernel]
        return [f"{prefix}_{i}_{t}" for i in range(self.n_kernels) for t in tags]

    def same_as(self, other: "KernelBank") -> bool:
        arrays = ("lengths", "weights", "biases", "dilations", "paddings",
                  "n_selected", "channel_indices")
        return (
            (self.seed, self.n_input_channels, self.series_len, self.config)
            == (other.seed, other.n_input_channels, other.series_len, other.config)
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    def to_bytes(self, include_weights: bool = False) -> bytes:
        head = _HEADER.pack(
            _MAGIC, _VERSION, self.seed, self.n_input_channels, self.series_len,
            self.config.n_kernels, self.config.features_per_kernel,
            self.config.max_dilation, int(include_weights),
        )
        if not include_weights:
            return head
        parts = [head]
        for arr, dt in ((self.lengths, "<i4"), (self.n_selected, "<i4"),
                        (self.channel_indices, "<i4"), (self.weights, "<f8"),
                        (self.biases, "<f8"), (self.dilations, "<i4"),
                        (self.paddings, "<i4")):
            parts.append(struct.pack("<Q", arr.size))
            parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KernelBank":
        if len(blob) < _HEADER.size:
            raise BundleError("kernel bank blob truncated")
        magic, version, seed, n_ch, series_len, n_k, fpk, max_dil, has_w = \
            _HEADER.unpack_from(blob)
        if magic != _MAGIC:
            raise BundleError("not a kernel bank blob")
        if version != _VERSION:
            raise BundleError(f"unsupported kernel bank version {version}")
        config = RocketConfig(n_k, fpk, max_dil)
        bank = generate_bank(seed, n_ch, series_len, config)
        if not has_w:
            return bank
        pos = _HEADER.size
        arrays = []
        for dt in ("<i4", "<i4", "<i4", "<f8", "<f8", "<i4", "<i4"):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            width = np.dtype(dt).itemsize
            if pos + n * width > len(blob):
                raise BundleError("kernel bank blob truncated")
            arrays.append(np.frombuffer(blob, dtype=dt, count=n, offset=pos))
            pos += n * width
        stored = cls(seed, n_ch, series_len, config,
                     lengths=arrays[0].astype(np.int32), n_selected=arrays[1].astype(np.int32),
                     channel_indices=arrays[2].astype(np.int32), weights=arrays[3].copy(),
                     biases=arrays[4].copy(), dilations=arrays[5].astype(np.int32),
                     paddings=arrays[6].astype(np.int32))
        if not stored.same_as(bank):
            raise BundleError("stored kernel weights do not match regeneration from seed")
        return stored


def generate_bank(seed: int, n_channels: int, series_len: int,
                  config: RocketConfig = RocketConfig()) -> KernelBank:
    if series_len < max(CANDIDATE_LENGTHS):
        raise ValueError(
            f"series length {series_len} shorter than the longest kernel ({max(CANDIDATE_LENGTHS)})"
        )
    if n_channels < 1:
        raise ValueError("need at least one input channel")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    n = config.n_kernels
    lengths = np.empty(n, np.int32)
    biases = np.empty(n)
    dilations = np.empty(n, np.int32)
    paddings = np.empty(n, np.int32)
    n_selected = np.empty(n, np.int32)
    weights, channels = [], []
    log_ch = np.log2(n_channels + 1)
    for i in range(n):
        length = CANDIDATE_LENGTHS[rng.integers(len(CANDIDATE_LENGTHS))]
        k = min(int(2 ** rng.uniform(0, log_ch)), n_channels)
        chans = np.sort(rng.choice(n_channels, k, replace=False))
        w = rng.standard_normal((k, length))
        w -= w.mean(axis=1, keepdims=True)
        bias = rng.uniform(-1.0, 1.0)
        upper = np.log2((series_len - 1) / (length - 1))
        dilation = int(2 ** rng.uniform(0, upper))
        dilation = max(1, min(dilation, config.max_dilation))
        padding = ((length - 1) * dilation) // 2 if rng.integers(2) == 1 else 0
        lengths[i], biases[i], dilations[i], paddings[i], n_selected[i] = \
            length, bias, dilation, padding, k
        weights.append(w.ravel())
        channels.append(chans)
    return KernelBank(
        seed=int(seed), n_input_channels=n_channels, series_len=series_len, config=config,
        lengths=lengths, weights=np.concatenate(weights), biases=biases,
        dilations=dilations, paddings=paddings, n_selected=n_selected,
        channel_indices=np.concatenate(channels).astype(np.int32),
    )


@njit(cache=True)
def _apply(X, weights, channels, length, bias, dilation, padding, out):
    # out: ppv, max, mpv, lspv; returns False when no output positions exist
    n = X.shape[1]
    n_out = n + 2 * padding - (length - 1) * dilation
    if n_out <= 0:
        for f in range(out.shape[0]):
            out[f] = 0.0
        return False
    conv = np.full(n_out, bias)
    for c in range(channels.shape[0]):
        xr = X[channels[c]]
        for j in range(length):
            w = weights[c * length + j]
            shift = j * dilation - padding
            lo = max(0, -shift)
            hi = min(n_out, n - shift)
            for i in range(lo, hi):
                conv[i] += w * xr[i + shift]
    n_pos = 0
    pos_sum = 0.0
    run = 0
    best_run = 0
    mx = -np.inf
    for i in range(n_out):
        s = conv[i]
        if s > mx:
            mx = s
        if s > 0:
            n_pos += 1
            pos_sum += s
            run += 1
            if run > best_run:
                best_run = run
        else:
            run = 0
    out[0] = n_pos / n_out
    out[1] = mx
    if out.shape[0] == 4:
        out[2] = pos_sum / n_pos if n_pos > 0 else 0.0
        out[3] = best_run / n_out
    return True


@njit(cache=True)
def _transform(X, lengths, weights, biases, dilations, paddings, n_selected,
               channel_indices, fpk, out):
    w0 = 0
    c0 = 0
    buf = np.empty(fpk)
    for k in range(lengths.shape[0]):
        L = lengths[k]
        m = n_selected[k]
        _apply(X, weights[w0:w0 + m * L], channel_indices[c0:c0 + m], L,
               biases[k], dilations[k], paddings[k], buf)
        for f in range(fpk):
            out[k * fpk + f] = buf[f]
        w0 += m * L
        c0 += m


def apply_kernel(series, kernel: RocketKernel, features: int = 2, with_flag: bool = False):
    """Pool one kernel's convolution output over ``series`` [n_channels, n].

    Returns a tuple ``(ppv, max)`` or ``(ppv, max, mpv, lspv)``. A series
    shorter than the receptive field (padding 0) yields zeros; with
    ``with_flag`` the result is ``(values, too_short)``.
    """
    X = np.atleast_2d(np.asarray(series, dtype=np.float64))
    out = np.zeros(features)
    w = np.ascontiguousarray(kernel.weights, dtype=np.float64)
    ok = _apply(X, w.ravel(), np.asarray(kernel.channel_indices, dtype=np.int32),
                w.shape[1], float(kernel.bias), int(kernel.dilation), int(kernel.padding), out)
    values = tuple(float(v) for v in out)
    return (values, not ok) if with_flag else values


def transform(series, bank: KernelBank) -> np.ndarray:
    """Concatenated pooled features for every kernel, in bank order."""
    X = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if X.shape[0] != bank.n_input_channels:
        raise ContractError(
            f"series has {X.shape[0]} channels, bank expects {bank.n_input_channels}"
        )
    out = np.empty(bank.n_features)
    _transform(np.ascontiguousarray(X), bank.lengths, bank.weights, bank.biases,
               bank.dilations, bank.paddings, bank.n_selected, bank.channel_indices,
               bank.features_per_kernel, out)
    return out


def transform_many(series: Sequence, bank: KernelBank) -> np.ndarray:
    return np.vstack([transform(s, bank) for s in series]) if len(series) else \
        np.zeros((0, bank.n_features))
