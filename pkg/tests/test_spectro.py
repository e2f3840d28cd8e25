import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import get_window

from comapipe.errors import ContractError
from comapipe.spectro import (EmbeddingProviderSpec, Spectrogram, StftParams, _projection,
                              embed, embed_grid, grid_features, hz_to_mel, mel_filterbank,
                              mel_to_hz, power_stft, spectrogram)

FS = 128.0


def sine(f, seconds=60, fs=FS):
    return np.sin(2 * np.pi * f * np.arange(int(seconds * fs)) / fs)


def test_peak_is_zero_db_and_floor():
    x = np.random.default_rng(0).standard_normal(4000)
    s = spectrogram(x, FS)
    assert s.values.max() == 0.0
    assert s.values.min() >= -80.0
    assert s.values.shape == (64, 1 + (4000 - 256) // 64)
    assert not s.zero_energy


def test_10hz_peak_location():
    s = spectrogram(sine(10.0), FS)
    row = int(np.argmax(s.values.max(axis=1)))
    widths = np.gradient(s.band_centers)
    assert abs(s.band_centers[row] - 10.0) <= widths[row]


def test_dft_power_oracle():
    x = np.random.default_rng(1).standard_normal(512)
    power, freqs, times = power_stft(x, FS, 256, 64)
    w = get_window("hann", 256)
    k = 7
    frame = x[64 * 2:64 * 2 + 256] * w
    direct = abs(sum(frame[m] * np.exp(-2j * np.pi * k * m / 256) for m in range(256))) ** 2
    assert power[k, 2] == pytest.approx(direct, rel=1e-10)
    assert freqs[k] == pytest.approx(k * FS / 256)


def test_all_zero_input_flagged():
    s = spectrogram(np.zeros(2000), FS)
    assert s.zero_energy and np.all(s.values == -80.0)


def test_frame_longer_than_signal():
    with pytest.raises(ValueError):
        spectrogram(np.ones(100), FS)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e4), st.integers(0, 1000))
def test_scale_invariance(c, seed):
    x = np.random.default_rng(seed).standard_normal(1500)
    a, b = spectrogram(x, FS).values, spectrogram(c * x, FS).values
    assert np.allclose(a, b, atol=1e-9)


def test_mel_scale_round_trip_and_filterbank():
    f = np.array([0.5, 10.0, 30.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    w, centers = mel_filterbank(64, np.fft.rfftfreq(256, 1 / FS), 0.5, 30.0)
    assert w.shape == (64, 129) and np.all(np.diff(centers) > 0)
    assert np.all(w >= 0) and np.all(w <= 1)


def test_linear_bands_without_mel():
    s = spectrogram(sine(10.0, 20), FS, StftParams(n_mels=None))
    assert s.band_centers[0] >= 0.5 and s.band_centers[-1] <= 30.0
    assert s.band_centers[np.argmax(s.values.max(axis=1))] == pytest.approx(10.0)


def spec_of(values):
    return Spectrogram(values, np.arange(values.shape[0]), np.arange(values.shape[1]))


def test_embed_deterministic():
    s = spectrogram(np.random.default_rng(2).standard_normal(3000), FS)
    p = EmbeddingProviderSpec(seed=42)
    a, b = embed(s, None, p), embed(s, None, p)
    assert a.shape == (64,) and a.tobytes() == b.tobytes()
    assert not np.array_equal(a, embed(s, None, EmbeddingProviderSpec(seed=43)))


def test_all_floor_embedding_forced():
    s = spec_of(np.full((64, 40), -80.0))
    base = grid_features(s.values)
    assert np.all(base[:64] == -80.0) and np.all(base[64:] == 0.0)
    p = EmbeddingProviderSpec(seed=1)
    assert np.allclose(embed(s, None, p), _projection(1, 64, 128) @ base)


def test_single_cell_change_changes_embedding():
    v = np.random.default_rng(3).uniform(-80, 0, (64, 40))
    w = v.copy()
    w[10, 7] -= 5.0
    p = EmbeddingProviderSpec(seed=4)
    assert not np.array_equal(embed(spec_of(v), None, p), embed(spec_of(w), None, p))


def test_grid_cell_shuffle_invariance():
    rng = np.random.default_rng(5)
    v = rng.uniform(-80, 0, (64, 40))
    w = v.copy()
    cell = w[8:16, 5:10].ravel()  # band block 1, frame block 1 of the 8x8 grid
    w[8:16, 5:10] = rng.permutation(cell).reshape(8, 5)
    assert np.allclose(grid_features(v), grid_features(w), atol=1e-12)


def test_clinical_fusion_contract():
    s = spectrogram(np.random.default_rng(6).standard_normal(3000), FS)
    clin = np.arange(13.0)
    fused = EmbeddingProviderSpec(seed=1, fuse_clinical=True)
    plain = EmbeddingProviderSpec(seed=1)
    with pytest.raises(ContractError):
        embed(s, clin, plain)
    with pytest.raises(ContractError):
        embed(s, None, fused)
    with pytest.raises(ContractError):
        embed(s, None, EmbeddingProviderSpec(kind="DenseNet"))
    e = embed(s, clin, fused)
    assert e.shape == (64,) and not np.array_equal(e, embed(s, clin + 1, fused))
    batch = embed_grid(grid_features(s.values)[None, :], clin, fused)
    assert np.allclose(batch[0], e)


def test_grid_too_small():
    with pytest.raises(ValueError):
        grid_features(np.zeros((4, 40)))
