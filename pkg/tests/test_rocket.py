import numpy as np
import pytest

from comapipe.errors import BundleError, ContractError
from comapipe.rocket import (CANDIDATE_LENGTHS, KernelBank, RocketConfig, RocketKernel,
                             apply_kernel, generate_bank, transform, transform_many)


def hand_kernel(bias):
    return RocketKernel(np.array([[1.0, 0.0, -1.0]]), bias, 1, 0, (0,))


def test_hand_convolution_examples():
    x = np.array([[0.0, 1.0, 2.0, 3.0]])
    assert apply_kernel(x, hand_kernel(0.0), 4) == (0.0, -2.0, 0.0, 0.0)
    assert apply_kernel(x, hand_kernel(3.0), 4) == (1.0, 1.0, 1.0, 1.0)


def test_zero_series_strict_positive():
    assert apply_kernel(np.zeros((1, 10)), hand_kernel(0.0)) == (0.0, 0.0)


def test_too_short_series_flagged():
    k = RocketKernel(np.array([[1.0, -1.0, 0.0]]), 0.5, 4, 0, (0,))
    values, short = apply_kernel(np.ones((1, 5)), k, 4, with_flag=True)
    assert short and values == (0.0, 0.0, 0.0, 0.0)
    _, short = apply_kernel(np.ones((1, 20)), k, 4, with_flag=True)
    assert not short


def direct_conv(x, k):
    """Plain-python dilated multichannel convolution with zero padding."""
    n = x.shape[1]
    L, d, p = k.length, k.dilation, k.padding
    out = []
    for start in range(-p, n + p - (L - 1) * d):
        s = k.bias
        for r, c in enumerate(k.channel_indices):
            for j in range(L):
                t = start + j * d
                if 0 <= t < n:
                    s += k.weights[r, j] * x[c, t]
        out.append(s)
    return np.array(out)


def pooled(conv):
    pos = conv > 0
    run = best = 0
    for v in pos:
        run = run + 1 if v else 0
        best = max(best, run)
    return (pos.mean(), conv.max(), conv[pos].mean() if pos.any() else 0.0, best / conv.size)


def test_matches_direct_convolution():
    rng = np.random.default_rng(0)
    bank = generate_bank(3, 3, 120, RocketConfig(60, 4))
    x = rng.standard_normal((3, 120))
    feats = transform(x, bank).reshape(-1, 4)
    for i, k in enumerate(bank.kernels):
        assert np.allclose(feats[i], pooled(direct_conv(x, k)), rtol=1e-12, atol=1e-12)


def test_single_kernel_bank_matches_apply():
    bank = generate_bank(7, 2, 50, RocketConfig(1, 2))
    x = np.random.default_rng(1).standard_normal((2, 50))
    assert tuple(transform(x, bank)) == apply_kernel(x, bank.kernel(0), 2)


def test_shapes_and_determinism():
    bank = generate_bank(1, 4, 100, RocketConfig(2, 2))
    x = np.random.default_rng(2).standard_normal((4, 100))
    out = transform(x, bank)
    assert out.shape == (4,)
    assert np.array_equal(out, transform(x, bank))
    assert transform_many([x, x], bank).shape == (2, 4)
    assert len(bank.feature_names()) == 4
    with pytest.raises(ContractError):
        transform(x[:3], bank)


def test_generator_invariants():
    bank = generate_bank(5, 19, 7680, RocketConfig(500, 2))
    for k in bank.kernels:
        assert k.length in CANDIDATE_LENGTHS
        assert np.allclose(k.weights.sum(axis=1), 0.0, atol=1e-9)
        assert -1.0 <= k.bias <= 1.0
        assert 1 <= k.dilation <= 32
        assert k.padding in (0, ((k.length - 1) * k.dilation) // 2)
        ch = np.array(k.channel_indices)
        assert ch.size >= 1 and np.all(np.diff(ch) > 0) and ch.max() < 19


def test_single_channel_forced_subset():
    bank = generate_bank(5, 1, 100, RocketConfig(50))
    assert all(k.channel_indices == (0,) for k in bank.kernels)


def test_generator_statistics():
    n = 100_000
    bank = generate_bank(11, 1, 10_000, RocketConfig(n))
    assert bank.dilations.max() <= 32
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    for L in CANDIDATE_LENGTHS:
        assert abs(np.sum(bank.lengths == L) - n / 3) < 3 * sigma
    assert abs(np.mean(bank.paddings > 0) - 0.5) < 3 * np.sqrt(0.25 / n)


def test_series_len_too_short():
    with pytest.raises(ValueError):
        generate_bank(0, 1, 10)


def test_feature_ranges_random_pairs():
    rng = np.random.default_rng(3)
    bank = generate_bank(2, 4, 64, RocketConfig(1000, 4))
    kernels = bank.kernels
    bad = 0
    for _ in range(100):
        x = rng.standard_normal((4, int(rng.integers(11, 64)))) * rng.uniform(0.1, 10)
        for k in kernels:
            ppv, _, mpv, lspv = apply_kernel(x, k, 4)
            bad += not (0 <= ppv <= 1 and 0 <= lspv <= 1 and mpv >= 0)
    assert bad == 0


def test_dc_invariance_unpadded():
    rng = np.random.default_rng(4)
    bank = generate_bank(9, 3, 200, RocketConfig(300, 4))
    x = rng.standard_normal((3, 200))
    for k in bank.kernels:
        if k.padding:
            continue  # zero padding breaks DC invariance at the edges
        a = direct_conv(x, k)
        b = direct_conv(x + 7.5, k)
        assert np.max(np.abs(a - b)) < 1e-9
        assert np.allclose(apply_kernel(x, k, 4), apply_kernel(x + 7.5, k, 4), atol=1e-9)


def test_zero_prefix_max_monotone():
    rng = np.random.default_rng(5)
    bank = generate_bank(10, 2, 100, RocketConfig(200))
    x = rng.standard_normal((2, 100))
    xp = np.hstack([np.zeros((2, 13)), x])
    for k in bank.kernels:
        if k.padding == 0 and k.bias >= 0:
            assert apply_kernel(xp, k)[1] >= apply_kernel(x, k)[1]


def test_bank_regeneration_bit_identical():
    cfg = RocketConfig(300, 4, 16)
    a = generate_bank(123, 19, 7680, cfg)
    b = KernelBank.from_bytes(a.to_bytes())
    c = KernelBank.from_bytes(a.to_bytes(include_weights=True))
    for other in (b, c, generate_bank(123, 19, 7680, cfg)):
        assert other.same_as(a)
        assert other.weights.tobytes() == a.weights.tobytes()
    assert not generate_bank(124, 19, 7680, cfg).same_as(a)


def test_bank_blob_errors():
    blob = generate_bank(1, 2, 50, RocketConfig(5)).to_bytes(include_weights=True)
    with pytest.raises(BundleError):
        KernelBank.from_bytes(blob[:10])
    with pytest.raises(BundleError):
        KernelBank.from_bytes(b"XXXXXX" + blob[6:])
    tampered = bytearray(blob)
    tampered[-20] ^= 0xFF
    with pytest.raises(BundleError):
        KernelBank.from_bytes(bytes(tampered))
