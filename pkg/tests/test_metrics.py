import cmath
import math
import numpy as np
import pandas as pd
import pytest
import torch
import convsynth.metrics as me
from convsynth.simulate import make_phantom


def reference_ssim(x, target, mask, data_range, window=11, sigma_w=1.5, k1=0.01, k2=0.03):
    """Straight sliding-window SSIM with a normalized Gaussian window and symmetric padding."""
    radius = window // 2
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2 * sigma_w ** 2))
    kernel /= kernel.sum()
    x_pad = np.pad(x, radius, mode="symmetric")
    t_pad = np.pad(target, radius, mode="symmetric")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    values = []
    for i, j in zip(*np.nonzero(mask)):
        a = x_pad[i:i + window, j:j + window]
        b = t_pad[i:i + window, j:j + window]
        mu_a, mu_b = np.sum(kernel * a), np.sum(kernel * b)
        var_a = np.sum(kernel * a * a) - mu_a ** 2
        var_b = np.sum(kernel * b * b) - mu_b ** 2
        cov = np.sum(kernel * a * b) - mu_a * mu_b
        values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                      / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


def random_pair(seed, shape=(24, 24)):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.0, 5.0, shape)
    return target + rng.normal(0.0, 0.5, shape), target


def test_signal_mask_of_phantom():
    phantom = make_phantom((32, 32), seed=1)
    mask = me.signal_mask(phantom, 0.05)
    raw = torch.abs(phantom).numpy() > 0.5
    assert mask.dtype == bool
    assert np.all(mask[raw])  # closing never removes pixels
    assert not mask[0, 0]
    assert np.count_nonzero(mask) >= np.count_nonzero(raw)


def test_signal_mask_fills_pinholes():
    target = np.ones((9, 9))
    target[4, 4] = 0.0
    assert me.signal_mask(target, 0.5).all()


def test_signal_mask_small_threshold_keeps_all_nonzero():
    target = np.zeros((8, 8))
    target[2:6, 2:6] = np.linspace(0.01, 1.0, 16).reshape(4, 4)
    mask = me.signal_mask(target, 1e-6)
    assert mask[target > 0].all()


def test_signal_mask_errors():
    with pytest.raises(ValueError):
        me.signal_mask(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        me.signal_mask(np.ones((4, 4)), 1.0)


def test_psnr_identical_images_are_capped():
    _, target = random_pair(0)
    mask = np.ones(target.shape, dtype=bool)
    assert me.psnr_masked(target, target, mask) == 200.0
    assert me.psnr_masked(target, target, mask, cap=99.0) == 99.0


def test_psnr_closed_form():
    _, target = random_pair(1)
    mask = me.signal_mask(target, 0.05)
    peak = target[mask].max()
    assert me.psnr_masked(target + 0.5, target, mask) == pytest.approx(
        20.0 * math.log10(peak / 0.5), abs=1e-10)


def test_psnr_matches_straight_computation():
    x, target = random_pair(2)
    mask = np.zeros(target.shape, dtype=bool)
    mask[3:20, 5:18] = True
    error = np.abs(x)[mask] - target[mask]
    expected = 10.0 * math.log10(target[mask].max() ** 2 / np.mean(error ** 2))
    assert abs(me.psnr_masked(x, target, mask) - expected) <= 1e-10


def test_psnr_decreases_with_noise():
    _, target = random_pair(3)
    mask = np.ones(target.shape, dtype=bool)
    noise = np.random.default_rng(4).normal(size=target.shape)
    values = [me.psnr_masked(target + level * noise, target, mask) for level in (0.1, 0.2, 0.4)]
    assert values[0] > values[1] > values[2]


def test_ssim_identical_images():
    _, target = random_pair(5)
    mask = me.signal_mask(target, 0.05)
    assert me.ssim_masked(target, target, mask) == 1.0


def test_ssim_of_zero_image_is_small():
    _, target = random_pair(6)
    mask = np.ones(target.shape, dtype=bool)
    assert me.ssim_masked(np.zeros(target.shape), target, mask) <= 0.2


def test_ssim_matches_sliding_window_reference():
    for seed in range(3):
        x, target = random_pair(seed)
        mask = np.zeros(target.shape, dtype=bool)
        mask[2:22, 4:20] = True
        data_range = float(target[mask].max())
        expected = reference_ssim(np.abs(x), target, mask, data_range)
        assert abs(me.ssim_masked(x, target, mask) - expected) <= 1e-8


def test_ssim_is_symmetric_with_fixed_range():
    x, target = random_pair(7)
    mask = np.ones(target.shape, dtype=bool)
    forward = me.ssim_masked(x, target, mask, data_range=5.0)
    backward = me.ssim_masked(target, x, mask, data_range=5.0)
    assert abs(forward - backward) <= 1e-12


def test_metrics_ignore_values_outside_mask():
    x, target = random_pair(8)
    mask = np.zeros(target.shape, dtype=bool)
    mask[6:18, 6:18] = True
    changed = x.copy()
    changed[0, :] = 100.0
    assert me.psnr_masked(changed, target, mask) == me.psnr_masked(x, target, mask)
    assert me.ssim_masked(changed, target, mask) == me.ssim_masked(x, target, mask)


def test_metrics_on_complex_tensors():
    phantom = make_phantom((32, 32), seed=9)
    report = me.evaluate_pair(phantom * cmath.exp(0.7j), phantom,
                              me.MetricConfig())
    assert report.psnr == 200.0
    assert report.ssim == pytest.approx(1.0, abs=1e-12)
    assert report.mask_pixels == int(np.count_nonzero(me.signal_mask(phantom)))


def test_mask_validation():
    x, target = random_pair(10)
    with pytest.raises(ValueError):
        me.psnr_masked(x, target, np.zeros(target.shape, dtype=bool))
    with pytest.raises(ValueError):
        me.ssim_masked(x, target, np.ones((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        me.ssim_masked(x[:8, :8], target[:8, :8], np.ones((8, 8), dtype=bool))
    with pytest.raises(ValueError):
        me.MetricConfig(window=10)


def test_summarize():
    rows = pd.DataFrame({"sample_id": ["a", "b", "a", "b"],
                         "method": ["zero-filled", "zero-filled", "cdl-Lambda", "cdl-Lambda"],
                         "sigma": [0.15] * 4,
                         "psnr": [20.0, 22.0, 30.0, 34.0],
                         "ssim": [0.5, 0.7, 0.9, 0.8]})
    summary = me.summarize(rows)
    assert list(summary.columns) == ["method", "sigma", "psnr_mean", "psnr_median", "psnr_std",
                                     "ssim_mean", "ssim_median", "ssim_std"]
    best = summary.set_index("method").loc["cdl-Lambda"]
    assert best["psnr_mean"] == 32.0
    assert best["ssim_median"] == pytest.approx(0.85)
