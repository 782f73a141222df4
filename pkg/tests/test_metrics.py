import math

import numpy as np
import pytest
import torch

from rfedit.data import PALETTE
from rfedit.metrics import (PALETTE_HUES, MetricsReport, circular_hue_distance,
                            edit_success, masked_psnr, psnr, region_mean_hue,
                            rgb_to_hue, ssim)


def checker_images(seed=0):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(3, 32, 32, generator=g) * 2 - 1
    b = torch.clamp(a + torch.randn(3, 32, 32, generator=g) * 0.1, -1, 1)
    return a, b


# --- psnr ----------------------------------------------------------------------

def test_psnr_identical_sentinel():
    a = torch.rand(3, 16, 16)
    assert psnr(a, a) == 99.0


def test_psnr_closed_form():
    a = torch.zeros(3, 16, 16, dtype=torch.float64)
    b = torch.full((3, 16, 16), 0.1, dtype=torch.float64)
    # MSE = 0.01 on range 2: 10 log10(4 / 0.01) = 26.0206
    assert psnr(a, b) == pytest.approx(10 * math.log10(4 / 0.1 ** 2), abs=1e-9)


def test_psnr_symmetric():
    a, b = checker_images()
    assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)


def test_masked_psnr_scores_only_region():
    a = torch.zeros(3, 8, 8, dtype=torch.float64)
    b = torch.zeros(3, 8, 8, dtype=torch.float64)
    b[:, :4, :] = 0.2  # damage only the top half
    top = torch.zeros(8, 8, dtype=torch.bool)
    top[:4, :] = True
    assert masked_psnr(a, b, ~top) == 99.0
    assert masked_psnr(a, b, top) == pytest.approx(10 * math.log10(4 / 0.2 ** 2), abs=1e-9)


def test_masked_psnr_empty_region_errors():
    a = torch.zeros(3, 8, 8)
    with pytest.raises(ValueError):
        masked_psnr(a, a, torch.zeros(8, 8, dtype=torch.bool))


# --- ssim ----------------------------------------------------------------------

def test_ssim_identical_is_one():
    a, _ = checker_images()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric():
    a, b = checker_images(1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_in_range_and_sensitive():
    a, b = checker_images(2)
    val = ssim(a, b)
    assert -1.0 <= val < 1.0


def test_ssim_matches_skimage_oracle():
    skimage = pytest.importorskip("skimage.metrics")
    a, b = checker_images(3)
    ours = ssim(a, b)
    theirs = np.mean([
        skimage.structural_similarity(
            a[c].numpy().astype(np.float64), b[c].numpy().astype(np.float64),
            gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
            data_range=2.0)
        for c in range(3)])
    assert ours == pytest.approx(theirs, abs=1e-7)


def test_masked_ssim_empty_region_errors():
    a, _ = checker_images()
    with pytest.raises(ValueError):
        ssim(a, a, region=np.zeros((32, 32), dtype=bool))


# --- hue and edit success ---------------------------------------------------------

def test_palette_hues_distinct():
    hues = sorted(PALETTE_HUES.values())
    gaps = [circular_hue_distance(h1, h2) for h1, h2 in zip(hues, hues[1:])]
    assert min(gaps) >= 25.0


def test_rgb_to_hue_primaries():
    assert rgb_to_hue(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0)
    assert rgb_to_hue(np.array([0.0, 1.0, 0.0])) == pytest.approx(120.0)
    assert rgb_to_hue(np.array([0.0, 0.0, 1.0])) == pytest.approx(240.0)


def test_edit_success_painted_target():
    region = torch.zeros(16, 16, dtype=torch.bool)
    region[4:12, 4:12] = True
    for color, rgb in PALETTE.items():
        img = torch.full((3, 16, 16), -0.9)
        for c in range(3):
            img[c][region] = rgb[c] * 2 - 1
        assert edit_success(img, region, color)


def test_edit_success_wrong_color_fails():
    region = torch.ones(8, 8, dtype=torch.bool)
    img = torch.zeros(3, 8, 8)
    img[0] = 1.0  # pure red
    img[1] = -1.0
    img[2] = -1.0
    assert edit_success(img, region, "red")
    assert not edit_success(img, region, "blue")


def test_edit_success_unedited_source_fails():
    region = torch.ones(8, 8, dtype=torch.bool)
    img = torch.zeros(3, 8, 8)
    img[2] = 1.0  # blue source, green target
    img[0] = -1.0
    img[1] = -1.0
    assert not edit_success(img, region, "green")


def test_region_mean_hue_circular():
    # hues straddling the 0/360 wrap: 350 and 10 average to 0, not 180
    img = torch.zeros(3, 1, 2)
    img[:, 0, 0] = torch.tensor([1.0, -1.0, -0.666])   # ~ hue 350
    img[:, 0, 1] = torch.tensor([1.0, -0.666, -1.0])   # ~ hue 10
    hue = region_mean_hue(img, torch.ones(1, 2, dtype=torch.bool))
    assert circular_hue_distance(hue, 0.0) < 5.0


# --- report record -------------------------------------------------------------------

def test_metrics_report_validation():
    MetricsReport(psnr_db=30.0, ssim_value=0.9)
    with pytest.raises(ValueError):
        MetricsReport(psnr_db=-1.0, ssim_value=0.9)
    with pytest.raises(ValueError):
        MetricsReport(psnr_db=30.0, ssim_value=1.5)
