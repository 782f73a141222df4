"""Image quality metrics (PSNR, SSIM, masked-region variants) and the
hue-based edit-success oracle."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import PALETTE
from .errors import ShapeMismatchError

PSNR_CAP_DB = 99.0  # sentinel for (near-)identical images


def _to_array(x) -> np.ndarray:
    arr = np.asarray(x.detach().cpu().numpy() if hasattr(x, "detach") else x, dtype=np.float64)
    return arr


def psnr(a, b, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at the 99 dB sentinel."""
    a, b = _to_array(a), _to_array(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range ** 2 / mse))


def masked_psnr(a, b, region, data_range: float = 2.0) -> float:
    """PSNR over the pixels selected by a boolean region (e.g. the complement
    of an edit mask)."""
    a, b = _to_array(a), _to_array(b)
    region = np.asarray(_to_array(region), dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if region.shape != a.shape[-2:]:
        raise ShapeMismatchError(f"region {region.shape} does not match image {a.shape}")
    if not region.any():
        raise ValueError("region is empty")
    diff = (a - b) ** 2
    mse = float(diff[..., region].mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range ** 2 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter2d_valid(img: np.ndarray, kernel1d: np.ndarray) -> np.ndarray:
    # separable valid-mode convolution, rows then columns
    n = len(kernel1d)
    rows = np.apply_along_axis(lambda r: np.convolve(r, kernel1d, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel1d, mode="valid"), 0, rows)


def _ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    kernel = _gaussian_kernel()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter2d_valid(a, kernel)
    mu_b = _filter2d_valid(b, kernel)
    var_a = _filter2d_valid(a * a, kernel) - mu_a ** 2
    var_b = _filter2d_valid(b * b, kernel) - mu_b ** 2
    cov = _filter2d_valid(a * b, kernel) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
           ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 2.0, region: Optional[np.ndarray] = None) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Channel maps are averaged. ``region`` restricts the mean of the SSIM map
    to a boolean pixel subset (cropped to the valid convolution window).
    """
    a, b = _to_array(a), _to_array(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    pad = (11 - 1) // 2
    maps = [_ssim_map(a[c], b[c], data_range) for c in range(a.shape[0])]
    smap = np.mean(maps, axis=0)
    if region is None:
        return float(smap.mean())
    region = np.asarray(_to_array(region), dtype=bool)
    if region.shape != a.shape[-2:]:
        raise ShapeMismatchError(f"region {region.shape} does not match image {a.shape}")
    inner = region[pad:-pad, pad:-pad]
    if not inner.any():
        raise ValueError("region is empty inside the valid SSIM window")
    return float(smap[inner].mean())


def rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue in degrees [0, 360) for an (..., 3) array of RGB values in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    hue = np.zeros_like(mx)
    nz = delta > 1e-12
    rmax = nz & (mx == r)
    gmax = nz & (mx == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    hue[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
    hue[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
    hue[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    return hue * 60.0


PALETTE_HUES = {name: float(rgb_to_hue(np.asarray(rgb, dtype=np.float64)))
                for name, rgb in PALETTE.items()}


def circular_hue_distance(h1: float, h2: float) -> float:
    d = abs(h1 - h2) % 360.0
    return min(d, 360.0 - d)


def region_mean_hue(image, region) -> float:
    """Circular mean hue of the pixels in the region; image (3,H,W) in [-1,1]."""
    img = _to_array(image)
    region = np.asarray(_to_array(region), dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    rgb01 = np.clip((img.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
    hues = np.deg2rad(rgb_to_hue(rgb01[region]))
    mean = math.atan2(np.sin(hues).mean(), np.cos(hues).mean())
    return math.degrees(mean) % 360.0


def edit_success(edited, region, target_color: str) -> bool:
    """True when the mean hue of the edited region is nearest to the target
    palette color under circular hue distance."""
    if target_color not in PALETTE_HUES:
        raise ValueError(f"unknown palette color {target_color!r}")
    hue = region_mean_hue(edited, region)
    nearest = min(PALETTE_HUES, key=lambda name: circular_hue_distance(hue, PALETTE_HUES[name]))
    return nearest == target_color


@dataclass(frozen=True)
class MetricsReport:
    psnr_db: float
    ssim_value: float
    background_psnr_db: Optional[float] = None      # complement of the annotated region
    background_ssim: Optional[float] = None
    mask_complement_psnr_db: Optional[float] = None  # complement of the run's edit mask
    edit_ok: Optional[bool] = None
    run_id: str = ""
    case_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.psnr_db < 0:
            raise ValueError("PSNR must be non-negative")
        if not -1.0 <= self.ssim_value <= 1.0:
            raise ValueError("SSIM must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)
