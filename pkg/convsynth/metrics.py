"""This module evaluates reconstructions with PSNR and SSIM restricted to the signal region.

   Complex inputs are reduced to magnitude images; the signal region is a binary mask derived
   from the target by thresholding and a 3x3 morphological closing.
"""
import dataclasses
import logging
import math
import typing
import numpy as np
import pandas as pd
import torch
from scipy import ndimage


@dataclasses.dataclass(frozen=True)
class MetricConfig:
    """Masking and SSIM settings (Gaussian window, stabilizing constants) and the PSNR cap."""
    threshold_fraction: float = 0.05
    window: int = 11
    sigma_w: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    psnr_cap: float = 200.0

    def __post_init__(self):
        if not 0 < self.threshold_fraction < 1:
            raise ValueError(f"threshold_fraction must lie in (0, 1), got "
                             f"{self.threshold_fraction}")
        if self.window < 3 or self.window % 2 == 0 or not self.sigma_w > 0:
            raise ValueError("SSIM window must be odd and >= 3 with sigma_w > 0")


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """PSNR in dB, SSIM in [-1, 1] and the number of pixels in the signal mask."""
    psnr: float
    ssim: float
    mask_pixels: int


def magnitude(image) -> np.ndarray:
    """|image| as a float64 numpy array."""
    if isinstance(image, torch.Tensor):
        image = image.detach().numpy()
    return np.abs(np.asarray(image)).astype(np.float64)


def signal_mask(target, threshold_fraction: float = 0.05) -> np.ndarray:
    """Binary mask |target| > threshold_fraction * max|target|, followed by a 3x3 closing.

       The closing only adds pixels (pinholes inside the support); pixels of the thresholded mask
       are never removed.

       :parameter target: Reference image
       :type target: torch.Tensor or numpy.ndarray
       :parameter threshold_fraction: Fraction of the peak in (0, 1)
       :type threshold_fraction: float, optional

       :return: Boolean mask
       :rtype: numpy.ndarray

       :raise ValueError: All-zero target or threshold outside (0, 1)
    """
    if not 0 < threshold_fraction < 1:
        raise ValueError(f"threshold_fraction must lie in (0, 1), got {threshold_fraction}")
    values = magnitude(target)
    peak = values.max()
    if peak == 0:
        raise ValueError("cannot derive a signal mask from an all-zero target")
    raw = values > threshold_fraction * peak
    closed = ndimage.binary_closing(raw, structure=np.ones((3, 3), dtype=bool))
    return raw | closed


def _check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask {mask.shape} does not match images {shape}")
    if not mask.any():
        raise ValueError("metric mask is empty")
    return mask


def psnr_masked(x, target, mask, cap: float = 200.0) -> float:
    """PSNR = 10 log10(peak^2 / MSE) over the masked pixels of the magnitude images.

       peak is max|target| over the mask; identical images return cap instead of infinity.
    """
    recon, reference = magnitude(x), magnitude(target)
    mask = _check_mask(mask, reference.shape)
    mse = float(np.mean((recon[mask] - reference[mask]) ** 2))
    peak = float(reference[mask].max())
    if mse == 0:
        return cap
    if peak == 0:
        return -cap
    return min(cap, 10.0 * math.log10(peak ** 2 / mse))


def ssim_map(x, target, data_range: float, window: int = 11, sigma_w: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM of two real images with a Gaussian window (reflecting borders)."""
    recon, reference = np.asarray(x, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if min(reference.shape) < window:
        raise ValueError(f"images {reference.shape} are smaller than the {window}x{window} "
                         f"SSIM window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    truncate = (window // 2) / sigma_w

    def blur(image):
        return ndimage.gaussian_filter(image, sigma_w, truncate=truncate, mode="reflect")

    mu1, mu2 = blur(recon), blur(reference)
    var1 = blur(recon * recon) - mu1 * mu1
    var2 = blur(reference * reference) - mu2 * mu2
    covariance = blur(recon * reference) - mu1 * mu2
    return ((2 * mu1 * mu2 + c1) * (2 * covariance + c2)) / \
        ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2))


def ssim_masked(x, target, mask, cfg: MetricConfig = MetricConfig(),
                data_range: typing.Optional[float] = None) -> float:
    """Mean local SSIM of the magnitude images over windows centered in the mask.

       :parameter x: Reconstruction
       :type x: torch.Tensor or numpy.ndarray
       :parameter target: Reference image
       :type target: torch.Tensor or numpy.ndarray
       :parameter mask: Signal mask
       :type mask: numpy.ndarray
       :parameter cfg: Window and constants
       :type cfg: MetricConfig, optional
       :parameter data_range: Dynamic range L, max|target| over the mask if omitted
       :type data_range: float, optional

       :return: Mean SSIM
       :rtype: float
    """
    recon, reference = magnitude(x), magnitude(target)
    mask = _check_mask(mask, reference.shape)
    if data_range is None:
        data_range = float(reference[mask].max())
    local = ssim_map(recon, reference, data_range, cfg.window, cfg.sigma_w, cfg.k1, cfg.k2)
    return float(np.mean(local[mask]))


def evaluate_pair(x, target, cfg: MetricConfig = MetricConfig(), mask=None) -> MetricReport:
    """PSNR and SSIM of x against target over the target's signal mask (or a given mask)."""
    if mask is None:
        mask = signal_mask(target, cfg.threshold_fraction)
    report = MetricReport(psnr=psnr_masked(x, target, mask, cfg.psnr_cap),
                          ssim=ssim_masked(x, target, mask, cfg),
                          mask_pixels=int(np.count_nonzero(mask)))
    logging.debug("metric report %s", report)
    return report


def summarize(rows: pd.DataFrame) -> pd.DataFrame:
    """Mean, median and standard deviation of psnr and ssim per method and sigma."""
    summary = rows.groupby(["method", "sigma"], sort=True)[["psnr", "ssim"]] \
        .agg(["mean", "median", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    return summary.reset_index()
