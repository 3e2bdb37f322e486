"""This module simulates single-coil low-field MRI acquisitions of synthetic phantoms.

   k-space convention: the FFT output is kept in the unshifted layout with DC at index (0, 0).
   Masks are designed in the centered (fftshifted) layout, where the low frequencies form a block
   in the middle of the array, and converted back with ``ifftshift`` before use, so that
   ``forward_A`` can multiply the plain FFT output by the mask.
"""
import dataclasses
import logging
import math
import numpy as np
import torch
import convsynth.core as co
import convsynth.operators as op

NOISE_LEVELS = (0.075, 0.15, 0.3)
PHANTOM_PEAK = 10.0
MASK_KINDS = ("centered_lowfreq",)


@dataclasses.dataclass(frozen=True)
class AcquisitionSpec:
    """Noise level, retained k-space fraction and seed of one simulated acquisition."""
    sigma: float = 0.15
    keep_fraction: float = 0.25
    mask_kind: str = "centered_lowfreq"
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.mask_kind not in MASK_KINDS:
            raise ValueError(f"mask_kind must be one of {MASK_KINDS}")


@dataclasses.dataclass(frozen=True)
class SimulateConfig:
    """Dataset generation settings; samples cycle through the listed sigmas."""
    image_size: tuple = (64, 64)
    num_ellipses: int = 6
    train_size: int = 64
    val_size: int = 16
    test_size: int = 16
    sigmas: tuple = (0.15,)
    keep_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "sigmas", tuple(self.sigmas))
        if len(self.image_size) != 2 or min(self.image_size) < 4:
            raise ValueError(f"image_size must be two sides >= 4, got {self.image_size}")
        if self.num_ellipses < 1:
            raise ValueError("num_ellipses must be >= 1")
        if min(self.train_size, self.val_size, self.test_size) < 0:
            raise ValueError("split sizes must be >= 0")
        if not self.sigmas or min(self.sigmas) < 0:
            raise ValueError("sigmas must be a nonempty list of values >= 0")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")

    def splits(self) -> dict:
        """Split name -> number of samples."""
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}


def make_lowfreq_mask(dims: tuple, keep_fraction: float) -> torch.Tensor:
    """Retains a centered rectangle of k-space covering about keep_fraction of the grid.

       Each side keeps round(n * sqrt(keep_fraction)) indices (at least one), centered in the
       fftshifted layout; the result is returned in the unshifted FFT layout.

       :parameter dims: Image size (h, w)
       :type dims: tuple
       :parameter keep_fraction: Retained fraction in (0, 1]
       :type keep_fraction: float

       :return: SamplingMask (h, w)
       :rtype: torch.Tensor
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    height, width = dims
    side = math.sqrt(keep_fraction)
    rows = min(height, max(1, round(height * side)))
    cols = min(width, max(1, round(width * side)))
    centered = np.zeros((height, width), dtype=bool)
    top, left = (height - rows) // 2, (width - cols) // 2
    centered[top:top + rows, left:left + cols] = True
    logging.debug("low-frequency mask keeps %s x %s of %s x %s", rows, cols, height, width)
    return op.check_mask(torch.from_numpy(np.fft.ifftshift(centered)))


def add_noise(y: torch.Tensor, sigma: float, seed: int = 0, mask=None) -> torch.Tensor:
    """Adds i.i.d. complex Gaussian noise with N(0, sigma^2) real and imaginary parts.

       :parameter y: k-space data
       :type y: torch.Tensor
       :parameter sigma: Standard deviation per real component, >= 0
       :type sigma: float
       :parameter seed: Seed of the noise generator
       :type seed: int, optional
       :parameter mask: If given, noise is only added on retained entries
       :type mask: torch.Tensor, optional

       :return: Noisy data
       :rtype: torch.Tensor
    """
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return y.clone()
    generator = torch.Generator().manual_seed(seed)
    noise = sigma * torch.complex(torch.randn(y.shape, generator=generator, dtype=co.REAL),
                                  torch.randn(y.shape, generator=generator, dtype=co.REAL))
    if mask is not None:
        noise = noise * op.check_mask(mask, y.shape)
    return y + noise


def make_phantom(dims: tuple, num_ellipses: int = 6, seed: int = 0) -> torch.Tensor:
    """Random piecewise-constant ellipses with complex intensities and a smooth phase ramp.

       The first ellipse is a large 'head' outline; the others are placed inside the image.
       Intensities of overlapping ellipses add up. The magnitude is scaled so that its maximum
       equals 10 and pixels outside all ellipses are exactly zero.

       :parameter dims: Image size (h, w), both >= 4
       :type dims: tuple
       :parameter num_ellipses: Number of ellipses, >= 1
       :type num_ellipses: int, optional
       :parameter seed: Seed of the geometry
       :type seed: int, optional

       :return: ComplexImage (h, w)
       :rtype: torch.Tensor
    """
    height, width = dims
    if min(height, width) < 4:
        raise ValueError(f"phantom needs both sides >= 4, got {dims}")
    if num_ellipses < 1:
        raise ValueError(f"num_ellipses must be >= 1, got {num_ellipses}")
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width),
                             indexing="ij")
    image = np.zeros((height, width), dtype=np.complex128)
    for index in range(num_ellipses):
        if index == 0:
            center = rng.uniform(-0.05, 0.05, size=2)
            axes = rng.uniform(0.65, 0.85, size=2)
        else:
            center = rng.uniform(-0.45, 0.45, size=2)
            axes = rng.uniform(0.08, 0.35, size=2)
        angle = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(0.2, 1.0) * np.exp(1j * rng.uniform(-0.5, 0.5))
        du, dv = rows - center[0], cols - center[1]
        u = du * np.cos(angle) + dv * np.sin(angle)
        v = -du * np.sin(angle) + dv * np.cos(angle)
        image[(u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0] += intensity
    slope = rng.uniform(-0.5, 0.5, size=2)
    image = image * np.exp(1j * (slope[0] * rows + slope[1] * cols))
    peak = np.abs(image).max()
    if peak == 0:
        raise ValueError("phantom ellipses cover no pixel")
    return torch.from_numpy(image * (PHANTOM_PEAK / peak))


def simulate_acquisition(x: torch.Tensor, spec: AcquisitionSpec) -> tuple:
    """Takes an image and returns (y, mask) with y = mask * fft2(x) + masked noise."""
    mask = make_lowfreq_mask(tuple(x.shape), spec.keep_fraction)
    y = add_noise(op.forward_A(x, mask), spec.sigma, spec.seed, mask)
    return y, mask


def snr_db(x: torch.Tensor, estimate: torch.Tensor) -> float:
    """Signal-to-noise ratio 20 log10(||x|| / ||x - estimate||) in dB."""
    error = float(co.norm(x - estimate))
    if error == 0:
        return float("inf")
    return 20.0 * math.log10(float(co.norm(x)) / error)
