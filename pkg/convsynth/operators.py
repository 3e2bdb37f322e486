"""This module contains the linear operators of the reconstruction problem: the single-coil MRI
   forward model A = S F, the convolutional dictionary D, the composite B = A D, their adjoints
   and spectral norm estimation.

   Conventions:

   - a SamplingMask is a boolean tensor (h, w) in the unshifted FFT layout, DC at index (0, 0);
   - FeatureMaps are complex tensors (K, h, w);
   - convolutions are circular, computed in the Fourier domain with the kernel index
     (k_f // 2, k_f // 2) mapped to the spatial offset (0, 0).
"""
import logging
import typing
import torch
import convsynth.core as co

UNIT_NORM_TOL = 1e-10


class FilterBank:
    """K real k_f x k_f unit-norm filters with their zero-padded spectra cached per image size.

       :parameter filters: Tensor of shape (K, k_f, k_f)
       :type filters: array-like
       :parameter check_norm: Verify the unit-norm invariant, default True
       :type check_norm: bool, optional
    """

    def __init__(self, filters, check_norm: bool = True):
        filters = torch.as_tensor(filters, dtype=co.REAL).detach().clone()
        if filters.dim() != 3 or filters.shape[1] != filters.shape[2]:
            raise ValueError(f"filters must have shape (K, k_f, k_f), got {tuple(filters.shape)}")
        if filters.shape[0] < 1:
            raise ValueError("a filter bank needs at least one filter")
        if filters.shape[1] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {filters.shape[1]}")
        co.check_finite(filters, "FilterBank")
        if check_norm:
            norms = torch.linalg.vector_norm(filters.reshape(filters.shape[0], -1), dim=1)
            if bool((torch.abs(norms - 1.0) > UNIT_NORM_TOL).any()):
                raise ValueError(f"filters must have unit l2 norm, got norms {norms.tolist()}")
        self._filters = filters
        self._spectra = {}

    @property
    def filters(self) -> torch.Tensor:
        """Copy of the (K, k_f, k_f) filter tensor."""
        return self._filters.clone()

    @property
    def num_filters(self) -> int:
        """Number of filters K."""
        return self._filters.shape[0]

    @property
    def kernel_size(self) -> int:
        """Kernel side length k_f."""
        return self._filters.shape[1]

    def spectrum(self, height: int, width: int) -> torch.Tensor:
        """Returns the unnormalized DFT (K, height, width) of the zero-padded, centered kernels."""
        if self.kernel_size > min(height, width):
            raise ValueError(f"kernel size {self.kernel_size} exceeds image size "
                             f"{height}x{width}")
        key = (height, width)
        if key not in self._spectra:
            self._spectra[key] = torch.fft.fft2(pad_kernels(self._filters, height, width))
        return self._spectra[key]


def pad_kernels(kernels: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Zero-pads (..., k_f, k_f) kernels to (..., height, width) with the center moved to (0, 0)."""
    k_f = kernels.shape[-1]
    center = k_f // 2
    padded = torch.zeros(kernels.shape[:-2] + (height, width), dtype=kernels.dtype)
    padded[..., :k_f, :k_f] = kernels
    return torch.roll(padded, shifts=(-center, -center), dims=(-2, -1))


def crop_kernels(planes: torch.Tensor, k_f: int) -> torch.Tensor:
    """Adjoint of pad_kernels: extracts the k_f x k_f support around offset (0, 0)."""
    center = k_f // 2
    return torch.roll(planes, shifts=(center, center), dims=(-2, -1))[..., :k_f, :k_f]


def check_mask(mask: torch.Tensor, shape: typing.Optional[tuple] = None) -> torch.Tensor:
    """Validates a SamplingMask and returns it as a boolean tensor.

       :parameter mask: Boolean plane, True where a k-space coefficient is retained
       :type mask: array-like
       :parameter shape: Spatial shape the mask has to match
       :type shape: tuple, optional

       :raise ValueError: Empty retained set or dimension mismatch
    """
    mask = torch.as_tensor(mask).to(torch.bool)
    if mask.dim() != 2:
        raise ValueError(f"sampling mask must be 2D, got shape {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise ValueError("sampling mask retains no k-space index")
    if shape is not None and tuple(mask.shape) != tuple(shape[-2:]):
        raise ValueError(f"mask {tuple(mask.shape)} does not match image {tuple(shape[-2:])}")
    return mask


def full_mask(height: int, width: int) -> torch.Tensor:
    """Mask retaining every k-space coefficient."""
    return torch.ones((height, width), dtype=torch.bool)


def forward_A(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Applies A = S F: unitary FFT followed by the sampling mask.

       :parameter x: ComplexImage (h, w)
       :type x: torch.Tensor
       :parameter mask: SamplingMask (h, w)
       :type mask: torch.Tensor

       :return: k-space data, exactly zero outside the retained set
       :rtype: torch.Tensor
    """
    mask = check_mask(mask, x.shape)
    return co.fft2(x) * mask


def adjoint_A(y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Applies A^H = F^H S^H, the zero-filled reconstruction of k-space data y."""
    mask = check_mask(mask, y.shape)
    return co.ifft2(y * mask)


def _check_codes(s: torch.Tensor, bank: FilterBank):
    if s.dim() != 3:
        raise ValueError(f"feature maps must have shape (K, h, w), got {tuple(s.shape)}")
    if s.shape[0] != bank.num_filters:
        raise ValueError(f"feature maps have K={s.shape[0]} but the filter bank has "
                         f"K={bank.num_filters}")


def dict_apply(s: torch.Tensor, bank: FilterBank) -> torch.Tensor:
    """Synthesizes D s = sum_k d_k * s_k with circular convolution.

       Filters are real, so the real and imaginary planes of each s_k are convolved with the same
       kernel.

       :parameter s: FeatureMaps (K, h, w)
       :type s: torch.Tensor
       :parameter bank: The dictionary
       :type bank: FilterBank

       :return: ComplexImage (h, w)
       :rtype: torch.Tensor
    """
    _check_codes(s, bank)
    spectra = bank.spectrum(s.shape[-2], s.shape[-1])
    return co.ifft2(torch.sum(spectra * co.fft2(s), dim=0))


def dict_adjoint(x: torch.Tensor, bank: FilterBank) -> torch.Tensor:
    """Applies D^H: circular cross-correlation of x with every filter, giving (K, h, w)."""
    co.check_image(x)
    if x.dim() != 2:
        raise ValueError(f"expected a single image (h, w), got shape {tuple(x.shape)}")
    spectra = bank.spectrum(x.shape[-2], x.shape[-1])
    return co.ifft2(torch.conj(spectra) * co.fft2(x).unsqueeze(0))


def forward_B(s: torch.Tensor, bank: FilterBank, mask: torch.Tensor) -> torch.Tensor:
    """Applies B = A D."""
    return forward_A(dict_apply(s, bank), mask)


def adjoint_B(y: torch.Tensor, bank: FilterBank, mask: torch.Tensor) -> torch.Tensor:
    """Applies B^H = D^H A^H."""
    return dict_adjoint(adjoint_A(y, mask), bank)


def dict_norm_sq(bank: FilterBank, dims: tuple) -> float:
    """Exact squared spectral norm of D: the largest per-frequency energy sum_k |d_k(w)|^2."""
    spectra = bank.spectrum(*dims)
    return float(torch.max(torch.sum(torch.abs(spectra) ** 2, dim=0)))


@torch.no_grad()
def power_iteration(apply_normal: typing.Callable, start: torch.Tensor, iters: int = 500,
                    tol: float = 1e-6) -> tuple:
    """Estimates the largest eigenvalue of a Hermitian positive semi-definite map.

       Iterates v <- M v / ||M v|| and stops when two successive Rayleigh quotients differ by at
       most tol times the current quotient or after iters iterations.

       :parameter apply_normal: The map M, for instance B^H B
       :type apply_normal: Callable
       :parameter start: Nonzero start vector
       :type start: torch.Tensor
       :parameter iters: Maximum number of iterations, must be >= 1
       :type iters: int, optional
       :parameter tol: Relative stopping tolerance on successive Rayleigh quotients
       :type tol: float, optional

       :return: The final Rayleigh quotient and whether the tolerance was met
       :rtype: tuple
    """
    if iters < 1:
        raise ValueError(f"power iteration needs iters >= 1, got {iters}")
    vector = start / co.norm(start)
    estimate = None
    converged = False
    for _ in range(iters):
        image = apply_normal(vector)
        quotient = float(co.real_inner(vector, image))
        co.check_finite(image, "power_iteration")
        if estimate is not None and abs(quotient - estimate) <= tol * abs(quotient):
            estimate = quotient
            converged = True
            break
        estimate = quotient
        image_norm = co.norm(image)
        if float(image_norm) == 0.0:  # start vector in the null space
            converged = True
            break
        vector = image / image_norm
    if not converged:
        logging.warning("power iteration stopped after %s iterations without meeting tol %s",
                        iters, tol)
    logging.debug("power iteration estimate = %s", estimate)
    return estimate, converged


def op_norm_sq(bank: FilterBank, mask: torch.Tensor, dims: tuple, iters: int = 500,
               tol: float = 1e-6, seed: int = 0) -> tuple:
    """Estimates ||B||^2 by power iteration on B^H B from a seeded random start.

       :parameter bank: The dictionary
       :type bank: FilterBank
       :parameter mask: SamplingMask
       :type mask: torch.Tensor
       :parameter dims: Image dimensions (h, w)
       :type dims: tuple
       :parameter iters: Maximum number of iterations, default 500
       :type iters: int, optional
       :parameter tol: Relative tolerance on successive Rayleigh quotients, default 1e-6
       :type tol: float, optional
       :parameter seed: Seed of the start vector
       :type seed: int, optional

       :return: Estimate of ||B||^2 and the converged flag
       :rtype: tuple
    """
    logging.info("estimating the squared norm of B")
    height, width = dims
    mask = check_mask(mask, dims)
    generator = torch.Generator().manual_seed(seed)
    shape = (bank.num_filters, height, width)
    start = torch.complex(torch.randn(shape, generator=generator, dtype=co.REAL),
                          torch.randn(shape, generator=generator, dtype=co.REAL))
    return power_iteration(lambda s: adjoint_B(forward_B(s, bank, mask), bank, mask),
                           start, iters, tol)
