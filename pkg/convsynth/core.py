"""This module holds the complex 2D array arithmetic every operator of the reconstruction pipeline
   is built on.

   Images are ``torch`` tensors: a ComplexImage is a ``complex128`` tensor of shape (h, w) and a
   RealImage a ``float64`` tensor of shape (h, w). Stacks of images (feature maps, Lambda-maps)
   carry one extra leading axis. The functions:

   - fft2
   - ifft2
   - inner

   use the unitary normalization so that ``fft2`` and ``ifft2`` are each other's adjoint and
   inverse.
"""
import logging
import torch

COMPLEX = torch.complex128
REAL = torch.float64


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def as_complex(re, im=None) -> torch.Tensor:
    """Takes real (and optionally imaginary) planes and returns a ComplexImage tensor.

       :parameter re: Real plane, any array-like convertible by ``torch.as_tensor``
       :type re: array-like
       :parameter im: Imaginary plane, zeros if omitted
       :type im: array-like, optional

       :return: The complex128 tensor re + i im
       :rtype: torch.Tensor
    """
    re = torch.as_tensor(re, dtype=REAL)
    im = torch.zeros_like(re) if im is None else torch.as_tensor(im, dtype=REAL)
    if re.shape != im.shape:
        raise ValueError(f"real plane {tuple(re.shape)} and imaginary plane "
                         f"{tuple(im.shape)} differ in shape")
    image = torch.complex(re, im)
    check_image(image)
    check_finite(image, "as_complex")
    return image


def check_image(x: torch.Tensor):
    """Raises ValueError unless x has at least two axes and no empty spatial axis."""
    if x.dim() < 2:
        raise ValueError(f"expected an image with at least 2 axes, got shape {tuple(x.shape)}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"image dimensions must be positive, got {tuple(x.shape[-2:])}")


def check_same_shape(x: torch.Tensor, y: torch.Tensor, what: str = "operands"):
    """Raises ValueError when x and y do not share one shape."""
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch between {what}: {tuple(x.shape)} "
                         f"vs {tuple(y.shape)}")


def check_finite(x: torch.Tensor, where: str):
    """Raises NumericalError if x holds NaN or Inf entries.

       :parameter x: Tensor to be checked
       :type x: torch.Tensor
       :parameter where: Name of the computation, used in the diagnostic
       :type where: str
    """
    if not bool(torch.isfinite(x).all()):
        logging.error("non-finite values detected in %s", where)
        raise NumericalError(f"non-finite values detected in {where}")


def fft2(x: torch.Tensor) -> torch.Tensor:
    """Unitary 2D DFT over the last two axes (scaling 1/sqrt(hw)).

       :parameter x: ComplexImage or stack of images
       :type x: torch.Tensor

       :return: The transformed tensor, same shape
       :rtype: torch.Tensor
    """
    check_image(x)
    return torch.fft.fft2(x.to(COMPLEX), norm="ortho")


def ifft2(x: torch.Tensor) -> torch.Tensor:
    """Unitary inverse 2D DFT over the last two axes, the adjoint of fft2."""
    check_image(x)
    return torch.fft.ifft2(x.to(COMPLEX), norm="ortho")


def inner(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Takes two images and returns the sesquilinear inner product sum(conj(x) * y).

       :parameter x: First image (conjugated)
       :type x: torch.Tensor
       :parameter y: Second image
       :type y: torch.Tensor

       :return: Complex scalar tensor
       :rtype: torch.Tensor
    """
    check_same_shape(x, y, "inner product operands")
    return torch.sum(torch.conj(x.to(COMPLEX)) * y.to(COMPLEX))


def real_inner(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Inner product of the underlying real vector space R^{2N}, i.e. Re(inner(x, y))."""
    return inner(x, y).real


def norm(x: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of all entries of x."""
    return torch.linalg.vector_norm(x.reshape(-1))


def to_planes(x: torch.Tensor) -> torch.Tensor:
    """Returns a real view of x with a trailing axis of size 2 holding (re, im)."""
    return torch.view_as_real(x.to(COMPLEX).contiguous())
