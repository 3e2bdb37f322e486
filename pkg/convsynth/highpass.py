"""This module splits an image into a smooth component and a detail component.

   The low-pass part solves min_X 1/2 ||X - X_0||^2 + beta/2 ||grad X||^2, i.e. the linear system
   (I + beta grad^T grad) X = X_0, with conjugate gradients; the high-pass part is the remainder.
   Gradients are periodic forward differences, matching the circular convolutions of the
   dictionary.
"""
import dataclasses
import logging
import typing
import torch
import torch.nn.functional as F
import convsynth.core as co
import convsynth.operators as op
import convsynth.solvers as so


@dataclasses.dataclass(frozen=True)
class HighpassConfig:
    """beta is the initial (or fixed) smoothing weight; cg_iters and cg_tol bound the solve."""
    beta: float = 1.0
    cg_iters: int = 50
    cg_tol: float = 1e-10

    def __post_init__(self):
        if not (self.beta >= 0 and self.beta != float("inf")):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.cg_iters < 1 or not self.cg_tol > 0:
            raise ValueError("cg_iters must be >= 1 and cg_tol positive")


class LowpassSplit(typing.NamedTuple):
    """Output of lowpass_split; low + high equals the input exactly."""
    low: torch.Tensor
    high: torch.Tensor
    residual: float
    converged: bool


def grad(x: torch.Tensor) -> tuple:
    """Takes an image and returns its periodic forward differences (horizontal, vertical).

       :parameter x: ComplexImage (h, w), both dimensions >= 2
       :type x: torch.Tensor

       :return: (x[i, j+1] - x[i, j], x[i+1, j] - x[i, j]) with indices taken modulo the size
       :rtype: tuple
    """
    co.check_image(x)
    if x.shape[-1] < 2 and x.shape[-2] < 2:
        raise ValueError(f"gradient needs at least one axis of length >= 2, got {tuple(x.shape)}")
    horizontal = torch.roll(x, shifts=-1, dims=-1) - x
    vertical = torch.roll(x, shifts=-1, dims=-2) - x
    return horizontal, vertical


def div(horizontal: torch.Tensor, vertical: torch.Tensor) -> torch.Tensor:
    """Periodic backward-difference divergence, the negative adjoint of grad."""
    co.check_same_shape(horizontal, vertical, "gradient components")
    return (horizontal - torch.roll(horizontal, shifts=1, dims=-1)
            + vertical - torch.roll(vertical, shifts=1, dims=-2))


def laplacian_normal(x: torch.Tensor) -> torch.Tensor:
    """grad^T grad x = -div(grad x)."""
    return -div(*grad(x))


def softplus(raw: torch.Tensor) -> torch.Tensor:
    """Strictly positive activation of an unconstrained scalar."""
    return F.softplus(raw)


def inverse_softplus(value: float) -> float:
    """Raw scalar whose softplus equals value (> 0)."""
    if not value > 0:
        raise ValueError(f"softplus only reaches positive values, got {value}")
    return float(torch.log(torch.expm1(torch.tensor(value, dtype=co.REAL))))


def lowpass_split(x0: torch.Tensor, cfg: HighpassConfig = HighpassConfig(),
                  beta: typing.Optional[torch.Tensor] = None) -> LowpassSplit:
    """Computes X_low by CG on (I + beta grad^T grad) X = X_0 and X_high = X_0 - X_low.

       :parameter x0: Input image (h, w)
       :type x0: torch.Tensor
       :parameter cfg: CG settings and the default beta
       :type cfg: HighpassConfig, optional
       :parameter beta: Smoothing weight overriding cfg.beta, may require grad
       :type beta: torch.Tensor or float, optional

       :return: low, high, the achieved relative CG residual and the converged flag
       :rtype: LowpassSplit
    """
    weight = cfg.beta if beta is None else beta
    if not bool(torch.as_tensor(weight).detach() >= 0):
        raise ValueError(f"beta must be >= 0, got {weight}")
    result = so.cg_solve(lambda x: x + weight * laplacian_normal(x), x0, cfg.cg_iters,
                         cfg.cg_tol)
    if not result.converged:
        logging.warning("low-pass CG residual %s above tolerance %s", result.residual, cfg.cg_tol)
    low = result.solution
    return LowpassSplit(low, x0 - low, result.residual, result.converged)


def residual_data(y: torch.Tensor, x_low: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Returns Y' = Y - A X_low, the data left for the dictionary to explain."""
    co.check_same_shape(y, x_low, "data and low-pass image")
    return y - op.forward_A(x_low, mask)
