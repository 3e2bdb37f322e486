"""This module contains the weighted-l1 proximal operator, the convergent FISTA variant used for the
   sparse coding problem min_s 1/2 ||B s - y||^2 + ||Lambda s||_1, plain ISTA for comparison and a
   conjugate gradient solver.

   Every solver is written with differentiable torch operations so that the training module can
   backpropagate through a fixed number of iterations.
"""
import dataclasses
import logging
import math
import typing
import torch
import convsynth.core as co
import convsynth.operators as op

THRESHOLD_MODES = ("modulus", "componentwise")


@dataclasses.dataclass(frozen=True)
class FistaConfig:
    """Settings of the unrolled FISTA solver.

       ``tau = None`` derives the step size ``step_safety / ||B||^2`` from a power-iteration
       estimate with at most ``power_iters`` iterations and relative tolerance ``power_tol``.
    """
    iters: int = 64
    tau: typing.Optional[float] = None
    momentum_a: float = 3.0
    threshold_mode: str = "modulus"
    power_iters: int = 500
    power_tol: float = 1e-6
    step_safety: float = 0.99
    check_every: int = 1

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"FISTA needs iters >= 1, got {self.iters}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f"step size tau must be positive, got {self.tau}")
        if not self.momentum_a > 2:
            raise ValueError(f"momentum parameter a must exceed 2, got {self.momentum_a}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if not 0 < self.step_safety <= 1:
            raise ValueError(f"step_safety must lie in (0, 1], got {self.step_safety}")
        if self.power_iters < 1 or self.check_every < 1:
            raise ValueError("power_iters and check_every must be >= 1")


@dataclasses.dataclass
class FistaTrace:
    """Result of a FISTA run: final codes, the step size used and the objective per iterate
       (T + 1 values including the start point, None when tracking was disabled)."""
    codes: torch.Tensor
    tau: float
    objective: typing.Optional[list] = None


@dataclasses.dataclass
class CgResult:
    """Result of cg_solve."""
    solution: torch.Tensor
    residual: float
    converged: bool
    iterations: int
    residual_history: list


def check_lambda_maps(lam: torch.Tensor, bound: typing.Optional[float] = None):
    """Raises ValueError unless lam is a strictly positive (K, h, w) stack, optionally <= bound."""
    if lam.dim() != 3:
        raise ValueError(f"Lambda-maps must have shape (K, h, w), got {tuple(lam.shape)}")
    if not bool((lam > 0).all()):
        raise ValueError("Lambda-maps must be strictly positive")
    if bound is not None and not bool((lam <= bound).all()):
        raise ValueError(f"Lambda-maps exceed the upper bound {bound}")


def weighted_soft_threshold(z: torch.Tensor, lam: torch.Tensor, tau: float,
                            mode: str = "modulus") -> torch.Tensor:
    """Proximal map of tau * ||Lambda .||_1 applied entrywise to feature maps.

       With theta = tau * Lambda_k[j], mode "modulus" shrinks the complex modulus,
       z * max(1 - theta / |z|, 0), and keeps the phase; mode "componentwise" soft-thresholds the
       real and imaginary parts independently. At |z| = theta the zero branch is taken, which also
       fixes the derivative there to 0.

       :parameter z: FeatureMaps (K, h, w)
       :type z: torch.Tensor
       :parameter lam: LambdaMaps (K, h, w)
       :type lam: torch.Tensor
       :parameter tau: Positive step size
       :type tau: float
       :parameter mode: "modulus" or "componentwise"
       :type mode: str, optional

       :return: Thresholded feature maps
       :rtype: torch.Tensor
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if lam.shape != z.shape:
        raise ValueError(f"Lambda-maps {tuple(lam.shape)} do not match codes {tuple(z.shape)}")
    theta = tau * lam
    z = z.to(co.COMPLEX)
    if mode == "componentwise":
        def shrink(part):
            return torch.sign(part) * torch.relu(torch.abs(part) - theta)
        return torch.complex(shrink(z.real), shrink(z.imag))
    if mode != "modulus":
        raise ValueError(f"unknown threshold mode {mode!r}")
    squared = z.real ** 2 + z.imag ** 2
    active = squared > theta ** 2
    # sqrt only sees positive values so its derivative stays finite at z = 0
    modulus = torch.sqrt(torch.where(active, squared, torch.ones_like(squared)))
    factor = torch.where(active, 1.0 - theta / modulus, torch.zeros_like(modulus))
    return z * factor


def l1_weighted(s: torch.Tensor, lam: torch.Tensor, mode: str = "modulus") -> torch.Tensor:
    """sum_k sum_j Lambda_k[j] |s_k[j]| with the modulus or |Re| + |Im| as entry norm."""
    if mode == "componentwise":
        return torch.sum(lam * (torch.abs(s.real) + torch.abs(s.imag)))
    return torch.sum(lam * torch.abs(s))


def objective(s: torch.Tensor, y: torch.Tensor, bank: op.FilterBank, mask: torch.Tensor,
              lam: torch.Tensor, mode: str = "modulus") -> float:
    """Value of 1/2 ||B s - y||^2 + ||Lambda s||_1."""
    with torch.no_grad():
        fit = 0.5 * float(co.norm(op.forward_B(s, bank, mask) - y)) ** 2
        return fit + float(l1_weighted(s, lam, mode))


def step_size(bank: op.FilterBank, mask: torch.Tensor, dims: tuple, cfg: FistaConfig) -> tuple:
    """Returns (tau, norm_sq): the configured tau, or step_safety / ||B||^2 from power iteration."""
    if cfg.tau is not None:
        return cfg.tau, None
    norm_sq, _ = op.op_norm_sq(bank, mask, dims, cfg.power_iters, cfg.power_tol)
    return cfg.step_safety / norm_sq, norm_sq


def _proximal_gradient(y_data, bank, mask, lam, cfg, s0, norm_sq, track_objective, accelerated):
    height, width = y_data.shape
    if lam.shape != (bank.num_filters, height, width):
        raise ValueError(f"Lambda-maps {tuple(lam.shape)} do not match "
                         f"{(bank.num_filters, height, width)}")
    mask = op.check_mask(mask, y_data.shape)
    if cfg.tau is None:
        if norm_sq is None:
            tau, norm_sq = step_size(bank, mask, (height, width), cfg)
        else:
            tau = cfg.step_safety / norm_sq
    else:
        tau = cfg.tau
        if norm_sq is not None and tau > (1.0 + 1e-12) / norm_sq:
            raise ValueError(f"step size {tau} violates tau <= 1/||B||^2 = {1.0 / norm_sq}")
    if s0 is None:
        s0 = torch.zeros((bank.num_filters, height, width), dtype=co.COMPLEX)
    elif s0.shape != (bank.num_filters, height, width):
        raise ValueError(f"initial codes {tuple(s0.shape)} do not match "
                         f"{(bank.num_filters, height, width)}")

    def momentum(n):
        return (n + cfg.momentum_a - 1.0) / cfg.momentum_a

    history = [objective(s0, y_data, bank, mask, lam, cfg.threshold_mode)] \
        if track_objective else None
    codes = s0.to(co.COMPLEX)
    previous = codes
    for n in range(1, cfg.iters + 1):
        if accelerated:
            extrapolated = codes + ((momentum(n) - 1.0) / momentum(n + 1)) * (codes - previous)
        else:
            extrapolated = codes
        residual = op.forward_B(extrapolated, bank, mask) - y_data
        gradient_step = extrapolated - tau * op.adjoint_B(residual, bank, mask)
        previous = codes
        codes = weighted_soft_threshold(gradient_step, lam, tau, cfg.threshold_mode)
        if n % cfg.check_every == 0 or n == cfg.iters:
            if not bool(torch.isfinite(codes).all()):
                logging.error("FISTA produced non-finite codes at iteration %s", n)
                raise co.NumericalError(f"non-finite codes at FISTA iteration {n} "
                                        f"(tau={tau})")
        if track_objective:
            history.append(objective(codes, y_data, bank, mask, lam, cfg.threshold_mode))
    return FistaTrace(codes=codes, tau=tau, objective=history)


def fista_solve(y_data: torch.Tensor, bank: op.FilterBank, mask: torch.Tensor, lam: torch.Tensor,
                cfg: FistaConfig = FistaConfig(), s0: typing.Optional[torch.Tensor] = None,
                norm_sq: typing.Optional[float] = None,
                track_objective: bool = True) -> FistaTrace:
    """Runs cfg.iters iterations of FISTA with the momentum t_n = (n + a - 1) / a.

       Each iteration extrapolates z = s_n + (t_n - 1) / t_{n+1} (s_n - s_{n-1}), takes the
       gradient step z - tau B^H (B z - y) and applies weighted_soft_threshold. When a norm
       estimate is supplied together with an explicit tau the step-size condition is checked.

       :parameter y_data: k-space data (h, w)
       :type y_data: torch.Tensor
       :parameter bank: The dictionary
       :type bank: FilterBank
       :parameter mask: SamplingMask
       :type mask: torch.Tensor
       :parameter lam: LambdaMaps (K, h, w)
       :type lam: torch.Tensor
       :parameter cfg: Solver settings
       :type cfg: FistaConfig, optional
       :parameter s0: Initial codes, zeros if omitted
       :type s0: torch.Tensor, optional
       :parameter norm_sq: Known estimate of ||B||^2
       :type norm_sq: float, optional
       :parameter track_objective: Record the objective at every iterate
       :type track_objective: bool, optional

       :return: Final codes, step size and objective trace
       :rtype: FistaTrace

       :raise ValueError: Step-size violation or dimension mismatch
       :raise NumericalError: Non-finite iterate
    """
    return _proximal_gradient(y_data, bank, mask, lam, cfg, s0, norm_sq, track_objective, True)


def ista_solve(y_data: torch.Tensor, bank: op.FilterBank, mask: torch.Tensor, lam: torch.Tensor,
               cfg: FistaConfig = FistaConfig(), s0: typing.Optional[torch.Tensor] = None,
               norm_sq: typing.Optional[float] = None,
               track_objective: bool = True) -> FistaTrace:
    """Plain proximal gradient descent (no extrapolation) with the interface of fista_solve."""
    return _proximal_gradient(y_data, bank, mask, lam, cfg, s0, norm_sq, track_objective, False)


def cg_solve(apply_M: typing.Callable, b: torch.Tensor, iters: int = 50,
             tol: float = 1e-10) -> CgResult:
    """Solves M x = b for a symmetric positive definite M by conjugate gradients from x = 0.

       Complex tensors are treated as vectors of R^{2N}, so M only has to be self-adjoint for the
       real inner product Re<x, y>. The loop stops at relative residual ||b - M x|| / ||b|| <= tol
       or after iters iterations; the returned solution stays differentiable with respect to
       anything M and b depend on.

       :parameter apply_M: The SPD map
       :type apply_M: Callable
       :parameter b: Right-hand side
       :type b: torch.Tensor
       :parameter iters: Maximum number of iterations, must be >= 1
       :type iters: int, optional
       :parameter tol: Relative residual tolerance
       :type tol: float, optional

       :return: Solution, achieved relative residual, converged flag and residual history
       :rtype: CgResult
    """
    if iters < 1:
        raise ValueError(f"CG needs iters >= 1, got {iters}")
    co.check_finite(b, "cg_solve right-hand side")
    x = torch.zeros_like(b)
    b_norm = float(co.norm(b))
    if b_norm == 0.0:
        return CgResult(x, 0.0, True, 0, [0.0])
    r = b
    p = r
    rr = co.real_inner(r, r)
    history = [1.0]
    converged = False
    iteration = 0
    for iteration in range(1, iters + 1):
        mp = apply_M(p)
        alpha = rr / co.real_inner(p, mp)
        x = x + alpha * p
        r = r - alpha * mp
        rr_new = co.real_inner(r, r)
        relative = float(torch.sqrt(rr_new.detach())) / b_norm
        if not math.isfinite(relative):
            logging.error("CG diverged at iteration %s", iteration)
            raise co.NumericalError(f"non-finite residual at CG iteration {iteration}")
        history.append(relative)
        if relative <= tol:
            converged = True
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not converged:
        logging.warning("CG stopped after %s iterations at relative residual %s",
                        iteration, history[-1])
    return CgResult(x, history[-1], converged, iteration, history)
