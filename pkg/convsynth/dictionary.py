"""This module pre-trains the unit-norm convolutional filter bank on high-passed training images.

   It minimizes sum_l 1/2 ||x_l - sum_k d_k * s_{k,l}||^2 + lambda sum_{k,l} ||s_{k,l}||_1 subject
   to ||d_k|| = 1 by alternating two blocks: sparse coding of every image with FISTA (csc_step)
   and projected gradient steps on the filters (dict_update). Real and imaginary planes of complex
   training images are coded as separate real samples because the filters are shared between
   them.
"""
import dataclasses
import logging
import typing
import torch
import convsynth.core as co
import convsynth.operators as op
import convsynth.solvers as so

LAMBDA_SCALE = 0.05  # default lambda = LAMBDA_SCALE * max_l ||x_l||_inf


@dataclasses.dataclass(frozen=True)
class CdlConfig:
    """Settings of dictionary pre-training; lambda_pretrain None selects the scale heuristic."""
    num_filters: int = 64
    kernel_size: int = 11
    lambda_pretrain: typing.Optional[float] = None
    outer_iters: int = 10
    csc_iters: int = 50
    dict_iters: int = 10
    num_images: int = 160
    seed: int = 0

    def __post_init__(self):
        if self.num_filters < 1:
            raise ValueError(f"num_filters must be >= 1, got {self.num_filters}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.lambda_pretrain is not None and not self.lambda_pretrain > 0:
            raise ValueError(f"lambda_pretrain must be positive, got {self.lambda_pretrain}")
        if min(self.outer_iters, self.csc_iters, self.dict_iters, self.num_images) < 1:
            raise ValueError("iteration counts and num_images must be >= 1")


@dataclasses.dataclass
class CdlResult:
    """Trained bank, pre-training lambda and one record per outer round."""
    bank: op.FilterBank
    lambda_pretrain: float
    history: list


def project_filters(filters: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Rescales every filter to unit l2 norm; a zero filter is replaced by a fresh random one."""
    filters = filters.clone()
    for k in range(filters.shape[0]):
        filter_norm = float(torch.linalg.vector_norm(filters[k]))
        if filter_norm < 1e-12:
            logging.warning("filter %s vanished, re-randomizing it", k)
            filters[k] = torch.randn(filters[k].shape, generator=generator, dtype=co.REAL)
            filter_norm = float(torch.linalg.vector_norm(filters[k]))
        filters[k] = filters[k] / filter_norm
    return filters


def random_bank(num_filters: int, kernel_size: int, seed: int = 0) -> op.FilterBank:
    """Seeded Gaussian filters projected to the unit sphere."""
    generator = torch.Generator().manual_seed(seed)
    filters = torch.randn((num_filters, kernel_size, kernel_size), generator=generator,
                          dtype=co.REAL)
    return op.FilterBank(project_filters(filters, generator))


def csc_step(x_high: torch.Tensor, bank: op.FilterBank, lam: float, iters: int,
             s0: typing.Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sparse codes of one image: min_s 1/2 ||D s - x||^2 + lam ||s||_1 by FISTA.

       This is the weighted problem with A = identity and uniform Lambda = lam; the step size
       uses the exact norm of D.

       :parameter x_high: Image to be approximated (h, w)
       :type x_high: torch.Tensor
       :parameter bank: Current dictionary
       :type bank: FilterBank
       :parameter lam: Positive sparsity weight
       :type lam: float
       :parameter iters: Number of FISTA iterations
       :type iters: int
       :parameter s0: Warm start
       :type s0: torch.Tensor, optional

       :return: FeatureMaps (K, h, w)
       :rtype: torch.Tensor
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    dims = tuple(x_high.shape)
    mask = op.full_mask(*dims)
    y_data = op.forward_A(x_high, mask)
    lam_maps = torch.full((bank.num_filters,) + dims, float(lam), dtype=co.REAL)
    norm_sq = op.dict_norm_sq(bank, dims)
    cfg = so.FistaConfig(iters=iters)
    with torch.no_grad():
        trace = so.fista_solve(y_data, bank, mask, lam_maps, cfg, s0=s0, norm_sq=norm_sq,
                               track_objective=False)
    return trace.codes


def fit_objective(images: list, codes: list, bank: op.FilterBank) -> float:
    """sum_l 1/2 ||x_l - D s_l||^2."""
    with torch.no_grad():
        return sum(0.5 * float(co.norm(x - op.dict_apply(s, bank))) ** 2
                   for x, s in zip(images, codes))


def cdl_objective(images: list, codes: list, bank: op.FilterBank, lam: float) -> float:
    """Pre-training objective: fit plus lam times the l1 norm of all codes."""
    sparsity = sum(float(torch.sum(torch.abs(s))) for s in codes)
    return fit_objective(images, codes, bank) + lam * sparsity


def _synthesize(kernels: torch.Tensor, codes: list) -> list:
    bank = op.FilterBank(kernels, check_norm=False)
    return [op.dict_apply(s, bank) for s in codes]


def _correlate(residuals: list, codes: list, kernel_size: int) -> torch.Tensor:
    """sum_l Re(cross-correlation of residual_l with every code map), cropped to the support."""
    total = None
    for residual, s in zip(residuals, codes):
        spectrum = torch.fft.fft2(residual).unsqueeze(0) * torch.conj(torch.fft.fft2(s))
        part = op.crop_kernels(torch.fft.ifft2(spectrum).real, kernel_size)
        total = part if total is None else total + part
    return total


def dict_update(images: list, codes: list, bank: op.FilterBank, iters: int,
                seed: int = 0) -> op.FilterBank:
    """Projected gradient descent on the filters with the codes held fixed.

       The step is 1/L_d, where L_d is a power-iteration estimate of the squared norm of the
       code-dependent map d -> sum_k d_k * s_k; after each step every filter is projected back to
       the unit sphere. A step that would increase the fit is rejected and ends the update.

       :parameter images: Images x_l, each (h, w)
       :type images: list
       :parameter codes: Codes s_l aligned with images, each (K, h, w)
       :type codes: list
       :parameter bank: Current dictionary
       :type bank: FilterBank
       :parameter iters: Maximum number of gradient steps
       :type iters: int
       :parameter seed: Seed of the stream re-randomizing vanished filters
       :type seed: int, optional

       :return: The updated dictionary
       :rtype: FilterBank

       :raise ValueError: Empty or misaligned batch
    """
    if not images or len(images) != len(codes):
        raise ValueError("dict_update needs a nonempty list of images with aligned codes")
    generator = torch.Generator().manual_seed(seed)
    kernel_size = bank.kernel_size
    filters = bank.filters

    def normal(kernels):
        return _correlate(_synthesize(kernels.real, codes), codes, kernel_size)

    start = torch.randn(filters.shape, generator=generator, dtype=co.REAL)
    lipschitz, _ = op.power_iteration(normal, start, iters=100, tol=1e-10)
    if lipschitz is None or lipschitz <= 0:
        logging.warning("codes are all zero, dictionary left unchanged")
        return bank
    current = fit_objective(images, codes, bank)
    with torch.no_grad():
        for step in range(iters):
            residuals = [x - synth for x, synth in zip(images, _synthesize(filters, codes))]
            gradient = -_correlate(residuals, codes, kernel_size)
            candidate = project_filters(filters - gradient / lipschitz, generator)
            value = fit_objective(images, codes, op.FilterBank(candidate))
            if value > current:
                logging.debug("dictionary step %s rejected (%s > %s)", step, value, current)
                break
            filters, current = candidate, value
    return op.FilterBank(filters)


def split_planes(images: list) -> list:
    """Real and imaginary planes of complex images as separate real samples; empty planes are
       dropped."""
    samples = []
    for image in images:
        for plane in (image.real, image.imag):
            if float(torch.max(torch.abs(plane))) > 0:
                samples.append(co.as_complex(plane))
    return samples


def default_lambda(images: list) -> float:
    """LAMBDA_SCALE times the largest magnitude over the training images."""
    return LAMBDA_SCALE * max(float(torch.max(torch.abs(x))) for x in images)


def cdl_train(images_high: list, cfg: CdlConfig = CdlConfig()) -> CdlResult:
    """Alternates csc_step over all images and dict_update for cfg.outer_iters rounds.

       New codes are warm-started from the previous round and only accepted when they do not
       increase the objective, so the objective is nonincreasing across rounds.

       :parameter images_high: High-passed training images, each (h, w)
       :type images_high: list
       :parameter cfg: Pre-training settings
       :type cfg: CdlConfig, optional

       :return: Final bank, lambda used and per-round objectives
       :rtype: CdlResult
    """
    logging.info("starting cdl_train with %s images", len(images_high))
    if not images_high:
        raise ValueError("cdl_train needs at least one training image")
    samples = split_planes(images_high)
    if not samples:
        raise ValueError("all training images are zero")
    lam = cfg.lambda_pretrain if cfg.lambda_pretrain is not None else default_lambda(samples)
    logging.debug("pre-training lambda = %s on %s real samples", lam, len(samples))
    bank = random_bank(cfg.num_filters, cfg.kernel_size, cfg.seed)
    codes = [torch.zeros((cfg.num_filters,) + tuple(x.shape), dtype=co.COMPLEX) for x in samples]
    current = cdl_objective(samples, codes, bank, lam)
    history = []
    for outer in range(1, cfg.outer_iters + 1):
        candidate = [csc_step(x, bank, lam, cfg.csc_iters, s0=s) for x, s in zip(samples, codes)]
        value = cdl_objective(samples, candidate, bank, lam)
        if value <= current:
            codes, current = candidate, value
        else:
            logging.debug("round %s: sparse coding step rejected", outer)
        bank = dict_update(samples, codes, bank, cfg.dict_iters, seed=cfg.seed + outer)
        current = cdl_objective(samples, codes, bank, lam)
        fit = fit_objective(samples, codes, bank)
        history.append({"round": outer, "objective": current, "fit": fit})
        logging.info("CDL round %s: objective %s, fit %s", outer, current, fit)
    return CdlResult(bank, lam, history)
