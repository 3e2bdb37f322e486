"""This module trains the Lambda-map source and the high-pass weight beta end to end.

   The pipeline X* = D s* + X_low is evaluated with differentiable torch operations (adjoint
   reconstruction, CG low-pass split, Lambda-maps, T unrolled FISTA iterations, synthesis), so the
   autograd graph recorded by pipeline_forward is the tape that pipeline_backward replays. beta
   and the scalar lambda are stored unconstrained and activated with Softplus.
"""
import dataclasses
import logging
import math
import pathlib
import typing
import numpy as np
import pandas as pd
import torch
import convsynth.core as co
import convsynth.operators as op
import convsynth.solvers as so
import convsynth.highpass as hp
import convsynth.lambda_maps as lm
import convsynth.array_handler as ah
import convsynth.config_handler as ch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
HISTORY_COLUMNS = ["epoch", "step", "loss"]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Supervised training settings; unroll_iters is the number T of unrolled FISTA steps."""
    epochs: int = 4
    batch_size: int = 2
    lr_net: float = 1e-4
    lr_scalars: float = 1e-1
    weight_decay: float = 1e-5
    unroll_iters: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.unroll_iters) < 1:
            raise ValueError("epochs, batch_size and unroll_iters must be >= 1")
        if not (self.lr_net > 0 and self.lr_scalars > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclasses.dataclass
class PipelineTape:
    """Everything pipeline_forward computed; output carries the autograd graph."""
    output: torch.Tensor
    leaves: dict
    x0: torch.Tensor
    x_low: torch.Tensor
    x_high: torch.Tensor
    lam: torch.Tensor
    trace: so.FistaTrace
    beta: float


@dataclasses.dataclass
class Checkpoint:
    """Trainable state of a run: source, raw beta, optimizer state, last epoch and losses,
       plus the lowest validation loss seen so far and its epoch."""
    source: lm.MapSource
    raw_beta: torch.Tensor
    optimizer_state: typing.Optional[dict]
    epoch: int
    history: pd.DataFrame
    best_val_loss: typing.Optional[float] = None
    best_epoch: typing.Optional[int] = None


@dataclasses.dataclass
class TrainResult:
    """Trained source and raw beta, the per-step loss history and per-epoch summaries."""
    source: lm.MapSource
    raw_beta: torch.Tensor
    history: pd.DataFrame
    epochs: pd.DataFrame
    best_val_loss: typing.Optional[float] = None
    best_epoch: typing.Optional[int] = None


def make_raw_beta(beta: float) -> torch.Tensor:
    """Trainable unconstrained scalar whose softplus equals beta (> 0)."""
    return torch.tensor(hp.inverse_softplus(beta), dtype=co.REAL, requires_grad=True)


def trainable_leaves(source: lm.MapSource, raw_beta: torch.Tensor) -> dict:
    """Name -> tensor of every trainable quantity: raw_beta and the source parameters."""
    leaves = {"raw_beta": raw_beta}
    leaves.update({f"source.{name}": parameter for name, parameter in source.named_parameters()})
    return leaves


def pipeline_forward(y: torch.Tensor, mask: torch.Tensor, bank: op.FilterBank,
                     source: lm.MapSource, raw_beta: torch.Tensor, cfg: TrainConfig,
                     highpass_cfg: hp.HighpassConfig = hp.HighpassConfig(),
                     fista_cfg: so.FistaConfig = so.FistaConfig(),
                     norm_sq: typing.Optional[float] = None,
                     track_objective: bool = False) -> tuple:
    """Reconstructs X* = D s* + X_low from k-space data.

       Computes X_0 = A^H y, splits it with beta = softplus(raw_beta), evaluates the Lambda-maps
       on X_0, forms Y' = y - A X_low and runs cfg.unroll_iters FISTA iterations with
       tau = step_safety / ||B||^2.

       :parameter y: k-space data (h, w)
       :type y: torch.Tensor
       :parameter mask: SamplingMask
       :type mask: torch.Tensor
       :parameter bank: Pre-trained dictionary
       :type bank: FilterBank
       :parameter source: Lambda-map source
       :type source: MapSource
       :parameter raw_beta: Unconstrained beta, usually a leaf requiring grad
       :type raw_beta: torch.Tensor
       :parameter cfg: Provides the unrolling depth T
       :type cfg: TrainConfig
       :parameter norm_sq: Cached estimate of ||B||^2 for this mask
       :type norm_sq: float, optional
       :parameter track_objective: Record the FISTA objective trace
       :type track_objective: bool, optional

       :return: X* and the tape for pipeline_backward
       :rtype: tuple
    """
    raw_beta = torch.as_tensor(raw_beta, dtype=co.REAL)
    if source.num_filters != bank.num_filters:
        raise ValueError(f"source emits {source.num_filters} maps but the bank has "
                         f"{bank.num_filters} filters")
    x0 = op.adjoint_A(y, mask)
    beta = hp.softplus(raw_beta)
    split = hp.lowpass_split(x0, highpass_cfg, beta)
    lam = source(x0)
    so.check_lambda_maps(lam.detach(), source.bound)
    y_res = hp.residual_data(y, split.low, mask)
    unrolled = dataclasses.replace(fista_cfg, iters=cfg.unroll_iters)
    trace = so.fista_solve(y_res, bank, mask, lam, unrolled, norm_sq=norm_sq,
                           track_objective=track_objective)
    x_star = op.dict_apply(trace.codes, bank) + split.low
    co.check_finite(x_star, "pipeline_forward")
    tape = PipelineTape(output=x_star, leaves=trainable_leaves(source, raw_beta), x0=x0,
                        x_low=split.low, x_high=split.high, lam=lam, trace=trace,
                        beta=float(beta.detach()))
    return x_star, tape


def pipeline_backward(tape: PipelineTape, loss_grad: torch.Tensor) -> dict:
    """Reverse-mode gradient of a loss through the recorded pipeline.

       loss_grad holds dL/dRe(X*) + i dL/dIm(X*); the result maps every trainable leaf name to
       dL/dleaf, zeros for leaves the output does not depend on.

       :parameter tape: Tape from pipeline_forward
       :type tape: PipelineTape
       :parameter loss_grad: Gradient of the loss with respect to X*
       :type loss_grad: torch.Tensor

       :return: The GradientBundle, name -> gradient tensor
       :rtype: dict

       :raise ValueError: loss_grad does not match the tape's output
    """
    if loss_grad.shape != tape.output.shape:
        raise ValueError(f"loss gradient {tuple(loss_grad.shape)} does not match output "
                         f"{tuple(tape.output.shape)}")
    bundle = {name: torch.zeros_like(leaf) for name, leaf in tape.leaves.items()}
    active = [(name, leaf) for name, leaf in tape.leaves.items() if leaf.requires_grad]
    if not active or not tape.output.requires_grad:
        return bundle
    grads = torch.autograd.grad(co.to_planes(tape.output), [leaf for _, leaf in active],
                                grad_outputs=co.to_planes(loss_grad.detach()),
                                retain_graph=True, allow_unused=True)
    for (name, _), gradient in zip(active, grads):
        if gradient is not None:
            co.check_finite(gradient, f"gradient of {name}")
            bundle[name] = gradient.detach()
    return bundle


def mse_loss(x_star: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the 2N real components of a complex image."""
    co.check_same_shape(x_star, target, "reconstruction and target")
    return torch.mean(torch.abs(x_star - target) ** 2) / 2.0


def mse_gradient(x_star: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """dL/dRe + i dL/dIm of mse_loss, i.e. (X* - target) / N."""
    co.check_same_shape(x_star, target, "reconstruction and target")
    return (x_star.detach() - target) / target.numel()


def make_optimizer(source: lm.MapSource, raw_beta: torch.Tensor,
                   cfg: TrainConfig) -> torch.optim.AdamW:
    """Adam with decoupled weight decay on network weights only.

       Groups: network weights (lr_net, weight_decay), network biases (lr_net, no decay) and the
       scalars raw_beta / raw_lambda (lr_scalars, no decay).
    """
    weights, biases, scalars = [], [], [raw_beta]
    for name, parameter in source.named_parameters():
        if name == "raw_lambda":
            scalars.append(parameter)
        elif name.endswith("weight"):
            weights.append(parameter)
        else:
            biases.append(parameter)
    groups = [{"params": weights, "lr": cfg.lr_net, "weight_decay": cfg.weight_decay},
              {"params": biases, "lr": cfg.lr_net, "weight_decay": 0.0},
              {"params": scalars, "lr": cfg.lr_scalars, "weight_decay": 0.0}]
    return torch.optim.AdamW([group for group in groups if group["params"]],
                             betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Optimizer, leaves: dict, bundle: dict) -> dict:
    """Applies one GradientBundle to the leaves through the optimizer.

       The optimizer updates the leaves in place; the returned copies record every updated leaf
       before and after the step.

       :parameter optimizer: Optimizer from make_optimizer
       :type optimizer: torch.optim.Optimizer
       :parameter leaves: Name -> trainable tensor
       :type leaves: dict
       :parameter bundle: Name -> gradient
       :type bundle: dict

       :return: Name -> (copy before the step, copy after the step) for every updated leaf
       :rtype: dict
    """
    updated = [name for name in leaves if name in bundle]
    for name in updated:
        leaf = leaves[name]
        if bundle[name].shape != leaf.shape:
            raise ValueError(f"gradient of {name} has shape {tuple(bundle[name].shape)}, "
                             f"expected {tuple(leaf.shape)}")
        leaf.grad = bundle[name].clone()
    before = {name: leaves[name].detach().clone() for name in updated}
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return {name: (before[name], leaves[name].detach().clone()) for name in updated}


class NormCache:
    """||B||^2 estimates per sampling mask, computed once per distinct mask."""

    def __init__(self, bank: op.FilterBank, fista_cfg: so.FistaConfig):
        self.bank = bank
        self.fista_cfg = fista_cfg
        self._values = {}

    def __call__(self, mask: torch.Tensor) -> float:
        key = (tuple(mask.shape), mask.numpy().tobytes())
        if key not in self._values:
            value, _ = op.op_norm_sq(self.bank, mask, tuple(mask.shape),
                                     self.fista_cfg.power_iters, self.fista_cfg.power_tol)
            self._values[key] = value
        return self._values[key]


def evaluate_loss(dataset: list, bank: op.FilterBank, source: lm.MapSource,
                  raw_beta: torch.Tensor, cfg: TrainConfig, highpass_cfg: hp.HighpassConfig,
                  fista_cfg: so.FistaConfig, norms: typing.Optional[NormCache] = None) -> float:
    """Mean MSE of the pipeline over a dataset of (y, mask, target) without gradients."""
    norms = norms or NormCache(bank, fista_cfg)
    with torch.no_grad():
        losses = [float(mse_loss(pipeline_forward(y, mask, bank, source, raw_beta, cfg,
                                                  highpass_cfg, fista_cfg, norms(mask))[0],
                                 target))
                  for y, mask, target in dataset]
    return float(np.mean(losses))


def train(dataset: list, cfg: TrainConfig, bank: op.FilterBank, source: lm.MapSource,
          raw_beta: typing.Optional[torch.Tensor] = None,
          highpass_cfg: hp.HighpassConfig = hp.HighpassConfig(),
          fista_cfg: so.FistaConfig = so.FistaConfig(),
          validation: typing.Optional[list] = None,
          checkpoint_dir: typing.Optional[str] = None,
          resume: typing.Optional[Checkpoint] = None,
          run_config: typing.Optional[dict] = None) -> TrainResult:
    """Mini-batch training of the source parameters and beta with Adam and the MSE loss.

       Every epoch shuffles the dataset with a generator seeded by (seed, epoch), so a resumed
       run sees the same batches as an uninterrupted one. Gradients of a batch are accumulated in
       sample order and averaged. With checkpoint_dir the last state is written after every epoch
       and, when a validation set is given, the state with the best validation loss as well.

       :parameter dataset: Training samples (y, mask, target)
       :type dataset: list
       :parameter cfg: Training settings
       :type cfg: TrainConfig
       :parameter bank: Pre-trained dictionary
       :type bank: FilterBank
       :parameter source: Lambda-map source to be trained (updated in place)
       :type source: MapSource
       :parameter raw_beta: Initial unconstrained beta, from highpass_cfg.beta if omitted
       :type raw_beta: torch.Tensor, optional
       :parameter validation: Samples for the per-epoch validation loss
       :type validation: list, optional
       :parameter checkpoint_dir: Directory for 'last' and 'best' checkpoints
       :type checkpoint_dir: str, optional
       :parameter resume: Checkpoint to continue from; replaces source and raw_beta
       :type resume: Checkpoint, optional
       :parameter run_config: Configuration stored alongside checkpoints
       :type run_config: dict, optional

       :return: Trained parameters and loss histories
       :rtype: TrainResult

       :raise NumericalError: Non-finite loss, with the offending batch index
    """
    logging.info("starting training on %s samples", len(dataset))
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    for y, mask, target in dataset:
        co.check_same_shape(op.adjoint_A(y, mask), target, "reconstruction and target")
    if resume is not None:
        source, raw_beta = resume.source, resume.raw_beta
        start_epoch, history = resume.epoch + 1, [resume.history]
        best_val, best_epoch = resume.best_val_loss, resume.best_epoch
    else:
        start_epoch, history = 1, []
        best_val, best_epoch = None, None
        if raw_beta is None:
            raw_beta = make_raw_beta(max(highpass_cfg.beta, 1e-6))
    raw_beta = raw_beta.detach().clone().requires_grad_(True)
    optimizer = make_optimizer(source, raw_beta, cfg)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)
    leaves = trainable_leaves(source, raw_beta)
    norms = NormCache(bank, fista_cfg)
    epochs = []
    step = 0 if resume is None or resume.history.empty else int(resume.history["step"].max())
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        losses = []
        for batch_index, first in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[first:first + cfg.batch_size]]
            total, batch_loss = None, 0.0
            for y, mask, target in batch:
                x_star, tape = pipeline_forward(y, mask, bank, source, raw_beta, cfg,
                                                highpass_cfg, fista_cfg, norms(mask))
                loss = float(mse_loss(x_star.detach(), target))
                if not math.isfinite(loss):
                    logging.error("non-finite loss in epoch %s batch %s", epoch, batch_index)
                    raise co.NumericalError(f"non-finite loss in epoch {epoch}, "
                                            f"batch {batch_index}")
                bundle = pipeline_backward(tape, mse_gradient(x_star, target))
                total = bundle if total is None else {name: total[name] + bundle[name]
                                                      for name in total}
                batch_loss += loss
            adam_step(optimizer, leaves, {name: g / len(batch) for name, g in total.items()})
            step += 1
            losses.append(batch_loss / len(batch))
            history.append(pd.DataFrame([[epoch, step, losses[-1]]], columns=HISTORY_COLUMNS))
            logging.debug("epoch %s step %s loss %s", epoch, step, losses[-1])
        summary = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "beta": float(hp.softplus(raw_beta.detach()))}
        if validation:
            summary["val_loss"] = evaluate_loss(validation, bank, source, raw_beta, cfg,
                                                highpass_cfg, fista_cfg, norms)
        epochs.append(summary)
        logging.info("epoch %s: %s", epoch, summary)
        improved = bool(validation) and (best_val is None or summary["val_loss"] < best_val)
        if improved:
            best_val, best_epoch = summary["val_loss"], epoch
        frame = pd.concat(history, ignore_index=True)
        if checkpoint_dir is not None:
            best = {"best_val_loss": best_val, "best_epoch": best_epoch}
            save_checkpoint(pathlib.Path(checkpoint_dir) / "last", source, raw_beta, optimizer,
                            epoch, frame, run_config, **best)
            if improved:
                save_checkpoint(pathlib.Path(checkpoint_dir) / "best", source, raw_beta,
                                optimizer, epoch, frame, run_config, **best)
    frame = pd.concat(history, ignore_index=True) if history else \
        pd.DataFrame(columns=HISTORY_COLUMNS)
    logging.info("training finished")
    return TrainResult(source, raw_beta.detach(), frame, pd.DataFrame(epochs), best_val,
                       best_epoch)


def save_checkpoint(directory, source: lm.MapSource, raw_beta: torch.Tensor,
                    optimizer: typing.Optional[torch.optim.Optimizer], epoch: int,
                    history: pd.DataFrame, run_config: typing.Optional[dict] = None,
                    best_val_loss: typing.Optional[float] = None,
                    best_epoch: typing.Optional[int] = None):
    """Writes source bundle, raw beta, optimizer state, loss CSV and a state JSON.

       The state JSON also records the lowest validation loss so far and its epoch.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lm.save_source(source, directory / "source")
    ah.save_array(directory / "raw_beta.npy", raw_beta.detach())
    if optimizer is not None:
        torch.save(optimizer.state_dict(), directory / "optimizer.pt")
    history.to_csv(directory / "loss_history.csv", index=False)
    ch.json_write({"epoch": epoch, "source": source.kind, "num_filters": source.num_filters,
                   "beta": float(hp.softplus(raw_beta.detach())), "config": run_config,
                   "best_val_loss": best_val_loss, "best_epoch": best_epoch},
                  directory / "state.json")


def load_checkpoint(directory) -> Checkpoint:
    """Inverse of save_checkpoint."""
    directory = pathlib.Path(directory)
    if not (directory / "state.json").exists():
        raise FileNotFoundError(f"no checkpoint in {directory}")
    state = ch.json_load(directory / "state.json")
    source = lm.load_source(directory / "source")
    raw_beta = torch.from_numpy(np.array(ah.load_array(directory / "raw_beta.npy")))
    optimizer_path = directory / "optimizer.pt"
    optimizer_state = torch.load(optimizer_path) if optimizer_path.exists() else None
    history = pd.read_csv(directory / "loss_history.csv", float_precision="round_trip")
    return Checkpoint(source, raw_beta, optimizer_state, int(state["epoch"]), history,
                      state.get("best_val_loss"), state.get("best_epoch"))


def reconstruct(y: torch.Tensor, mask: torch.Tensor, bank: op.FilterBank, source: lm.MapSource,
                raw_beta: torch.Tensor, cfg: TrainConfig,
                highpass_cfg: hp.HighpassConfig = hp.HighpassConfig(),
                fista_cfg: so.FistaConfig = so.FistaConfig(),
                norm_sq: typing.Optional[float] = None) -> PipelineTape:
    """Inference: pipeline_forward without gradients and with the objective trace recorded."""
    with torch.no_grad():
        _, tape = pipeline_forward(y, mask, bank, source, raw_beta, cfg, highpass_cfg,
                                   fista_cfg, norm_sq, track_objective=True)
    return tape
