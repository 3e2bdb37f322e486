"""This module contains the command-line entry points tying the pipeline together:

   ``convsynth simulate|pretrain-dict|train|reconstruct|evaluate --config <path> [--seed N]
   [--out <dir>]`` plus ``convsynth init-config``.

   Exit codes: 0 on success, 2 on configuration errors or missing inputs, 3 on numerical failures.
   The environment variable CONVSYNTH_THREADS sets the number of torch threads.
"""
import functools
import logging
import os
import pathlib
import sys
import dataclasses
import numpy as np
import pandas as pd
import torch
import click
import convsynth.array_handler as ah
import convsynth.config_handler as ch
import convsynth.core as co
import convsynth.custom_logger as cl
import convsynth.dictionary as di
import convsynth.highpass as hp
import convsynth.lambda_maps as lm
import convsynth.metrics as me
import convsynth.operators as op
import convsynth.simulate as si
import convsynth.training as tr

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
THREADS_VARIABLE = "CONVSYNTH_THREADS"
SPLITS = ("train", "val", "test")
METHOD_NAMES = {"constant": "cdl-lambda", "network": "cdl-Lambda", "heuristic": "cdl-heuristic"}
ZERO_FILLED = "zero-filled"
ERROR_SCALE = 3.0


def exit_codes(command):
    """Maps configuration problems and missing inputs to exit code 2, numerical failures to 3.

       Any ValueError escaping a command stems from settings or input files that do not fit
       together (ConfigError is one), so it counts as a configuration error.
    """
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ValueError, FileNotFoundError) as error:
            logging.exception("configuration or input error")
            click.echo(f"error: {error}", err=True)
            sys.exit(EXIT_CONFIG)
        except co.NumericalError as error:
            logging.exception("numerical failure")
            click.echo(f"numerical failure: {error}", err=True)
            sys.exit(EXIT_NUMERICAL)
    return wrapper


def load_settings(config_path, seed=None) -> ch.RunConfig:
    """Validated run configuration with the optional --seed override applied."""
    run_config = ch.load_run_config(config_path)
    if seed is not None:
        run_config = ch.with_seed(run_config, seed)
    return run_config


def _sample_seed(seed: int, split: str, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), index, stream])
               .generate_state(1)[0])


def write_dataset(directory, sim_cfg: si.SimulateConfig) -> pathlib.Path:
    """Generates every split of phantoms and acquisitions and writes the manifest.

       Each sample directory holds target.npy, y.npy and mask.npy; manifest.json records the
       configuration and the per-sample seeds and noise levels.

       :parameter directory: Dataset root
       :type directory: str or pathlib.Path
       :parameter sim_cfg: Simulation settings
       :type sim_cfg: SimulateConfig

       :return: Path of the manifest
       :rtype: pathlib.Path
    """
    logging.info("writing dataset to %s", directory)
    directory = pathlib.Path(directory)
    manifest = {"config": dataclasses.asdict(sim_cfg), "splits": {}}
    for split, size in sim_cfg.splits().items():
        entries = []
        for index in range(size):
            sample_id = f"{split}_{index:05d}"
            sigma = sim_cfg.sigmas[index % len(sim_cfg.sigmas)]
            phantom_seed = _sample_seed(sim_cfg.seed, split, index, 0)
            noise_seed = _sample_seed(sim_cfg.seed, split, index, 1)
            target = si.make_phantom(sim_cfg.image_size, sim_cfg.num_ellipses, phantom_seed)
            spec = si.AcquisitionSpec(sigma=sigma, keep_fraction=sim_cfg.keep_fraction,
                                      seed=noise_seed)
            y, mask = si.simulate_acquisition(target, spec)
            sample_dir = directory / split / sample_id
            ah.save_array(sample_dir / "target.npy", target)
            ah.save_array(sample_dir / "y.npy", y)
            ah.save_array(sample_dir / "mask.npy", mask.numpy())
            entries.append({"id": sample_id, "sigma": sigma, "phantom_seed": phantom_seed,
                            "noise_seed": noise_seed})
        manifest["splits"][split] = entries
        logging.info("split %s: %s samples", split, size)
    manifest_path = directory / "manifest.json"
    ch.json_write(manifest, manifest_path)
    logging.info("manifest sha256 %s", ah.file_digest(manifest_path))
    return manifest_path


def load_sample(sample_dir) -> dict:
    """Reads one sample directory into tensors (target only if present)."""
    sample_dir = pathlib.Path(sample_dir)
    if not (sample_dir / "y.npy").exists():
        raise FileNotFoundError(f"no sample data in {sample_dir}")
    sample = {"id": sample_dir.name,
              "y": ah.load_complex_tensor(sample_dir / "y.npy"),
              "mask": op.check_mask(torch.from_numpy(ah.load_array(sample_dir / "mask.npy")))}
    if (sample_dir / "target.npy").exists():
        sample["target"] = ah.load_complex_tensor(sample_dir / "target.npy")
    return sample


def load_split(directory, split: str) -> list:
    """All samples of a split in manifest order, each with its sigma."""
    directory = pathlib.Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    manifest = ch.json_load(manifest_path)
    if split not in manifest["splits"]:
        raise ch.ConfigError(f"dataset has no split {split!r}")
    samples = []
    for entry in manifest["splits"][split]:
        sample = load_sample(directory / split / entry["id"])
        sample["sigma"] = entry["sigma"]
        samples.append(sample)
    return samples


def as_training_set(samples: list) -> list:
    """(y, mask, target) tuples for training."""
    return [(sample["y"], sample["mask"], sample["target"]) for sample in samples]


def save_bank(directory, result: di.CdlResult, cdl_cfg: di.CdlConfig):
    """Writes filters.npy and a manifest with the configuration and per-round objectives."""
    ah.save_bundle(directory, {"filters": result.bank.filters.numpy()},
                   {"num_filters": result.bank.num_filters,
                    "kernel_size": result.bank.kernel_size,
                    "lambda_pretrain": result.lambda_pretrain,
                    "config": dataclasses.asdict(cdl_cfg),
                    "history": result.history})


def load_bank(directory) -> op.FilterBank:
    """Reads and validates (unit norm) a filter bank bundle."""
    if not (pathlib.Path(directory) / ah.MANIFEST).exists():
        raise FileNotFoundError(f"no filter bank in {directory}")
    arrays, _ = ah.load_bundle(directory)
    return op.FilterBank(arrays["filters"])


def resolve_checkpoint(run_config: ch.RunConfig, checkpoint=None) -> pathlib.Path:
    """Explicit checkpoint, else 'best', else 'last' under paths.checkpoint_dir."""
    if checkpoint is not None:
        return pathlib.Path(checkpoint)
    root = pathlib.Path(run_config.paths.checkpoint_dir)
    return root / "best" if (root / "best" / "state.json").exists() else root / "last"


def load_method(bank: op.FilterBank, checkpoint) -> tr.Checkpoint:
    """Loads a checkpoint and checks it against the bank."""
    state = tr.load_checkpoint(checkpoint)
    if state.source.num_filters != bank.num_filters:
        raise ch.ConfigError(f"checkpoint {checkpoint} has K={state.source.num_filters} but "
                             f"the bank has K={bank.num_filters}")
    return state


@click.group()
@click.option("--log-file", default=None, help="Log file, default convsynth.log.")
@click.option("--verbose", is_flag=True, help="Print debug messages to the console.")
def cli(log_file, verbose):
    """Convolutional synthesis reconstruction with learned spatially adaptive l1 weights."""
    cl.logger_setup(console_level=logging.DEBUG if verbose else logging.INFO,
                    filename=log_file or "convsynth.log")
    threads = os.environ.get(THREADS_VARIABLE)
    if threads:
        torch.set_num_threads(int(threads))
        logging.info("using %s torch threads", threads)


def config_option(command):
    """Adds the shared --config, --seed and --out options."""
    command = click.option("--out", "out", default=None, type=click.Path(),
                           help="Output location overriding the configured path.")(command)
    command = click.option("--seed", type=int, default=None,
                           help="Override every seed of the configuration.")(command)
    return click.option("--config", "config_path", required=True,
                        type=click.Path(dir_okay=False), help="JSON run configuration.")(command)


@cli.command("init-config")
@click.argument("filename", type=click.Path(dir_okay=False), default="config.json")
@click.option("--overwrite", is_flag=True, help="Replace an existing file.")
def cmd_init_config(filename, overwrite):
    """Write the default run configuration."""
    ch.json_create(overwrite=overwrite, filename=filename)
    click.echo(filename)


@cli.command("simulate")
@config_option
@exit_codes
def cmd_simulate(config_path, seed, out):
    """Generate train/val/test phantoms and acquisitions."""
    run_config = load_settings(config_path, seed)
    directory = out or run_config.paths.data_dir
    manifest = write_dataset(directory, run_config.simulate)
    click.echo(str(manifest))


@cli.command("pretrain-dict")
@config_option
@exit_codes
def cmd_pretrain_dict(config_path, seed, out):
    """Pre-train the convolutional dictionary on high-passed training targets."""
    run_config = load_settings(config_path, seed)
    cdl_cfg = run_config.dictionary
    samples = load_split(run_config.paths.data_dir, "train")
    if not samples:
        raise ch.ConfigError("the training split is empty")
    rng = np.random.default_rng(cdl_cfg.seed)
    chosen = sorted(rng.choice(len(samples), size=min(cdl_cfg.num_images, len(samples)),
                               replace=False))
    logging.info("pre-training on %s of %s training images", len(chosen), len(samples))
    images = [hp.lowpass_split(samples[i]["target"], run_config.highpass).high for i in chosen]
    result = di.cdl_train(images, cdl_cfg)
    directory = out or run_config.paths.bank_path
    save_bank(directory, result, cdl_cfg)
    load_bank(directory)
    click.echo(str(directory))


@cli.command("train")
@config_option
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
@exit_codes
def cmd_train(config_path, seed, out, resume):
    """Train the Lambda-map source and beta through the unrolled pipeline."""
    run_config = load_settings(config_path, seed)
    bank = load_bank(run_config.paths.bank_path)
    train_set = as_training_set(load_split(run_config.paths.data_dir, "train"))
    validation = as_training_set(load_split(run_config.paths.data_dir, "val")) or None
    checkpoint_dir = pathlib.Path(out or run_config.paths.checkpoint_dir)
    previous = None
    if resume:
        previous = load_method(bank, checkpoint_dir / "last")
        logging.info("resuming after epoch %s", previous.epoch)
    source = lm.make_source(run_config.lambda_maps, bank.num_filters)
    result = tr.train(train_set, run_config.training, bank, source,
                      highpass_cfg=run_config.highpass, fista_cfg=run_config.fista,
                      validation=validation, checkpoint_dir=checkpoint_dir, resume=previous,
                      run_config=run_config.to_dict())
    result.history.to_csv(checkpoint_dir / "loss_history.csv", index=False)
    result.epochs.to_csv(checkpoint_dir / "epochs.csv", index=False)
    click.echo(str(checkpoint_dir))


def write_reconstruction(directory, sample: dict, tape: tr.PipelineTape, bound: float,
                         png: bool = False):
    """Writes x*, x0, x_low, ordered Lambda-maps and codes, the objective trace and the filter
       ranking of one reconstruction; optional PNG panels."""
    directory = pathlib.Path(directory)
    order = lm.variance_order(tape.lam)
    ah.save_array(directory / "x_star.npy", tape.output)
    ah.save_array(directory / "x0.npy", tape.x0)
    ah.save_array(directory / "x_low.npy", tape.x_low)
    ah.save_array(directory / "lambda_maps.npy", tape.lam.detach()[order])
    ah.save_array(directory / "codes.npy", tape.trace.codes.detach()[order])
    lm.rank_filters(tape.lam).to_csv(directory / "filter_ranking.csv", index=False)
    pd.DataFrame({"iteration": range(len(tape.trace.objective)),
                  "objective": tape.trace.objective}).to_csv(directory / "objective.csv",
                                                             index=False)
    if not png:
        return
    peak = float(torch.max(torch.abs(sample.get("target", tape.output)))) or 1.0
    ah.export_png(directory / "x_star.png", torch.abs(tape.output), 0.0, peak)
    ah.export_png(directory / "x0.png", torch.abs(tape.x0), 0.0, peak)
    if "target" in sample:
        ah.export_png(directory / "target.png", torch.abs(sample["target"]), 0.0, peak)
        error = ERROR_SCALE * torch.abs(torch.abs(tape.output) - torch.abs(sample["target"]))
        ah.export_png(directory / "error_x3.png", error, 0.0, peak)
    for rank, k in enumerate(order):
        ah.export_png(directory / "lambda" / f"rank{rank:03d}_filter{k:03d}.png",
                      tape.lam.detach()[k], 0.0, bound)


@cli.command("reconstruct")
@config_option
@click.option("--checkpoint", type=click.Path(file_okay=False), default=None,
              help="Checkpoint directory, best or last under paths.checkpoint_dir if omitted.")
@click.option("--sample", "sample_dir", required=True, type=click.Path(file_okay=False),
              help="Sample directory holding y.npy and mask.npy.")
@click.option("--png", is_flag=True, help="Also export magnitude and Lambda-map PNGs.")
@exit_codes
def cmd_reconstruct(config_path, seed, out, checkpoint, sample_dir, png):
    """Reconstruct one sample and write x*, x0, Lambda-maps, codes and the FISTA objective."""
    run_config = load_settings(config_path, seed)
    bank = load_bank(run_config.paths.bank_path)
    state = load_method(bank, resolve_checkpoint(run_config, checkpoint))
    sample = load_sample(sample_dir)
    tape = tr.reconstruct(sample["y"], sample["mask"], bank, state.source, state.raw_beta,
                          run_config.training, run_config.highpass, run_config.fista)
    directory = pathlib.Path(out or run_config.paths.output_dir) / sample["id"]
    write_reconstruction(directory, sample, tape, state.source.bound, png)
    click.echo(str(directory))


def evaluate_split(run_config: ch.RunConfig, bank: op.FilterBank, methods: dict,
                   samples: list) -> pd.DataFrame:
    """Metric rows (sample_id, method, sigma, psnr, ssim) for the zero-filled baseline and
       every method."""
    rows = []
    norms = tr.NormCache(bank, run_config.fista)
    for sample in samples:
        target = sample["target"]
        mask = me.signal_mask(target, run_config.metrics.threshold_fraction)
        reconstructions = {ZERO_FILLED: op.adjoint_A(sample["y"], sample["mask"])}
        for name, state in methods.items():
            tape = tr.reconstruct(sample["y"], sample["mask"], bank, state.source,
                                  state.raw_beta, run_config.training, run_config.highpass,
                                  run_config.fista, norms(sample["mask"]))
            reconstructions[name] = tape.output
        for name, image in reconstructions.items():
            report = me.evaluate_pair(image, target, run_config.metrics, mask)
            rows.append({"sample_id": sample["id"], "method": name, "sigma": sample["sigma"],
                         "psnr": report.psnr, "ssim": report.ssim})
    return pd.DataFrame(rows, columns=["sample_id", "method", "sigma", "psnr", "ssim"])


@cli.command("evaluate")
@config_option
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(file_okay=False),
              help="Checkpoint directory; repeat to compare several methods.")
@click.option("--split", default="test", type=click.Choice(SPLITS))
@exit_codes
def cmd_evaluate(config_path, seed, out, checkpoints, split):
    """Masked PSNR/SSIM of the zero-filled baseline and the trained methods over a split."""
    run_config = load_settings(config_path, seed)
    bank = load_bank(run_config.paths.bank_path)
    methods = {}
    for checkpoint in checkpoints or (resolve_checkpoint(run_config),):
        state = load_method(bank, checkpoint)
        name = METHOD_NAMES[state.source.kind]
        if name in methods:
            name = f"{name}:{pathlib.Path(checkpoint).name}"
        methods[name] = state
    samples = load_split(run_config.paths.data_dir, split)
    rows = evaluate_split(run_config, bank, methods, samples)
    directory = pathlib.Path(out or run_config.paths.output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    rows.to_csv(directory / f"metrics_{split}.csv", index=False)
    me.summarize(rows).to_csv(directory / f"summary_{split}.csv", index=False)
    click.echo(str(directory / f"metrics_{split}.csv"))
