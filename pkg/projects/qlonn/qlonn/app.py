# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""The `qlonn` command line."""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import click
import numpy as np
from traitlets.config import Config, DeferredConfigString

from ._version import __version__
from .energy import (
    EnergyParams,
    MultiplierKind,
    energy_report,
    format_landauer_table,
    landauer_limit,
    sql_extract,
)
from .loaders import (
    Dataset,
    load_mnist_idx,
    load_network,
    load_synthetic,
    network_hash,
    save_checkpoint,
)
from .network import LayerNoisePolicy, NetworkSpec, classify, forward
from .noise import NoiseConfig, PhotonBudget
from .stores import WeightStore
from .sweeps import SweepConfig, emit_csv, emit_report, format_csv, read_csv, run_sweep
from .training import TrainingConfig, train_loop
from .utils import (
    SWEEP_EVENTS_SCHEMA_PATH,
    TRAINING_EVENTS_SCHEMA_PATH,
    NoCrossing,
    NoiseMode,
    QlonnError,
    ValidationFailure,
    config_hash,
)
from .validation import run_oracle_suite

log = logging.getLogger("qlonn")

CONFIGURABLES = {
    cls.__name__: cls
    for cls in (NoiseConfig, SweepConfig, TrainingConfig, EnergyParams, WeightStore)
}


def load_config_file(path: str | Path, section: str) -> Config:
    """
    Reads a flat key-value configuration file.

    Lines are `Section.trait = value` or `trait = value`; the latter applies to `section`.
    Text after `#` is a comment. Values are parsed by the trait they configure.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise click.BadParameter(f"Cannot read {path}: {e}", param_hint="--config") from e
    config = Config()
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise click.BadParameter(
                f"{path}:{number}: expected 'key = value', got {raw!r}", param_hint="--config"
            )
        owner, _, trait = key.rpartition(".")
        owner = owner or section
        if owner not in CONFIGURABLES:
            raise click.BadParameter(
                f"{path}:{number}: unknown section {owner!r}", param_hint="--config"
            )
        if trait not in CONFIGURABLES[owner].class_trait_names(config=True):
            raise click.BadParameter(
                f"{path}:{number}: {owner} has no option {trait!r}", param_hint="--config"
            )
        config[owner][trait] = DeferredConfigString(value)
    return config


def _flag_config(params: dict[str, Any]) -> Config:
    config = Config()
    if params.get("seed") is not None:
        config.NoiseConfig.seed = params["seed"]
        config.TrainingConfig.seed = params["seed"]
    if params.get("noise") is not None:
        config.NoiseConfig.mode = params["noise"]
    if params.get("trials") is not None:
        config.SweepConfig.trials = params["trials"]
    if params.get("threads") is not None:
        config.SweepConfig.threads = params["threads"]
    if params.get("ablate_layer") is not None:
        config.SweepConfig.ablate_layer = params["ablate_layer"]
    return config


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        stream=sys.stderr,
        format="[%(levelname)s %(name)s] %(message)s",
        force=True,
    )


def _event_logger(path: str | None, schema_path: Path):
    if path is None:
        return None
    from jupyter_events import EventLogger

    event_logger = EventLogger(handlers=[logging.FileHandler(path, mode="w", encoding="utf-8")])
    event_logger.register_event_schema(schema_path)
    return event_logger


def _write(text: str, out: str | None) -> None:
    if out is None:
        click.echo(text, nl=False)
        return
    path = Path(out)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise OSError(f"Cannot write {path}: {e}") from e


def common_options(section: str) -> Callable:
    """Adds the options every subcommand accepts and resolves them into a traitlets Config."""

    def decorator(command: Callable) -> Callable:
        @click.option(
            "--config",
            "config_path",
            type=click.Path(dir_okay=False),
            help="Key-value configuration file.",
        )
        @click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master seed.")
        @click.option("--trials", type=click.IntRange(min=1), help="Monte Carlo trials.")
        @click.option("--threads", type=click.IntRange(min=1), help="Worker threads.")
        @click.option(
            "--noise",
            type=click.Choice([m.value for m in NoiseMode], case_sensitive=False),
            help="Noise model.",
        )
        @click.option(
            "--ablate-layer",
            type=click.IntRange(min=0),
            help="Keep noise in this optical layer only (0-based among FC/conv layers).",
        )
        @click.option("--out", type=click.Path(dir_okay=True), help="Output path.")
        @click.option(
            "--events", type=click.Path(dir_okay=False), help="Write structured events here."
        )
        @click.option(
            "--log-level",
            type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
            default="WARNING",
            show_default=True,
        )
        @functools.wraps(command)
        def wrapper(config_path, log_level, **params):
            _setup_logging(log_level)
            config = Config()
            if config_path is not None:
                config.merge(load_config_file(config_path, section))
            config.merge(_flag_config(params))
            return command(config=config, **params)

        return wrapper

    return decorator


def _dataset(images: str | None, labels: str | None) -> Dataset:
    if images is None and labels is None:
        return load_synthetic()
    if images is None or labels is None:
        raise click.UsageError("--images and --labels go together")
    return load_mnist_idx(images, labels, log)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="qlonn")
def main() -> None:
    """Shot-noise-limited optical neural network simulator."""


@main.command()
@click.option("--network", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", type=click.Path(exists=True, dir_okay=False))
@common_options("SweepConfig")
def sweep(config, network, weights, images, labels, out, events, **_) -> int:
    """Error rate against photons per MAC, as CSV."""
    noise = NoiseConfig(config=config)
    sweep_config = SweepConfig(config=config)
    energy = EnergyParams(config=config)
    net = load_network(network, weights, WeightStore(config=config))
    result = run_sweep(
        net,
        _dataset(images, labels),
        sweep_config,
        noise,
        wavelength=energy.wavelength,
        network_hash=network_hash(net),
        event_logger=_event_logger(events, SWEEP_EVENTS_SCHEMA_PATH),
        log=log,
    )
    if out is None:
        click.echo(format_csv(result), nl=False)
    else:
        emit_csv(result, out)
    return 0


@main.command()
@click.option("--network", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", type=click.Path(exists=True, dir_okay=False))
@click.option("--index", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--n-mac", type=click.FloatRange(min=0, min_open=True), default=1000.0)
@common_options("NoiseConfig")
def infer(config, network, weights, images, labels, index, n_mac, out, ablate_layer, **_) -> int:
    """One noisy forward pass of one sample."""
    noise = NoiseConfig(config=config)
    net = load_network(network, weights, WeightStore(config=config))
    dataset = _dataset(images, labels)
    if index >= len(dataset):
        raise click.BadParameter(f"the dataset holds {len(dataset)} samples", param_hint="--index")
    budget = PhotonBudget.equal_split(n_mac)
    count = net.noisy_layer_count
    if ablate_layer is None:
        policy = LayerNoisePolicy.uniform(count, budget)
    else:
        policy = LayerNoisePolicy.ablation(count, ablate_layer, budget)
    logits, photons = forward(net, dataset.images[index], policy, noise)
    lines = [
        f"# qlonn {__version__}",
        f"# seed {noise.seed}",
        f"# config_hash {config_hash({'noise': noise.as_dict(), 'n_mac': n_mac})}",
        f"# network_hash {network_hash(net)}",
        f"index = {index}",
        f"label = {int(dataset.labels[index])}",
        f"class = {classify(logits)}",
        f"photons_total = {photons:.16e}",
        "logits = " + ",".join(f"{v:.16e}" for v in logits),
    ]
    _write("\n".join(lines) + "\n", out)
    return 0


@main.command()
@click.option("--images", type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", type=click.Path(exists=True, dir_okay=False))
@click.option("--test-images", type=click.Path(exists=True, dir_okay=False))
@click.option("--test-labels", type=click.Path(exists=True, dir_okay=False))
@click.option("--network", type=click.Path(exists=True, dir_okay=False), help="Start network.")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False))
@click.option("--hidden", multiple=True, type=click.IntRange(min=1), default=(100,))
@click.option("--n-mac", type=click.FloatRange(min=0, min_open=True), help="Noisy training.")
@common_options("TrainingConfig")
def train(
    config,
    images,
    labels,
    test_images,
    test_labels,
    network,
    weights,
    hidden,
    n_mac,
    out,
    events,
    **_,
) -> int:
    """Trains a network and writes a checkpoint directory."""
    if out is None:
        raise click.UsageError("train needs --out <checkpoint directory>")
    noise = NoiseConfig(config=config)
    training = TrainingConfig(config=config)
    store = WeightStore(config=config)
    dataset = _dataset(images, labels)
    test_set = None
    if test_images or test_labels:
        test_set = _dataset(test_images, test_labels)
    if network is not None:
        if weights is None:
            raise click.UsageError("--network needs --weights")
        net = load_network(network, weights, store)
    else:
        sizes = [int(np.prod(dataset.images.shape[1:])), *hidden, dataset.class_count]
        net = NetworkSpec.dense(sizes, noise.stream())
    budget = None if n_mac is None or noise.is_noiseless else PhotonBudget.equal_split(n_mac)
    net, history = train_loop(
        net,
        dataset,
        training,
        noise,
        budget,
        test_set=test_set,
        event_logger=_event_logger(events, TRAINING_EVENTS_SCHEMA_PATH),
        log=log,
    )
    last = history[-1]
    save_checkpoint(
        out,
        net,
        {
            "qlonn": __version__,
            "epoch": last.epoch,
            "seed": noise.seed,
            "learning_rate": last.learning_rate,
            "config_hash": config_hash(
                {"training": training.as_dict(), "noise": noise.as_dict(), "n_mac": n_mac}
            ),
            "history": [record.__dict__ for record in history],
        },
        store,
    )
    for record in history:
        click.echo(
            f"epoch {record.epoch}: loss {record.loss:.6f} accuracy {record.accuracy:.4f} "
            f"test {record.test_accuracy if record.test_accuracy is not None else '-'}"
        )
    return 0


@main.command()
@common_options("EnergyParams")
def energy(config, out, **_) -> int:
    """Energy per MAC, the AlexNet layer table and Landauer floors."""
    params = EnergyParams(config=config)
    report = energy_report(params)
    if out is None:
        click.echo(report, nl=False)
    else:
        emit_report(
            report,
            out,
            {"qlonn": __version__, "config_hash": config_hash({"energy": params.as_dict()})},
        )
    return 0


@main.command()
@click.option(
    "--kind",
    type=click.Choice([k.value for k in MultiplierKind], case_sensitive=False),
    help="Multiplier; all of them when omitted.",
)
@click.option("--bits", type=click.Choice(["8", "16", "32", "64"]))
@click.option("--temperature", type=click.FloatRange(min=0, min_open=True), default=300.0)
@common_options("EnergyParams")
def landauer(config, kind, bits, temperature, out, **_) -> int:
    """Gate counts and Landauer limit of integer multipliers."""
    if kind is None or bits is None:
        _write(format_landauer_table(temperature), out)
        return 0
    gates, floor = landauer_limit(kind, int(bits), temperature)
    _write(
        f"{kind} {bits}-bit: {gates} gates, Landauer floor {floor:.4e} J "
        f"({floor * 1e18:.3f} aJ) at {temperature:g} K\n",
        out,
    )
    return 0


@main.command()
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--canonical",
    type=click.FloatRange(min=0, min_open=True),
    help="Noiseless error rate; defaults to the error at the largest n_mac.",
)
@click.option("--threshold", type=click.FloatRange(min=1), default=1.5, show_default=True)
@click.option("--band", nargs=2, type=float, default=(1.2, 2.0), show_default=True)
@common_options("EnergyParams")
def sql(config, csv_path, canonical, threshold, band, out, **_) -> int:
    """Standard quantum limit of a sweep CSV."""
    params = EnergyParams(config=config)
    curve = read_csv(csv_path)
    if not curve.rows:
        raise click.BadParameter("the sweep holds no rows", param_hint="--csv")
    if canonical is None:
        canonical = max(curve.rows, key=lambda row: row.n_mac).error_rate
        if not canonical > 0:
            raise click.BadParameter(
                "the error rate at the largest n_mac is 0; pass it explicitly",
                param_hint="--canonical",
            )
    try:
        estimate = sql_extract(curve, canonical, threshold, tuple(band), params.wavelength)
    except NoCrossing:
        raise
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--csv") from e
    lines = [
        f"# qlonn {__version__}",
        f"# seed {curve.seed}",
        f"# config_hash {curve.config_hash}",
        f"# network_hash {curve.network_hash}",
        f"canonical_error = {canonical:.16e}",
        f"threshold = {threshold:g}",
        f"n_mac = {estimate.n_mac:.16e}",
        f"e_mac_J = {estimate.e_mac:.16e}",
        f"n_mac_band = {estimate.n_mac_band[0]:.16e},{estimate.n_mac_band[1]:.16e}",
        f"e_mac_band_J = {estimate.error_bars[0]:.16e},{estimate.error_bars[1]:.16e}",
        f"below_range = {str(estimate.below_range).lower()}",
        f"band_clamped = {','.join(str(flag).lower() for flag in estimate.band_clamped)}",
    ]
    _write("\n".join(lines) + "\n", out)
    return 0


@main.command("validate-oracle")
@click.option("--instances", default=20, show_default=True, type=click.IntRange(min=1))
@common_options("NoiseConfig")
def validate_oracle(config, instances, trials, threads, out, **_) -> int:
    """Moment checks of the Gaussian model against exact Poisson photocurrents."""
    noise = NoiseConfig(config=config)
    report = run_oracle_suite(
        seed=noise.seed,
        instances=instances,
        trials=trials or 10_000,
        threads=threads or 1,
        log=log,
    )
    _write(report.format(), out)
    if not report.passed:
        raise ValidationFailure("The Poisson oracle disagrees with the Gaussian model")
    return 0


def cli_main(argv: Sequence[str] | None = None) -> int:
    """
    Runs the command line and returns its exit code.

    0 on success, 1 on a validation failure or a domain error, 2 on a usage error.
    """
    try:
        result = main.main(
            args=list(argv) if argv is not None else None,
            prog_name="qlonn",
            standalone_mode=False,
        )
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except ValidationFailure as e:
        click.echo(f"Validation failed: {e}", err=True)
        return 1
    except (QlonnError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def run() -> None:
    sys.exit(cli_main())
