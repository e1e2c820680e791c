# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from logging import Logger, getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from traitlets import Float, Int, TraitError, validate
from traitlets.config import Configurable

from ._version import __version__
from .energy import photon_energy
from .loaders import Dataset
from .network import LayerNoisePolicy, NetworkSpec, monte_carlo_error_rate
from .noise import NoiseConfig, PhotonBudget
from .utils import QLONN_SWEEP_EVENTS_URI, LogLevel, config_hash
from .workers import TrialPool

if TYPE_CHECKING:
    from jupyter_events import EventLogger

CSV_HEADER = ("n_mac", "error_rate", "ci95", "photons_total", "e_mac_J")


class SweepConfig(Configurable):
    """Grid and Monte Carlo settings of an error-rate sweep."""

    n_mac_min = Float(1e-3, config=True, help="Smallest photons per MAC of the grid.")

    n_mac_max = Float(1e3, config=True, help="Largest photons per MAC of the grid.")

    points_per_decade = Int(3, config=True, help="Geometric grid density.")

    trials = Int(10, config=True, help="Noise re-draws per sample and grid point.")

    max_samples = Int(
        0, config=True, help="Evaluate only the first samples of the dataset; 0 uses all of them."
    )

    ablate_layer = Int(
        None,
        allow_none=True,
        config=True,
        help="""Index of the only optical layer (counted among FC and conv layers from 0)
        that keeps its noise. None puts noise in every layer.""",
    )

    input_fraction = Float(
        0.5, config=True, help="Share of the photons per MAC carried by the data signal."
    )

    top_k = Int(1, config=True, help="A sample counts as correct if its label is in the top k.")

    chunk_size = Int(
        256,
        config=True,
        help="""Samples per Monte Carlo unit. Each (point, trial, chunk) unit has its own
        random stream, so this value changes the random numbers but the thread count does
        not.""",
    )

    threads = Int(1, config=True, help="Worker threads; never changes the results.")

    @validate("n_mac_min", "n_mac_max")
    def _positive_n_mac(self, proposal):
        if not proposal["value"] > 0:
            raise TraitError(f"{proposal['trait'].name} must be > 0")
        return proposal["value"]

    @validate("points_per_decade", "trials", "top_k", "chunk_size", "threads")
    def _positive_count(self, proposal):
        if proposal["value"] < 1:
            raise TraitError(f"{proposal['trait'].name} must be >= 1")
        return proposal["value"]

    @validate("max_samples")
    def _nonnegative_samples(self, proposal):
        if proposal["value"] < 0:
            raise TraitError("max_samples must be >= 0")
        return proposal["value"]

    @validate("input_fraction")
    def _valid_fraction(self, proposal):
        if not 0 < proposal["value"] < 1:
            raise TraitError("input_fraction must be in (0, 1)")
        return proposal["value"]

    def grid(self) -> np.ndarray:
        return n_mac_grid(self.n_mac_min, self.n_mac_max, self.points_per_decade)

    def as_dict(self) -> dict[str, Any]:
        """The numerical settings; `threads` is left out."""
        return {
            name: getattr(self, name)
            for name in sorted(self.class_trait_names(config=True))
            if name != "threads"
        }


def n_mac_grid(n_min: float, n_max: float, points_per_decade: int) -> np.ndarray:
    """Geometric grid from n_min to n_max, both included."""
    if n_max < n_min:
        raise ValueError(f"n_mac_max ({n_max}) is below n_mac_min ({n_min})")
    if n_max == n_min:
        return np.array([float(n_min)])
    count = max(2, int(round(math.log10(n_max / n_min) * points_per_decade)) + 1)
    return np.geomspace(n_min, n_max, count)


@dataclass(frozen=True)
class SweepRow:
    n_mac: float
    error_rate: float
    ci95: float
    photons_total: float
    e_mac_J: float


@dataclass
class SweepResult:
    """An error-rate curve with its provenance; rows ascend in n_mac."""

    rows: list[SweepRow] = field(default_factory=list)
    seed: int = 0
    trials: int = 0
    network_hash: str = ""
    config_hash: str = ""
    version: str = __version__
    noise: str = ""

    def provenance(self) -> dict[str, str]:
        return {
            "qlonn": self.version,
            "seed": str(self.seed),
            "config_hash": self.config_hash,
            "network_hash": self.network_hash,
            "trials": str(self.trials),
            "noise": self.noise,
        }


def sweep_config_hash(config: SweepConfig, noise: NoiseConfig, wavelength: float) -> str:
    return config_hash(
        {"sweep": config.as_dict(), "noise": noise.as_dict(), "wavelength": wavelength}
    )


def _emit(
    event_logger: EventLogger | None,
    level: LogLevel,
    action: str | None = None,
    msg: str | None = None,
    **payload: Any,
) -> None:
    if event_logger is None:
        return
    data: dict[str, Any] = {"level": level.value}
    if action:
        data["action"] = action
    if msg:
        data["msg"] = msg
    data.update(payload)
    event_logger.emit(schema_id=QLONN_SWEEP_EVENTS_URI, data=data)


def run_sweep(
    net: NetworkSpec,
    dataset: Dataset,
    config: SweepConfig,
    noise: NoiseConfig,
    wavelength: float = 1.55e-6,
    network_hash: str = "",
    event_logger: EventLogger | None = None,
    log: Logger | None = None,
) -> SweepResult:
    """
    Sweeps the error rate over a geometric grid of photons per MAC.

    Grid point p runs `monte_carlo_error_rate` with stream key (p,); with the chunked units
    of every point, the result only depends on the seed and the configuration.

        Parameters:
            net (NetworkSpec): The network.
            dataset (Dataset): Labeled test samples.
            config (SweepConfig): Grid and Monte Carlo settings.
            noise (NoiseConfig): Noise model and master seed.
            wavelength (float): Wavelength of the e_mac_J column.
            network_hash (str): Recorded in the result.
            event_logger (EventLogger | None): Receives one event per grid point.
            log (Logger | None): Logger.

        Returns:
            result (SweepResult): One row per grid point.
    """
    log = log or getLogger(__name__)
    if config.max_samples:
        dataset = dataset.subset(config.max_samples)
    digest = sweep_config_hash(config, noise, wavelength)
    grid = config.grid()
    count = net.noisy_layer_count
    result = SweepResult(
        seed=noise.seed,
        trials=1 if noise.is_noiseless else config.trials,
        network_hash=network_hash,
        config_hash=digest,
        noise=noise.mode,
    )
    _emit(
        event_logger,
        LogLevel.INFO,
        "start",
        f"Sweeping {len(grid)} point(s) over {len(dataset)} sample(s)",
        seed=noise.seed,
        config_hash=digest,
    )
    with TrialPool(config.threads, log) as pool:
        for index, n_mac in enumerate(grid):
            budget = PhotonBudget.split(float(n_mac), config.input_fraction)
            if config.ablate_layer is None:
                policy = LayerNoisePolicy.uniform(count, budget)
            else:
                policy = LayerNoisePolicy.ablation(count, config.ablate_layer, budget)
            estimate = monte_carlo_error_rate(
                net,
                dataset,
                policy,
                noise,
                config.trials,
                top_k=config.top_k,
                chunk_size=config.chunk_size,
                pool=pool,
                stream_key=(index,),
            )
            row = SweepRow(
                n_mac=float(n_mac),
                error_rate=estimate.error_rate,
                ci95=estimate.ci95,
                photons_total=estimate.photons_per_inference,
                e_mac_J=photon_energy(float(n_mac), wavelength),
            )
            result.rows.append(row)
            log.info("n_mac %s: error rate %s +/- %s", row.n_mac, row.error_rate, row.ci95)
            _emit(
                event_logger,
                LogLevel.INFO,
                "point",
                f"Point {index} done",
                index=index,
                n_mac=row.n_mac,
                error_rate=row.error_rate,
                ci95=row.ci95,
                photons_total=row.photons_total,
            )
    _emit(event_logger, LogLevel.INFO, "end", "Sweep finished")
    return result


def format_csv(result: SweepResult) -> str:
    """`#` provenance lines, then the header and one row per point."""
    buffer = io.StringIO(newline="")
    for key, value in result.provenance().items():
        buffer.write(f"# {key} {value}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in result.rows:
        writer.writerow(
            [
                f"{value:.16e}"
                for value in (row.n_mac, row.error_rate, row.ci95, row.photons_total, row.e_mac_J)
            ]
        )
    return buffer.getvalue()


def emit_csv(result: SweepResult, path: str | Path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(format_csv(result))
    except OSError as e:
        raise OSError(f"Cannot write the sweep CSV {path}: {e}") from e


def parse_csv(text: str) -> SweepResult:
    provenance: dict[str, str] = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            provenance[key] = value
        elif line:
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is not None and tuple(header) != CSV_HEADER:
        raise ValueError(f"Unexpected sweep CSV header {header}")
    rows = [SweepRow(*(float(value) for value in record)) for record in reader]
    return SweepResult(
        rows=rows,
        seed=int(provenance.get("seed", 0)),
        trials=int(provenance.get("trials", 0)),
        network_hash=provenance.get("network_hash", ""),
        config_hash=provenance.get("config_hash", ""),
        version=provenance.get("qlonn", __version__),
        noise=provenance.get("noise", ""),
    )


def read_csv(path: str | Path) -> SweepResult:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"Cannot read the sweep CSV {path}: {e}") from e
    return parse_csv(text)


def emit_report(report: str, path: str | Path, provenance: dict[str, str]) -> None:
    """Writes a plain-text report headed by `#` provenance lines."""
    path = Path(path)
    header = "".join(f"# {key} {value}\n" for key, value in provenance.items())
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(header + report)
    except OSError as e:
        raise OSError(f"Cannot write the report {path}: {e}") from e
