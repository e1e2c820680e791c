# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Closed-form energy accounting of the optical accelerator.

All functions are pure. Energies are in joules, lengths in meters, temperatures in kelvin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

import numpy as np
from traitlets import CaselessStrEnum, Float, Int, TraitError, validate
from traitlets.config import Configurable

from .patching import output_size
from .utils import CONSTANTS, NoCrossing, UnknownMultiplier

ASIC_ENERGY_PER_MAC = 1e-12
DEFAULT_TEMPERATURE = 300.0


class DetectionScheme(Enum):
    DUAL = "dual"
    SINGLE = "single"


class EnergyParams(Configurable):
    """Transmitter/receiver energies, wavelength, efficiencies and detection scheme."""

    e_in = Float(
        1e-12,
        config=True,
        help="""Energy per transmitted symbol (J), including optical energy and the electronic
        driving, serialization and DAC.""",
    )

    e_out = Float(
        1e-12, config=True, help="Energy per received symbol (J), including the ADC."
    )

    wavelength = Float(1.55e-6, config=True, help="Optical wavelength (m).")

    eta_d = Float(1.0, config=True, help="Detector efficiency, in (0, 1].")
    eta_c = Float(1.0, config=True, help="Coupling efficiency, in (0, 1].")
    eta_s = Float(1.0, config=True, help="Source (laser) efficiency, in (0, 1].")
    beta_mod = Float(1.0, config=True, help="Modulator efficiency factor, in (0, 1].")

    detection = CaselessStrEnum(
        [d.value for d in DetectionScheme],
        default_value=DetectionScheme.DUAL.value,
        config=True,
        help="""'dual' for balanced homodyne detection, 'single' for the single-detector
        scheme, which doubles the optical energy and the number of transmitted symbols.""",
    )

    n_mac = Float(
        10.0, config=True, help="Photons per MAC of the layer in the energy budget report."
    )
    fan_in = Int(100, config=True, help="Inputs N of the fully-connected layer in the budget.")
    fan_out = Int(100, config=True, help="Outputs N' of the fully-connected layer in the budget.")
    batch = Int(1, config=True, help="Batch size B sharing one pass of the weights.")
    e_neuron = Float(
        0.0, config=True, help="Electronic energy per neuron (J); reported divided by the fan-in."
    )
    e_weight = Float(
        0.0, config=True, help="Energy to generate one set of weights (J); reported divided by B."
    )

    @validate("e_in", "e_out", "e_neuron", "e_weight")
    def _nonnegative_energy(self, proposal):
        if not proposal["value"] >= 0:
            raise TraitError(f"{proposal['trait'].name} must be >= 0")
        return proposal["value"]

    @validate("wavelength")
    def _positive_wavelength(self, proposal):
        if not proposal["value"] > 0:
            raise TraitError("wavelength must be > 0")
        return proposal["value"]

    @validate("n_mac")
    def _nonnegative_photons(self, proposal):
        if not proposal["value"] >= 0:
            raise TraitError("n_mac must be >= 0")
        return proposal["value"]

    @validate("fan_in", "fan_out", "batch")
    def _positive_size(self, proposal):
        if proposal["value"] < 1:
            raise TraitError(f"{proposal['trait'].name} must be >= 1")
        return proposal["value"]

    @validate("eta_d", "eta_c", "eta_s", "beta_mod")
    def _valid_efficiency(self, proposal):
        if not 0 < proposal["value"] <= 1:
            raise TraitError(f"{proposal['trait'].name} must be in (0, 1]")
        return proposal["value"]

    @property
    def scheme(self) -> DetectionScheme:
        return DetectionScheme(self.detection)

    @property
    def optical_multiplier(self) -> float:
        return 2.0 if self.scheme is DetectionScheme.SINGLE else 1.0

    def as_dict(self) -> dict[str, Union[float, str]]:
        return {name: getattr(self, name) for name in sorted(self.class_trait_names(config=True))}


@dataclass(frozen=True)
class ConvDims:
    """Convolution dimensions; `padding` pre-pads the input on every side."""

    w: int
    h: int
    c: int
    k_x: int
    k_y: int
    c_out: int
    s_x: int = 1
    s_y: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        # raises ShapeMismatch / KernelLargerThanImage
        self.output_size

    @property
    def output_size(self) -> tuple[int, int]:
        return output_size(
            (self.w + 2 * self.padding, self.h + 2 * self.padding),
            (self.k_x, self.k_y),
            (self.s_x, self.s_y),
        )

    @property
    def macs(self) -> int:
        w_out, h_out = self.output_size
        return w_out * h_out * self.k_x * self.k_y * self.c_out * self.c


@dataclass(frozen=True)
class ConvCoefficients:
    c_in: float
    c_out: float
    macs: int


class MultiplierKind(Enum):
    WALLACE_BOOTH = "wallace-booth"
    SERIAL_PARALLEL = "serial-parallel"
    BRAUN = "braun"
    RIPPLE_CARRY_ADDER = "ripple-carry-adder"
    VEDIC = "vedic"


BIT_WIDTHS = (8, 16, 32, 64)

# (gate count, transistor count) of integer multipliers
GATE_COUNTS: dict[tuple[MultiplierKind, int], tuple[int, int]] = {
    (MultiplierKind.WALLACE_BOOTH, 8): (33, 168),
    (MultiplierKind.WALLACE_BOOTH, 16): (221, 1080),
    (MultiplierKind.WALLACE_BOOTH, 32): (1077, 5208),
    (MultiplierKind.WALLACE_BOOTH, 64): (4709, 22680),
    (MultiplierKind.SERIAL_PARALLEL, 8): (384, 1920),
    (MultiplierKind.SERIAL_PARALLEL, 16): (1536, 7680),
    (MultiplierKind.SERIAL_PARALLEL, 32): (6144, 30720),
    (MultiplierKind.SERIAL_PARALLEL, 64): (24576, 122880),
    (MultiplierKind.BRAUN, 8): (344, 1728),
    (MultiplierKind.BRAUN, 16): (1456, 7296),
    (MultiplierKind.BRAUN, 32): (5984, 29952),
    (MultiplierKind.BRAUN, 64): (24256, 121344),
    (MultiplierKind.RIPPLE_CARRY_ADDER, 8): (96, 480),
    (MultiplierKind.RIPPLE_CARRY_ADDER, 16): (384, 1920),
    (MultiplierKind.RIPPLE_CARRY_ADDER, 32): (1536, 7680),
    (MultiplierKind.RIPPLE_CARRY_ADDER, 64): (6144, 30720),
    (MultiplierKind.VEDIC, 8): (49, 252),
    (MultiplierKind.VEDIC, 16): (281, 1428),
    (MultiplierKind.VEDIC, 32): (1321, 6660),
    (MultiplierKind.VEDIC, 64): (5705, 28644),
}


def gemm_energy(m: int, n: int, k: int, params: EnergyParams) -> tuple[float, float]:
    """
    Energy of an optical GEMM of an m x k matrix with a k x n matrix.

        Returns:
            e_tot (float): (mk + nk) E_in + mn E_out.
            e_mac (float): e_tot / (mnk) = (1/n + 1/m) E_in + E_out / k.
    """
    if min(m, n, k) < 1:
        raise ValueError(f"GEMM dimensions must be >= 1, got {(m, n, k)}")
    e_in = params.e_in * params.optical_multiplier
    e_tot = (m * k + n * k) * e_in + (m * n) * params.e_out
    return e_tot, e_tot / (m * n * k)


def conv_coefficients(dims: ConvDims) -> ConvCoefficients:
    """c_in = (1/C' + 1/W'H')^-1, c_out = K_x K_y C and the MAC count, unrounded."""
    w_out, h_out = dims.output_size
    c_in = 1.0 / (1.0 / dims.c_out + 1.0 / (w_out * h_out))
    return ConvCoefficients(c_in=c_in, c_out=float(dims.k_x * dims.k_y * dims.c), macs=dims.macs)


def conv_energy_per_mac(dims: ConvDims, params: EnergyParams) -> float:
    coefficients = conv_coefficients(dims)
    e_in = params.e_in * params.optical_multiplier
    return e_in / coefficients.c_in + params.e_out / coefficients.c_out


def photon_energy(n_mac: float, wavelength: float = 1.55e-6) -> float:
    """n_mac h c / lambda."""
    if n_mac < 0:
        raise ValueError(f"n_mac must be >= 0, got {n_mac}")
    return n_mac * CONSTANTS.h * CONSTANTS.c / wavelength


def inefficiency_factor(params: EnergyParams) -> float:
    return 1.0 / (params.eta_d * params.eta_c * params.eta_s * params.beta_mod)


def optical_energy_per_mac(n_mac: float, params: EnergyParams) -> float:
    """Wall-plug optical energy of n_mac photons, detection overhead included."""
    return (
        photon_energy(n_mac, params.wavelength)
        * inefficiency_factor(params)
        * params.optical_multiplier
    )


def weight_amortization(e_weight: float, batch: int) -> float:
    """Weight-generation energy per use when one weight pass serves a batch of size B."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    return e_weight / batch


def neuron_energy_per_mac(e_neuron: float, fan_in: int) -> float:
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return e_neuron / fan_in


def _multiplier(kind: MultiplierKind | str) -> MultiplierKind:
    if isinstance(kind, MultiplierKind):
        return kind
    try:
        return MultiplierKind(str(kind).lower().replace("_", "-"))
    except ValueError as e:
        names = ", ".join(k.value for k in MultiplierKind)
        raise UnknownMultiplier(f"Unknown multiplier {kind!r}; expected one of {names}") from e


def landauer_limit(
    kind: MultiplierKind | str, bits: int, temperature: float = DEFAULT_TEMPERATURE
) -> tuple[int, float]:
    """
    Landauer floor of one multiplication.

        Parameters:
            kind (MultiplierKind | str): Multiplier architecture.
            bits (int): Operand width, one of 8, 16, 32, 64.
            temperature (float): Kelvin.

        Returns:
            gates (int): Gate count of the multiplier.
            e_mac_floor (float): gates k_B T ln 2.

        Raises:
            UnknownMultiplier: for a kind or bit width outside of the gate-count table.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    key = (_multiplier(kind), int(bits))
    if key not in GATE_COUNTS:
        raise UnknownMultiplier(f"No gate count for {key[0].value} at {bits} bits")
    gates = GATE_COUNTS[key][0]
    return gates, gates * CONSTANTS.k_B * temperature * math.log(2)


@dataclass(frozen=True)
class LandauerRow:
    kind: MultiplierKind
    bits: int
    gates: int
    transistors: int
    e_mac_floor: float


def landauer_table(temperature: float = DEFAULT_TEMPERATURE) -> list[LandauerRow]:
    rows = []
    for (kind, bits), (gates, transistors) in GATE_COUNTS.items():
        _, floor = landauer_limit(kind, bits, temperature)
        rows.append(LandauerRow(kind, bits, gates, transistors, floor))
    return rows


@dataclass(frozen=True)
class SqlEstimate:
    """Photons per MAC (and joules) at which the error rate meets the threshold."""

    n_mac: float
    e_mac: float
    n_mac_band: tuple[float, float]
    error_bars: tuple[float, float]
    below_range: bool = False
    band_clamped: tuple[bool, bool] = (False, False)


def _curve_points(curve) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(curve, "rows"):
        pairs = [(row.n_mac, row.error_rate) for row in curve.rows]
    else:
        pairs = [(n, err) for n, err in curve]
    pairs.sort(key=lambda pair: pair[0])
    n_mac = np.array([p[0] for p in pairs], dtype=np.float64)
    error = np.array([p[1] for p in pairs], dtype=np.float64)
    return n_mac, error


def _crossing(n_mac: np.ndarray, error: np.ndarray, target: float) -> tuple[float, bool]:
    # Returns (n_mac, below_range).
    failing = np.flatnonzero(error >= target)
    if failing.size == 0:
        return float(n_mac[0]), True
    last = int(failing[-1])
    if last == len(n_mac) - 1:
        raise NoCrossing(
            f"The error rate {error[-1]} at n_mac={n_mac[-1]} still exceeds {target}; "
            "extend the sweep to higher photon numbers"
        )
    fraction = (error[last] - target) / (error[last] - error[last + 1])
    log_n = np.log(n_mac[last]) + fraction * (np.log(n_mac[last + 1]) - np.log(n_mac[last]))
    return float(np.exp(log_n)), False


def sql_extract(
    curve,
    canonical_error: float,
    threshold: float = 1.5,
    band: tuple[float, float] = (1.2, 2.0),
    wavelength: float = 1.55e-6,
) -> SqlEstimate:
    """
    Locates the standard quantum limit on an error-rate curve.

    The SQL is the smallest n_mac above which the error rate stays below
    `threshold * canonical_error`: scanning from the highest n_mac down, the last point at or
    above the target and its successor are interpolated, linearly in error rate and in log
    n_mac. The band thresholds give the error bars the same way; a band edge that never crosses
    is clamped to the curve range and flagged.

        Parameters:
            curve (SweepResult | Iterable[tuple[float, float]]): (n_mac, error_rate) points.
            canonical_error (float): Noiseless error rate, > 0.
            threshold (float): Multiple of the canonical error defining the SQL.
            band (tuple[float, float]): Thresholds of the error bars.
            wavelength (float): Wavelength of the photon energy.

        Returns:
            estimate (SqlEstimate): n_mac, E_mac = n_mac h c / lambda and the error bars.

        Raises:
            NoCrossing: if the highest-energy point does not satisfy the threshold.
    """
    if not canonical_error > 0:
        raise ValueError(f"canonical_error must be > 0, got {canonical_error}")
    n_mac, error = _curve_points(curve)
    if len(n_mac) < 2:
        raise ValueError("An error-rate curve needs at least two points")
    n_sql, below_range = _crossing(n_mac, error, threshold * canonical_error)

    edges = []
    clamped = []
    for factor in sorted(band, reverse=True):
        try:
            edge, below = _crossing(n_mac, error, factor * canonical_error)
            clamped.append(below)
        except NoCrossing:
            edge = float(n_mac[-1])
            clamped.append(True)
        edges.append(edge)
    low, high = edges
    return SqlEstimate(
        n_mac=n_sql,
        e_mac=photon_energy(n_sql, wavelength),
        n_mac_band=(low, high),
        error_bars=(photon_energy(low, wavelength), photon_energy(high, wavelength)),
        below_range=below_range,
        band_clamped=(clamped[0], clamped[1]),
    )


@dataclass(frozen=True)
class EnergyBudget:
    """Contributions to the energy per MAC of one optical layer."""

    optical: float
    transceiver: float
    neuron: float
    weight: float
    landauer_floor: float
    asic_reference: float = ASIC_ENERGY_PER_MAC

    @property
    def total(self) -> float:
        return self.optical + self.transceiver + self.neuron + self.weight


def energy_budget(
    n_mac: float,
    fan_in: int,
    fan_out: int,
    params: EnergyParams,
    batch: int = 1,
    e_neuron: float = 0.0,
    e_weight: float = 0.0,
    kind: MultiplierKind | str = MultiplierKind.WALLACE_BOOTH,
    bits: int = 32,
    temperature: float = DEFAULT_TEMPERATURE,
) -> EnergyBudget:
    """Per-MAC energy items of a fan_out x fan_in layer run on a batch of size `batch`."""
    _, e_transceiver = gemm_energy(fan_out, batch, fan_in, params)
    _, floor = landauer_limit(kind, bits, temperature)
    return EnergyBudget(
        optical=optical_energy_per_mac(n_mac, params),
        transceiver=e_transceiver,
        neuron=neuron_energy_per_mac(e_neuron, fan_in),
        weight=weight_amortization(e_weight, batch) / (fan_in * fan_out),
        landauer_floor=floor,
    )


@dataclass(frozen=True)
class TableRow:
    name: str
    input: str
    output: str
    kernel: str
    stride: str
    dims: ConvDims | None = None
    macs: int | None = None


def _shape(*dims: int) -> str:
    return "x".join(str(d) for d in dims)


def _conv_row(name: str, dims: ConvDims) -> TableRow:
    w_out, h_out = dims.output_size
    return TableRow(
        name,
        _shape(dims.w, dims.h, dims.c),
        _shape(w_out, h_out, dims.c_out),
        _shape(dims.k_x, dims.k_y, dims.c_out, dims.c),
        str(dims.s_x),
        dims=dims,
        macs=dims.macs,
    )


def _pool_row(size: int, channels: int, out: int) -> TableRow:
    return TableRow("(pool)", _shape(size, size, channels), _shape(out, out, channels), "-", "2")


def _fc_row(name: str, input: str, n_in: int, n_out: int) -> TableRow:
    return TableRow(name, input, str(n_out), "-", "-", macs=n_in * n_out)


# CONV2 to CONV5 are padded convolutions, written as valid convolutions of pre-padded inputs.
ALEXNET_CONV: dict[str, ConvDims] = {
    "CONV1": ConvDims(227, 227, 3, 11, 11, 96, 4, 4),
    "CONV2": ConvDims(27, 27, 96, 5, 5, 256, padding=2),
    "CONV3": ConvDims(13, 13, 256, 3, 3, 384, padding=1),
    "CONV4": ConvDims(13, 13, 384, 3, 3, 384, padding=1),
    "CONV5": ConvDims(13, 13, 384, 3, 3, 256, padding=1),
}

ALEXNET_LAYERS: tuple[TableRow, ...] = (
    _conv_row("CONV1", ALEXNET_CONV["CONV1"]),
    _pool_row(55, 96, 27),
    _conv_row("CONV2", ALEXNET_CONV["CONV2"]),
    _pool_row(27, 256, 13),
    _conv_row("CONV3", ALEXNET_CONV["CONV3"]),
    _conv_row("CONV4", ALEXNET_CONV["CONV4"]),
    _conv_row("CONV5", ALEXNET_CONV["CONV5"]),
    _pool_row(13, 256, 6),
    _fc_row("FC1", "6x6x256", 9216, 4096),
    _fc_row("FC2", "4096", 4096, 4096),
    _fc_row("FC3", "4096", 4096, 1000),
)


def mac_weighted_coefficients(dims: Iterable[ConvDims]) -> ConvCoefficients:
    """
    Layer-aggregate c_in and c_out.

    The aggregate coefficients are the ones that give the total transmitter (receiver) energy
    of all layers when divided into it, so they are MAC-weighted harmonic means.
    """
    coefficients = [conv_coefficients(d) for d in dims]
    macs = sum(c.macs for c in coefficients)
    return ConvCoefficients(
        c_in=macs / sum(c.macs / c.c_in for c in coefficients),
        c_out=macs / sum(c.macs / c.c_out for c in coefficients),
        macs=macs,
    )


_SI_PREFIXES = {0: "", 3: "k", 6: "M", 9: "G", 12: "T", 15: "P"}


def format_si(value: float, digits: int = 3) -> str:
    """Formats a count with `digits` significant figures and an SI prefix (1.08G, 105M)."""
    if value == 0:
        return "0"
    rounded = float(f"{value:.{digits}g}")
    group = min(max(0, int(math.floor(math.log10(abs(rounded)) / 3)) * 3), 15)
    mantissa = rounded / 10**group
    decimals = max(0, digits - 1 - int(math.floor(math.log10(abs(mantissa)))))
    return f"{mantissa:.{decimals}f}{_SI_PREFIXES[group]}"


_COLUMNS = (
    ("layer", 10),
    ("input", 11),
    ("output", 11),
    ("kernel", 13),
    ("stride", 6),
    ("macs", 6),
    ("c_in", 5),
    ("c_out", 5),
)


def _format_line(cells: Sequence[str]) -> str:
    return "  ".join(cell.ljust(width) for cell, (_, width) in zip(cells, _COLUMNS)).rstrip()


def format_conv_table(layers: Sequence[TableRow] = ALEXNET_LAYERS) -> str:
    """The AlexNet layer table with MAC counts and amortization coefficients."""
    lines = [_format_line([name for name, _ in _COLUMNS])]
    for row in layers:
        if row.dims is not None:
            coefficients = conv_coefficients(row.dims)
            c_in, c_out = str(round(coefficients.c_in)), str(round(coefficients.c_out))
        else:
            c_in = c_out = "-"
        macs = "-" if row.macs is None else format_si(row.macs)
        cells = [row.name, row.input, row.output, row.kernel, row.stride, macs, c_in, c_out]
        lines.append(_format_line(cells))

    conv = mac_weighted_coefficients(r.dims for r in layers if r.dims is not None)
    fc_macs = sum(r.macs for r in layers if r.dims is None and r.macs is not None)
    totals = [format_si(conv.macs), str(round(conv.c_in)), str(round(conv.c_out))]
    lines.append(_format_line(["Total CONV", "", "", "", ""] + totals))
    lines.append(_format_line(["Total FC", "", "", "", "", format_si(fc_macs), "-", "-"]))
    return "\n".join(lines) + "\n"


def format_landauer_table(temperature: float = DEFAULT_TEMPERATURE) -> str:
    """Gate counts, transistor counts and Landauer floors of every multiplier."""
    lines = [f"{'multiplier':<20}  {'bits':>4}  {'gates':>6}  {'transistors':>11}  floor_J"]
    for row in landauer_table(temperature):
        lines.append(
            f"{row.kind.value:<20}  {row.bits:>4}  {row.gates:>6}  {row.transistors:>11}  "
            f"{row.e_mac_floor:.4e}"
        )
    return "\n".join(lines) + "\n"


def energy_report(params: EnergyParams, temperature: float = DEFAULT_TEMPERATURE) -> str:
    """Plain-text energy report, from the AlexNet table to the Landauer floors."""
    conv = mac_weighted_coefficients(ALEXNET_CONV.values())
    e_in = params.e_in * params.optical_multiplier
    lines = [
        "# AlexNet layers",
        format_conv_table().rstrip("\n"),
        "",
        "# Energy per MAC",
        f"e_in_J = {params.e_in:.4e}",
        f"e_out_J = {params.e_out:.4e}",
        f"detection = {params.detection}",
    ]
    for name, dims in ALEXNET_CONV.items():
        lines.append(f"{name}_e_mac_J = {conv_energy_per_mac(dims, params):.4e}")
    lines.append(f"CONV_e_mac_J = {e_in / conv.c_in + params.e_out / conv.c_out:.4e}")
    lines.append(f"photon_J = {photon_energy(1.0, params.wavelength):.6e}")
    lines.append(f"inefficiency = {inefficiency_factor(params):.6g}")
    budget = energy_budget(
        params.n_mac,
        params.fan_in,
        params.fan_out,
        params,
        batch=params.batch,
        e_neuron=params.e_neuron,
        e_weight=params.e_weight,
        temperature=temperature,
    )
    lines.extend(
        [
            "",
            f"# Energy budget of a {params.fan_out}x{params.fan_in} layer, batch {params.batch}",
            f"n_mac = {params.n_mac:g}",
            f"optical_J = {budget.optical:.4e}",
            f"transceiver_J = {budget.transceiver:.4e}",
            f"neuron_J = {budget.neuron:.4e}",
            f"weight_amortized_J = {weight_amortization(params.e_weight, params.batch):.4e}",
            f"weight_J = {budget.weight:.4e}",
            f"total_J = {budget.total:.4e}",
            f"landauer_floor_J = {budget.landauer_floor:.4e}",
            f"asic_reference_J = {budget.asic_reference:.4e}",
        ]
    )
    lines.extend(
        [
            "",
            f"# Landauer limit at {temperature:g} K",
            format_landauer_table(temperature).rstrip("\n"),
        ]
    )
    return "\n".join(lines) + "\n"
