# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from qlonn.energy import (
    ALEXNET_CONV,
    BIT_WIDTHS,
    GATE_COUNTS,
    ConvDims,
    EnergyParams,
    MultiplierKind,
    conv_coefficients,
    conv_energy_per_mac,
    energy_budget,
    energy_report,
    format_conv_table,
    format_si,
    gemm_energy,
    inefficiency_factor,
    landauer_limit,
    mac_weighted_coefficients,
    optical_energy_per_mac,
    photon_energy,
    sql_extract,
    weight_amortization,
)
from qlonn.utils import NoCrossing, UnknownMultiplier
from traitlets import TraitError

FIXTURES = Path(__file__).parent / "fixtures"


def test_gemm_energy_of_unit_dimensions():
    e_tot, e_mac = gemm_energy(1, 1, 1, EnergyParams(e_in=1.0, e_out=1.0))

    assert e_tot == 3.0
    assert e_mac == 3.0


def test_gemm_energy_of_a_square_product():
    _, e_mac = gemm_energy(100, 100, 100, EnergyParams(e_in=1e-12, e_out=1e-12))

    assert e_mac == pytest.approx(0.03e-12, rel=1e-12)


def test_gemm_energy_per_mac_times_macs_is_the_total(qlonn_rng):
    params = EnergyParams(e_in=3.7e-13, e_out=8.1e-12)
    for m, n, k in qlonn_rng.integers(1, 5000, size=(50, 3)):
        e_tot, e_mac = gemm_energy(int(m), int(n), int(k), params)
        assert e_mac * (m * n * k) == pytest.approx(e_tot, rel=1e-15)
        expected = (1 / n + 1 / m) * params.e_in + params.e_out / k
        assert e_mac == pytest.approx(expected, rel=1e-12)


def test_single_detector_doubles_the_optical_energy_only():
    dual = EnergyParams(e_in=1.0, e_out=1.0)
    single = EnergyParams(e_in=1.0, e_out=1.0, detection="single")

    assert gemm_energy(1, 1, 1, single)[0] == 5.0
    assert conv_energy_per_mac(ALEXNET_CONV["CONV1"], single) > conv_energy_per_mac(
        ALEXNET_CONV["CONV1"], dual
    )
    assert optical_energy_per_mac(10.0, single) == 2 * optical_energy_per_mac(10.0, dual)


@pytest.mark.parametrize(
    "name, c_in, c_out, macs",
    [
        ("CONV1", 93, 363, 105_415_200),
        ("CONV2", 189, 2400, 447_897_600),
        ("CONV3", 117, 2304, 149_520_384),
        ("CONV4", 117, 3456, 224_280_576),
        ("CONV5", 102, 3456, 149_520_384),
    ],
)
def test_conv_coefficients_of_alexnet(name, c_in, c_out, macs):
    coefficients = conv_coefficients(ALEXNET_CONV[name])

    assert round(coefficients.c_in) == c_in
    assert coefficients.c_out == c_out
    assert coefficients.macs == macs


def test_conv_coefficients_of_a_unit_convolution():
    coefficients = conv_coefficients(ConvDims(1, 1, 1, 1, 1, 1))

    assert coefficients.c_in == 0.5
    assert coefficients.c_out == 1
    assert coefficients.macs == 1


def test_conv_energy_per_mac_of_the_first_layer():
    params = EnergyParams(e_in=100e-12, e_out=100e-12)

    assert conv_energy_per_mac(ALEXNET_CONV["CONV1"], params) == pytest.approx(1.35e-12, rel=0.01)
    assert conv_energy_per_mac(ALEXNET_CONV["CONV1"], EnergyParams(e_in=0, e_out=0)) == 0


def test_conv_layers_reach_sub_picojoule_macs():
    params = EnergyParams(e_in=100e-12, e_out=100e-12)
    conv = mac_weighted_coefficients(ALEXNET_CONV.values())

    assert conv.c_in > 100
    assert conv.c_out > 1000
    assert params.e_in / conv.c_in + params.e_out / conv.c_out < 1e-12
    total = sum(conv_energy_per_mac(d, params) * d.macs for d in ALEXNET_CONV.values())
    assert total / conv.macs == pytest.approx(
        params.e_in / conv.c_in + params.e_out / conv.c_out, rel=1e-12
    )


def test_photon_energy():
    assert photon_energy(0.0) == 0.0
    assert photon_energy(1.0) == pytest.approx(1.28158e-19, rel=1e-5)
    assert 0.5e-18 < photon_energy(10.0) < 1.5e-18
    with pytest.raises(ValueError):
        photon_energy(-1.0)


def test_inefficiency_factor():
    assert inefficiency_factor(EnergyParams()) == 1.0
    assert inefficiency_factor(EnergyParams(eta_d=0.5)) == 2.0
    share = 0.1**0.25
    efficient = EnergyParams(eta_d=share, eta_c=share, eta_s=share, beta_mod=share)
    assert inefficiency_factor(efficient) == pytest.approx(10.0)


def test_energy_params_validation():
    with pytest.raises(TraitError):
        EnergyParams(eta_d=0.0)
    with pytest.raises(TraitError):
        EnergyParams(e_in=-1.0)
    with pytest.raises(TraitError):
        EnergyParams(detection="triple")
    with pytest.raises(TraitError):
        EnergyParams(batch=0)
    with pytest.raises(TraitError):
        EnergyParams(e_weight=-1e-9)


def test_landauer_limit_of_a_32_bit_multiplier():
    gates, floor = landauer_limit("wallace-booth", 32)

    assert gates == 1077
    assert floor == pytest.approx(3.09e-18, rel=0.01)


def test_landauer_limit_of_an_8_bit_multiplier():
    gates, floor = landauer_limit(MultiplierKind.WALLACE_BOOTH, 8)

    assert gates == 33
    assert 9e-20 < floor < 1e-19


def test_landauer_limit_is_linear_in_temperature():
    for kind in MultiplierKind:
        _, cold = landauer_limit(kind, 16, 150.0)
        _, warm = landauer_limit(kind, 16, 300.0)
        assert warm == pytest.approx(2 * cold, rel=1e-15)


def test_landauer_limit_grows_with_the_bit_width():
    for kind in MultiplierKind:
        floors = [landauer_limit(kind, bits)[1] for bits in BIT_WIDTHS]
        assert floors == sorted(floors)
        gates = [GATE_COUNTS[(kind, bits)][0] for bits in BIT_WIDTHS]
        assert all(small < large for small, large in zip(gates, gates[1:]))


def test_unknown_multiplier():
    with pytest.raises(UnknownMultiplier):
        landauer_limit("dadda", 32)
    with pytest.raises(UnknownMultiplier):
        landauer_limit("braun", 12)


def _curve(n_mac, canonical, excess):
    return [(float(n), canonical * (1 + excess(n))) for n in n_mac]


def test_sql_of_an_analytic_curve():
    grid = [0.5, 1.0, 2.0, 4.0, 8.0]
    curve = _curve(grid, 0.02, lambda n: 1 / n)

    estimate = sql_extract(curve, 0.02)

    assert estimate.n_mac == pytest.approx(2.0)
    assert estimate.e_mac == pytest.approx(photon_energy(2.0))
    low, high = estimate.n_mac_band
    assert low == pytest.approx(1.0)
    assert 4.0 < high < 8.0
    assert not estimate.below_range


def test_sql_of_a_flat_curve_is_the_first_point():
    estimate = sql_extract([(0.1, 0.02), (1.0, 0.02), (10.0, 0.02)], 0.02)

    assert estimate.n_mac == 0.1
    assert estimate.below_range


def test_sql_needs_a_crossing():
    with pytest.raises(NoCrossing):
        sql_extract([(1.0, 0.9), (10.0, 0.5)], 0.02)


def test_sql_band_edges_never_crossing_are_clamped():
    estimate = sql_extract([(1.0, 0.5), (10.0, 0.028), (100.0, 0.026)], 0.02)

    assert estimate.band_clamped == (False, True)
    assert estimate.n_mac_band[1] == 100.0


def test_sql_is_monotone_in_the_error_scale():
    grid = np.geomspace(0.1, 100.0, 13)
    base = sql_extract(_curve(grid, 0.02, lambda n: 3 / n), 0.02).n_mac
    worse = sql_extract(_curve(grid, 0.02, lambda n: 3.5 / n + 0.01), 0.02).n_mac

    assert worse >= base


def test_sql_reads_sweep_results():
    from qlonn.sweeps import SweepResult, SweepRow

    rows = [SweepRow(n, 0.1 * (1 + 1 / n), 0.0, 0.0, photon_energy(n)) for n in (1.0, 2.0, 4.0)]

    assert sql_extract(SweepResult(rows=rows), 0.1).n_mac == pytest.approx(2.0)


def test_energy_budget_items():
    params = EnergyParams(e_in=1e-12, e_out=1e-12)

    budget = energy_budget(10.0, 100, 100, params, batch=100, e_neuron=1e-12, e_weight=1e-9)

    assert budget.optical == pytest.approx(photon_energy(10.0))
    assert budget.transceiver == pytest.approx(0.03e-12)
    assert budget.neuron == pytest.approx(1e-14)
    assert budget.weight == pytest.approx(1e-9 / 100 / 10_000)
    assert budget.total > budget.transceiver
    assert weight_amortization(1.0, 4) == 0.25


def test_format_si():
    assert format_si(105_415_200) == "105M"
    assert format_si(1_076_634_144) == "1.08G"
    assert format_si(4_096_000) == "4.10M"
    assert format_si(0) == "0"


def test_alexnet_table_matches_the_reference():
    expected = (FIXTURES / "alexnet_table.txt").read_text(encoding="utf-8")

    assert format_conv_table() == expected


def test_energy_report_contains_the_tables():
    report = energy_report(EnergyParams(e_in=100e-12, e_out=100e-12))

    assert format_conv_table().rstrip("\n") in report
    assert "wallace-booth" in report
    assert "CONV1_e_mac_J = 1.35" in report


def test_energy_report_lists_the_layer_budget():
    params = EnergyParams(e_in=1e-12, e_out=1e-12, batch=10, e_weight=1e-9, e_neuron=1e-12)

    report = energy_report(params)

    budget = energy_budget(10.0, 100, 100, params, batch=10, e_neuron=1e-12, e_weight=1e-9)
    assert f"weight_amortized_J = {1e-10:.4e}" in report
    assert f"weight_J = {budget.weight:.4e}" in report
    assert f"neuron_J = {budget.neuron:.4e}" in report
    assert f"total_J = {budget.total:.4e}" in report
