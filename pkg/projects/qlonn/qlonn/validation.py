# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Moment checks of the Gaussian shot-noise model against the exact Poisson photocurrents."""
from __future__ import annotations

from dataclasses import dataclass
from logging import Logger, getLogger
from typing import Sequence

import numpy as np
from scipy.stats import ks_2samp

from .noise import (
    NoiseConfig,
    PhotonBudget,
    homodyne_mm_poisson,
    homodyne_mv_gaussian,
    homodyne_mv_poisson,
    noise_std_mm,
    noise_std_mv,
)
from .workers import TrialPool

# Extra samples of the distribution comparison, relative to `trials`.
KS_ORACLE_FACTOR = 4
KS_GAUSSIAN_FACTOR = 10

# Columns per call when repeating one vector many times.
_COLUMN_CHUNK = 1000


@dataclass(frozen=True)
class OracleCheck:
    """Result of one (A, x) instance."""

    name: str
    n_in: int
    n_mac: float
    mean_z: float
    variance_rel_error: float
    ks_distance: float | None
    passed: bool


@dataclass(frozen=True)
class OracleReport:
    checks: tuple[OracleCheck, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def format(self) -> str:
        lines = ["instance  n_in  n_mac  mean_z  var_rel_err  ks  status"]
        for check in self.checks:
            ks = "-" if check.ks_distance is None else f"{check.ks_distance:.4f}"
            status = "ok" if check.passed else "FAIL"
            lines.append(
                f"{check.name}  {check.n_in}  {check.n_mac:g}  {check.mean_z:.3f}  "
                f"{check.variance_rel_error:.4f}  {ks}  {status}"
            )
        lines.append("passed" if self.passed else "failed")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class _Instance:
    index: int
    n_in: int
    n_mac: float


def _repeat(product, weights, x, budget, rng, count: int) -> np.ndarray:
    """Outputs of `count` independent products of the same vector, as (outputs, count)."""
    parts = []
    for start in range(0, count, _COLUMN_CHUNK):
        columns = np.repeat(x[:, None], min(_COLUMN_CHUNK, count - start), axis=1)
        parts.append(product(weights, columns, budget, rng).values)
    return np.concatenate(parts, axis=1)


def _moments(
    samples: np.ndarray, exact: np.ndarray, predicted_std: np.ndarray
) -> tuple[float, float]:
    # samples: (outputs, trials); returns the worst |z| of the mean and relative variance error.
    trials = samples.shape[1]
    mean = samples.mean(axis=1)
    standard_error = samples.std(axis=1, ddof=1) / np.sqrt(trials)
    mean_z = float(np.max(np.abs(mean - exact) / standard_error))
    variance = samples.var(axis=1, ddof=1)
    predicted = np.square(predicted_std)
    return mean_z, float(np.max(np.abs(variance - predicted) / predicted))


def run_oracle_suite(
    seed: int = 0,
    instances: int = 20,
    trials: int = 10_000,
    sizes: Sequence[int] = (10, 100, 1000),
    n_macs: Sequence[float] = (1.0, 10.0),
    ks_size: int = 1000,
    mean_sigmas: float = 3.0,
    variance_rtol: float = 0.05,
    ks_max: float = 0.02,
    threads: int = 1,
    log: Logger | None = None,
) -> OracleReport:
    """
    Compares the Poisson photocurrent oracle with the Gaussian model.

    Instance i draws a random 1 x N weight row and a unit-norm vector with N = sizes[i mod
    len(sizes)] and n_mac = n_macs[(i // len(sizes)) mod len(n_macs)]. The oracle mean must lie
    within `mean_sigmas` standard errors of A x and its variance within `variance_rtol` of the
    exact-norm prediction. For N = `ks_size` the standardized oracle and Gaussian samples must
    also be within Kolmogorov-Smirnov distance `ks_max`. A final 2x3 by 3x2 matrix-matrix
    instance at 50 photons per MAC checks the GEMM oracle the same way.
    """
    log = log or getLogger(__name__)
    noise = NoiseConfig(seed=seed)
    cases = [
        _Instance(i, sizes[i % len(sizes)], n_macs[(i // len(sizes)) % len(n_macs)])
        for i in range(instances)
    ]

    def _check(case: _Instance) -> OracleCheck:
        setup = noise.stream(case.index, 0)
        weights = setup.standard_normal((1, case.n_in))
        x = setup.standard_normal(case.n_in)
        x /= np.linalg.norm(x)
        budget = PhotonBudget.equal_split(case.n_mac)
        exact = weights @ x
        std = noise_std_mv(weights, x, budget)

        rng = noise.stream(case.index, 1)
        samples = _repeat(homodyne_mv_poisson, weights, x, budget, rng, trials)
        mean_z, variance_error = _moments(samples, exact, std)

        ks = None
        if case.n_in == ks_size:
            oracle = _repeat(
                homodyne_mv_poisson,
                weights,
                x,
                budget,
                noise.stream(case.index, 2),
                KS_ORACLE_FACTOR * trials,
            )
            gaussian = _repeat(
                homodyne_mv_gaussian,
                weights,
                x,
                budget,
                noise.stream(case.index, 3),
                KS_GAUSSIAN_FACTOR * trials,
            )
            standardized = (oracle[0] - exact[0]) / std[0], (gaussian[0] - exact[0]) / std[0]
            ks = float(ks_2samp(*standardized).statistic)

        passed = (
            mean_z <= mean_sigmas
            and variance_error <= variance_rtol
            and (ks is None or ks < ks_max)
        )
        log.debug(
            "Oracle instance %s: mean z %s, variance error %s", case.index, mean_z, variance_error
        )
        return OracleCheck(
            f"mv{case.index}", case.n_in, case.n_mac, mean_z, variance_error, ks, passed
        )

    with TrialPool(threads, log) as pool:
        checks = pool.map(_check, cases)

    # GEMM oracle, one pixel per entry
    setup = noise.stream(instances, 0)
    a = setup.standard_normal((2, 3))
    b = setup.standard_normal((3, 2))
    budget = PhotonBudget.equal_split(50.0)
    rng = noise.stream(instances, 1)
    samples = np.stack(
        [homodyne_mm_poisson(a, b, budget, rng).values.ravel() for _ in range(trials)], axis=1
    )
    mean_z, variance_error = _moments(
        samples, (a @ b).ravel(), noise_std_mm(a, b, budget).ravel()
    )
    checks.append(
        OracleCheck(
            "mm",
            3,
            50.0,
            mean_z,
            variance_error,
            None,
            mean_z <= mean_sigmas and variance_error <= variance_rtol,
        )
    )
    report = OracleReport(tuple(checks))
    log.info("Oracle suite %s over %s instance(s)", report.passed, len(checks))
    return report
