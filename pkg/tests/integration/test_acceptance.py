# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

"""Acceptance checks at the default resolution (10001 grid points, t_f = 100).

These solves take from seconds to tens of minutes each; run them with ``tox -e integration``.
"""

import math

import numpy as np
import pytest
from scipy.optimize import brentq, minimize

from scenario import ScenarioSpec, export, get_preset, run_scan, run_scenario
from solvers.dynamics import (
    DURATION_THRESHOLD,
    CostProfile,
    EpidemicParams,
    Trajectory,
    metrics,
    peak_value,
)
from solvers.government import GovernmentPreferences, government_value, solve_government
from solvers.individual import (
    evaluate_strategy,
    individual_gradient,
    solve_nash,
    stationarity_residual,
)
from solvers.sweep import SweepSettings
from solvers.utilitarian import hamiltonian_drift, population_utility

pytestmark = pytest.mark.slow

ORACLE_NODES = 50
# the direct optimisation runs on every fifth grid point
ORACLE_THINNING = 5


def test_baseline_matches_the_analytic_oracles(baseline, full):
    kappa, s0 = full.kappa_star, 1.0 - full.i0
    peak = full.i0 + s0 - math.log(s0) / kappa - (1.0 + math.log(kappa)) / kappa
    level = 1.0 - math.log(s0) / kappa
    s_final = brentq(lambda s: s - math.log(s) / kappa - level, 1e-6, 1.0 / kappa)

    assert peak_value(baseline.i) == pytest.approx(peak, abs=1e-5)
    assert peak_value(baseline.i) == pytest.approx(0.4034, abs=1e-3)
    assert baseline.s[-1] == pytest.approx(s_final, abs=1e-6)
    assert baseline.s[-1] == pytest.approx(0.0198, abs=1e-3)


class TestNash:
    def test_is_stationary(self, nash_400, full, constant_400):
        gradient = individual_gradient(nash_400.traj, full, constant_400)
        free, slack = stationarity_residual(gradient, nash_400.traj.k)

        assert free < 1e-6
        assert slack < 1e-6

    def test_flattens_and_lengthens_the_epidemic(self, nash_400, baseline):
        assert peak_value(nash_400.traj.i) < peak_value(baseline.i)
        assert metrics(nash_400.traj, 0.0).duration > metrics(baseline, 0.0).duration

    def test_matches_a_direct_optimisation(self, nash_400, full, constant_400):
        traj = nash_400.traj
        thin = slice(None, None, ORACLE_THINNING)
        p = EpidemicParams(n_grid=(full.n_grid - 1) // ORACLE_THINNING + 1)
        population = Trajectory(
            t=traj.t[thin], s=traj.s[thin], i=traj.i[thin], k=traj.k[thin], eps=traj.eps[thin]
        )
        nodes = np.linspace(0.0, full.t_f, ORACLE_NODES)

        def negative_utility(values):
            kappa = np.interp(population.t, nodes, values)
            return -evaluate_strategy(kappa, population, p, constant_400)

        start = np.interp(nodes, population.t, population.k)
        best = minimize(
            negative_utility,
            start,
            method="Powell",
            bounds=[(0.0, 2.0 * full.kappa_star)] * ORACLE_NODES,
            options={"maxfev": 6000, "xtol": 1e-4, "ftol": 1e-9},
        )
        equilibrium = evaluate_strategy(population.k, population, p, constant_400)

        assert -best.fun == pytest.approx(equilibrium, rel=1e-2)

    def test_resists_defection(self, full):
        c = CostProfile.constant(100.0)
        traj = solve_nash(0.0, full, c).traj
        reference = evaluate_strategy(traj.k, traj, full, c)
        rng = np.random.default_rng(7)
        t = traj.t / full.t_f
        for _ in range(20):
            weights = rng.normal(size=6)
            bump = sum(w * np.sin((n + 1) * np.pi * t) for n, w in enumerate(weights))
            deviation = np.maximum(traj.k + 0.2 * bump, 0.0)

            assert evaluate_strategy(deviation, traj, full, c) <= reference

    def test_resists_defection_at_a_high_infection_cost(self, nash_400, full, constant_400):
        traj = nash_400.traj
        reference = evaluate_strategy(traj.k, traj, full, constant_400)
        rng = np.random.default_rng(11)
        t = traj.t / full.t_f
        gains = []
        for _ in range(24):
            weights = rng.normal(size=6)
            bump = sum(w * np.sin((n + 1) * np.pi * t) for n, w in enumerate(weights))
            deviation = np.maximum(traj.k + 0.2 * bump, 0.0)
            gains.append(evaluate_strategy(deviation, traj, full, constant_400) - reference)

        assert max(gains) < 0.0


class TestUtilitarian:
    def test_beats_the_nash_equilibrium(self, utilitarian_400, nash_400, full, constant_400):
        nash_value = population_utility(nash_400.traj, full, constant_400)

        assert utilitarian_400.utility - nash_value > 1e-6

    def test_conserves_the_hamiltonian(self, utilitarian_400, full, constant_400):
        assert hamiltonian_drift(utilitarian_400.traj, full, constant_400) < 1e-4

    def test_fewer_cases_than_nash(self, utilitarian_400, nash_400):
        assert utilitarian_400.traj.s[-1] > nash_400.traj.s[-1]


class TestAlignedGovernment:
    @pytest.fixture(scope="class")
    def aligned(self, constant_400):
        return {
            gamma: GovernmentPreferences.aligned(constant_400, gamma=gamma) for gamma in (0.0, 0.5)
        }

    @pytest.fixture(scope="class")
    def cost_free(self, full, constant_400, aligned):
        return solve_government(full, constant_400, aligned[0.0], starts=("zero",))

    @pytest.fixture(scope="class")
    def costly(self, full, constant_400, aligned):
        return solve_government(full, constant_400, aligned[0.5], starts=("zero",))

    def test_reaches_the_utilitarian_optimum(self, cost_free, utilitarian_400):
        assert np.max(np.abs(cost_free.traj.k - utilitarian_400.traj.k)) < 1e-3

    def test_value_equals_the_utilitarian_utility(self, cost_free, utilitarian_400):
        assert cost_free.value == pytest.approx(utilitarian_400.utility, rel=1e-4)

    def test_first_encourages_then_discourages_contacts(self, cost_free):
        eps = np.asarray(cost_free.traj.eps)
        significant = np.abs(eps) > 1e-3 * np.max(np.abs(eps))
        first = int(np.argmax(significant))

        assert eps[first] > 0
        assert np.min(eps[first:]) < 0

    def test_costly_intervention_still_lowers_the_total_cost(
        self, costly, full, constant_400, nash_400
    ):
        assert -costly.value < -population_utility(nash_400.traj, full, constant_400)

    def test_costly_intervention_varies_contacts_less(self, cost_free, costly):
        def spread(solution):
            active = solution.traj.i > DURATION_THRESHOLD
            return float(np.var(solution.traj.k[active]))

        assert spread(costly) < spread(cost_free)

    def test_value_is_stationary_in_the_intervention(
        self, cost_free, nash_400, full, constant_400, aligned
    ):
        t = cost_free.traj.t
        eps = np.asarray(cost_free.traj.eps)
        rng = np.random.default_rng(3)
        candidates = np.flatnonzero(np.abs(eps) > 0.1 * np.max(np.abs(eps)))
        nodes = rng.choice(candidates, size=10, replace=False)
        sweep = SweepSettings(tol=1e-11)
        h = 1e-2

        def slope(base, initial_k, node):
            bump = np.exp(-(((t - t[node]) / 1.0) ** 2))
            values = [
                government_value(
                    solve_nash(base + sign * h * bump, full, constant_400, sweep, initial_k).traj,
                    full,
                    aligned[0.0],
                )
                for sign in (1.0, -1.0)
            ]
            return (values[0] - values[1]) / (2 * h)

        at_optimum = [abs(slope(eps, cost_free.traj.k, node)) for node in nodes]
        at_zero = [abs(slope(np.zeros_like(eps), nash_400.traj.k, node)) for node in nodes]

        assert max(at_optimum) < 1e-2 * max(at_zero)


class TestThresholdScans:
    @pytest.fixture(scope="class")
    def threshold_scan(self):
        return run_scan(get_preset("fig3-nash-hc-0.1").spec, jobs=-1)

    def test_peak_decreases_continuously(self, threshold_scan):
        peaks = threshold_scan.series("peak_i")

        assert np.all(np.isfinite(peaks))
        assert np.all(np.diff(peaks) <= 1e-6)
        assert np.max(np.abs(np.diff(peaks)) / peaks[:-1]) < 0.2

    def test_peak_meets_the_threshold_between_two_and_three_alpha0(self, threshold_scan):
        spec = threshold_scan.spec
        i_hc, alpha0 = spec.individual_cost.i_hc, spec.individual_cost.alpha0
        peaks = threshold_scan.series("peak_i")
        reached = [v for v, peak in zip(threshold_scan.values, peaks) if peak <= 1.1 * i_hc]

        assert 2 * alpha0 <= reached[0] <= 3 * alpha0

    def test_tracks_the_threshold_at_four_alpha0(self):
        spec = get_preset("fig3-nash-hc-0.1").spec.with_axis_value("alpha1", 400.0)

        assert run_scenario(spec).metrics.peak_i <= 1.2 * spec.individual_cost.i_hc

    def test_constant_cost_per_alpha_is_almost_constant(self):
        scan = run_scan(get_preset("fig3-nash-constant").spec, jobs=-1)
        per_alpha = scan.series("total_cost") / np.asarray(scan.values)

        np.testing.assert_allclose(per_alpha / np.mean(per_alpha), 1.0, atol=0.1)
        assert np.all(np.diff(scan.series("peak_i")) <= 1e-6)
        assert np.all(np.diff(scan.series("duration")) >= -1e-6)


class TestGovernmentThresholdScans:
    @pytest.fixture(scope="class")
    def scans(self):
        return {
            gamma: run_scan(get_preset(name).spec, jobs=-1)
            for gamma, name in ((0.0, "fig4-gov-hc-0.01-free"), (0.5, "fig4-gov-hc-0.01-costly"))
        }

    @pytest.mark.parametrize("gamma", [0.0, 0.5])
    def test_two_optima_everywhere(self, scans, gamma):
        for point in scans[gamma].points:
            assert point.converged, point.error
            assert None not in point.start_values.values()
            assert point.n_local_optima == 2

    @pytest.mark.parametrize("gamma", [0.0, 0.5])
    def test_peak_drops_sharply_once(self, scans, gamma):
        peaks = scans[gamma].series("peak_i")
        drops = -np.diff(peaks) / peaks[:-1]

        assert np.sum(drops > 0.5) == 1

    @pytest.mark.parametrize("gamma", [0.0, 0.5])
    def test_branch_values_cross_once(self, scans, gamma):
        gap = [p.start_values["zero"] - p.start_values["warm"] for p in scans[gamma].points]
        signs = np.sign(gap)

        assert np.sum(signs[1:] != signs[:-1]) == 1

    def test_costly_intervention_switches_later(self, scans):
        free, costly = scans[0.0].crossover, scans[0.5].crossover

        assert free is not None and costly is not None
        assert math.sqrt(free[0] * free[1]) < math.sqrt(costly[0] * costly[1])

    def test_without_intervention_the_peak_is_continuous(self):
        scan = run_scan(get_preset("fig4-nash-hc-0.01").spec, jobs=-1)
        peaks = scan.series("peak_i")

        assert np.max(np.abs(np.diff(peaks)) / peaks[:-1]) < 0.5


def test_exports_are_deterministic(tmp_path):
    spec = ScenarioSpec(
        role="nash",
        epidemic=EpidemicParams(n_grid=2001),
        individual_cost=CostProfile(alpha0=100.0, alpha1=400.0, i_hc=0.1),
    )
    paths = []
    for run in range(2):
        result = run_scenario(spec)
        for fmt in ("csv", "json"):
            paths.append(export(result, fmt, tmp_path / f"run{run}.{fmt}"))

    assert open(paths[0], "rb").read() == open(paths[2], "rb").read()
    assert open(paths[1], "rb").read() == open(paths[3], "rb").read()
