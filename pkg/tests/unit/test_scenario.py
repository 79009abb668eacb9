# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

import scenario
from exceptions import EXIT_NOT_CONVERGED, ArtifactError, InvalidSpecError
from scenario import (
    PRESETS,
    PointOutcome,
    ScanAxis,
    ScenarioSpec,
    export,
    get_preset,
    load_spec,
    log_grid,
    render_presets,
    run_scan,
    run_scenario,
)
from services.artifacts import S3ArtifactStore
from solvers.dynamics import CostProfile, EpidemicParams, ScenarioMetrics, integrate_sir
from solvers.government import HIGH_PEAK, THRESHOLD_TRACKING, GovernmentPreferences
from solvers.sweep import SweepResult, SweepSettings


@pytest.fixture(scope="module")
def baseline_result(rough):
    return run_scenario(ScenarioSpec(role="baseline", epidemic=rough))


class TestScenarioSpec:
    def test_defaults(self):
        spec = ScenarioSpec()

        assert spec.role == "nash"
        assert spec.government_prefs is None
        assert spec.start_labels == ("zero", "warm")
        assert spec.outer_sweep == SweepSettings.outer()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"role": "dictator"},
            {"role": "government"},
            {"government_prefs": GovernmentPreferences.aligned(CostProfile())},
            {"starts": "cold"},
            {"scan": ScanAxis(name="gamma_g", values=(0.0, 0.5))},
        ],
    )
    def test_invalid_combinations(self, kwargs):
        with pytest.raises(InvalidSpecError):
            ScenarioSpec(**kwargs)

    @pytest.mark.parametrize(
        "name,values",
        [("kappa", (1.0, 2.0)), ("alpha1", ()), ("alpha1", (2.0, 1.0)), ("alpha1", ("a",))],
    )
    def test_invalid_scan_axis(self, name, values):
        with pytest.raises(InvalidSpecError):
            ScanAxis(name=name, values=values)

    def test_with_axis_value(self):
        gp = GovernmentPreferences.aligned(CostProfile(i_hc=0.01))
        spec = ScenarioSpec(role="government", government_prefs=gp)

        assert spec.with_axis_value("alpha", 250.0).individual_cost.alpha0 == 250.0
        assert spec.with_axis_value("alpha_g1", 800.0).government_prefs.cost.alpha1 == 800.0
        assert spec.with_axis_value("gamma_g", 0.5).government_prefs.gamma == 0.5
        moved = spec.with_axis_value("i_hc", 0.05)
        assert moved.individual_cost.i_hc == moved.government_prefs.cost.i_hc == 0.05


class TestFromDict:
    def test_merges_onto_the_base(self):
        spec = ScenarioSpec.from_dict(
            {"individual_cost": {"alpha1": 400.0}, "epidemic": {"n_grid": 501}}
        )

        assert spec.individual_cost == CostProfile(alpha1=400.0)
        assert spec.epidemic == EpidemicParams(n_grid=501)

    def test_government_role_defaults_to_aligned_preferences(self):
        spec = ScenarioSpec.from_dict(
            {"role": "government", "individual_cost": {"alpha0": 400.0, "alpha1": 400.0}}
        )

        assert spec.government_prefs == GovernmentPreferences.aligned(spec.individual_cost)

    def test_government_preferences_are_seeded_from_the_individual(self):
        spec = ScenarioSpec.from_dict(
            {
                "role": "government",
                "individual_cost": {"i_hc": 0.01},
                "government_prefs": {"alpha1": 1600.0, "gamma": 0.5},
            }
        )

        assert spec.government_prefs.cost.i_hc == 0.01
        assert spec.government_prefs.cost.alpha1 == 1600.0

    def test_leaving_the_government_role_drops_its_preferences(self):
        base = get_preset("fig2-gov-free").spec
        spec = ScenarioSpec.from_dict({"role": "nash"}, base=base)

        assert spec.government_prefs is None
        assert spec.individual_cost == base.individual_cost

    @pytest.mark.parametrize(
        "data",
        [
            {"colour": "red"},
            {"epidemic": {"beta": 1.0}},
            {"epidemic": 3},
            {"scan": {"values": [1.0]}},
            {"individual_cost": {"alpha0": -1.0}},
            [1, 2],
        ],
    )
    def test_rejects_malformed_documents(self, data):
        with pytest.raises(InvalidSpecError):
            ScenarioSpec.from_dict(data)

    def test_round_trips_through_to_dict(self):
        spec = get_preset("fig4-gov-hc-0.01-costly").spec

        assert ScenarioSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("lo,hi,count", [(100.0, 800.0, 24), (100.0, 1600.0, 31), (1.0, 10.0, 26)])
def test_log_grid(lo, hi, count):
    values = log_grid(lo, hi)

    assert len(values) == count
    assert values[0] == pytest.approx(lo)
    assert values[-1] == pytest.approx(hi)
    ratios = np.diff(np.log10(values))
    np.testing.assert_allclose(ratios, ratios[0])


@pytest.mark.parametrize("lo,hi,per_decade", [(0.0, 1.0, 25), (2.0, 1.0, 25), (1.0, 2.0, 0)])
def test_log_grid_rejects_bad_bounds(lo, hi, per_decade):
    with pytest.raises(InvalidSpecError):
        log_grid(lo, hi, per_decade)


class TestPresets:
    def test_every_preset_is_documented(self):
        for name, preset in PRESETS.items():
            assert name.startswith("fig")
            assert preset.panel and preset.description and preset.tolerance
            assert preset.spec.epidemic.t_f == 100.0

    def test_government_presets_carry_preferences(self):
        for preset in PRESETS.values():
            assert (preset.spec.government_prefs is not None) == (preset.spec.role == "government")

    def test_threshold_scans(self):
        assert len(get_preset("fig3-nash-hc-0.1").spec.scan.values) == 24
        assert get_preset("fig4-gov-hc-0.01-costly").spec.government_prefs.gamma == 0.5

    def test_unknown_preset(self):
        with pytest.raises(InvalidSpecError):
            get_preset("fig9")

    def test_render(self):
        text = render_presets()

        for name, preset in PRESETS.items():
            assert f"## {name}" in text
            assert preset.tolerance in text
        assert "- i_hc: 0.01" in text


class TestRunScenario:
    def test_baseline(self, baseline_result):
        assert baseline_result.role == "baseline"
        assert baseline_result.metrics.peak_i == pytest.approx(0.4034, abs=2e-3)
        assert baseline_result.metrics.total_cost > 0
        assert baseline_result.metadata["iterations"] == 0
        assert baseline_result.metadata["horizon_ok"] is True

    def test_short_horizon_is_reported(self, caplog):
        spec = ScenarioSpec(role="baseline", epidemic=EpidemicParams(t_f=10.0, n_grid=201))
        result = run_scenario(spec)

        assert result.metadata["horizon_ok"] is False
        assert "raise t_f" in caplog.text

    def test_nash(self, rough):
        spec = ScenarioSpec(role="nash", epidemic=rough, individual_cost=CostProfile.constant(100))
        result = run_scenario(spec)

        assert result.metrics.total_cost == pytest.approx(-result.solution.utility)
        assert result.metadata["iterations"] > 1
        assert result.metrics.branch is None


class TestExport:
    def test_csv_trajectory(self, baseline_result, tmp_path, rough):
        path = export(baseline_result, "csv", tmp_path / "baseline.csv")
        frame = pd.read_csv(path, float_precision="round_trip")

        assert list(frame.columns) == ["t", "s", "i", "r", "k", "eps"]
        assert len(frame) == rough.n_grid
        np.testing.assert_array_equal(frame["i"].to_numpy(), baseline_result.traj.i)

    def test_json_export_reproduces_the_run(self, baseline_result, tmp_path):
        path = export(baseline_result, "json", tmp_path / "baseline.json")
        document = json.loads(Path(path).read_text())
        spec = load_spec(path)

        assert spec == baseline_result.spec
        assert document["metrics"] == baseline_result.metrics.to_dict()
        assert run_scenario(spec).metrics == baseline_result.metrics

    def test_s3_export_uploads_the_file(self, baseline_result, mocker):
        uploaded = {}

        def upload_file(local, bucket, key):
            uploaded.update(bucket=bucket, key=key, text=Path(local).read_text())

        client = mocker.patch("boto3.client").return_value
        client.upload_file.side_effect = upload_file
        store = S3ArtifactStore(access_key="key", secret_access_key="secret")

        uri = export(baseline_result, "json", "s3://results/runs/baseline.json", store=store)

        assert uri == "s3://results/runs/baseline.json"
        assert (uploaded["bucket"], uploaded["key"]) == ("results", "runs/baseline.json")
        assert json.loads(uploaded["text"])["role"] == "baseline"

    def test_s3_prefix_is_named_after_the_role(self, baseline_result, mocker):
        client = mocker.patch("boto3.client").return_value
        store = S3ArtifactStore(access_key="key", secret_access_key="secret")

        uri = export(baseline_result, "csv", "s3://results/runs/", store=store)

        assert uri == "s3://results/runs/baseline.csv"
        assert client.upload_file.call_args[0][1:] == ("results", "runs/baseline.csv")

    def test_non_finite_numbers_are_written_as_null(self):
        document = {"residual": float("nan"), "values": (1.5, float("inf")), "role": "nash"}

        assert scenario._json_ready(document) == {
            "residual": None,
            "values": [1.5, None],
            "role": "nash",
        }

    def test_unknown_format(self, baseline_result, tmp_path):
        with pytest.raises(InvalidSpecError):
            export(baseline_result, "xlsx", tmp_path / "baseline.xlsx")

    def test_unwritable_destination(self, baseline_result, tmp_path):
        with pytest.raises(ArtifactError):
            export(baseline_result, "csv", tmp_path / "missing" / "baseline.csv")


class TestLoadSpec:
    def test_yaml(self, tmp_path):
        path = tmp_path / "scenario.yaml"
        path.write_text(yaml.safe_dump({"role": "utilitarian", "epidemic": {"i0": 1.0e-6}}))

        spec = load_spec(path)
        assert spec.role == "utilitarian"
        assert spec.epidemic.i0 == 1e-6

    def test_json_keeps_exponent_floats(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text('{"epidemic": {"i0": 3e-08}, "check_starts": true}')

        spec = load_spec(path, base=ScenarioSpec(role="utilitarian"))
        assert spec.epidemic.i0 == 3e-8
        assert spec.check_starts is True
        assert spec.role == "utilitarian"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError):
            load_spec(tmp_path / "absent.json")

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text("{role: nash")
        with pytest.raises(InvalidSpecError):
            load_spec(path)


class TestScan:
    def test_failed_points_are_recorded(self, rough, tmp_path):
        spec = ScenarioSpec(
            role="nash",
            epidemic=rough,
            individual_cost=CostProfile.constant(0.0),
            sweep=SweepSettings(max_iter=1),
            scan=ScanAxis(name="alpha", values=(0.0, 50.0)),
        )
        result = run_scan(spec)

        free, failed = result.points
        assert free.converged and free.iterations == 1
        assert not failed.converged
        assert failed.exit_code == EXIT_NOT_CONVERGED
        assert math.isnan(result.series("peak_i")[1])
        assert result.normalized_cost == {"alpha0": [None, None], "alpha1": [None, None]}
        assert result.crossover is None

        frame = pd.read_csv(export(result, "csv", tmp_path / "scan.csv"))
        assert list(frame.columns) == [
            "alpha",
            "peak_i",
            "total_cases",
            "duration",
            "total_cost",
            "branch",
            "error",
        ]
        text = Path(export(result, "json", tmp_path / "scan.json")).read_text()
        document = json.loads(text)
        assert "NaN" not in text
        assert document["metrics"]["peak_i"][1] is None
        assert document["points"][1]["error"] == failed.error

    def test_needs_an_axis(self):
        with pytest.raises(InvalidSpecError):
            run_scan(ScenarioSpec())

    def test_crossover_is_bisected_geometrically(self, mocker, rough):
        def evaluate(spec, value, warm_start=None, with_references=False):
            branch = HIGH_PEAK if value >= 300.0 else THRESHOLD_TRACKING
            summary = ScenarioMetrics(
                peak_i=0.0, total_cases=0.0, duration=0.0, total_cost=0.0, branch=branch
            )
            return PointOutcome(value=value, metrics=summary, converged=True)

        evaluate_point = mocker.patch("scenario._evaluate_point", side_effect=evaluate)
        spec = ScenarioSpec(
            role="government",
            epidemic=rough,
            government_prefs=GovernmentPreferences.aligned(CostProfile()),
            starts="zero",
            scan=ScanAxis(name="alpha_g1", values=(100.0, 200.0, 400.0, 800.0)),
        )
        result = run_scan(spec)

        lo, hi = result.crossover
        assert lo < 300.0 <= hi
        assert hi / lo == pytest.approx(2.0 ** (1.0 / 8.0))
        assert evaluate_point.call_count == 4 + scenario.CROSSOVER_DEPTH


@pytest.mark.parametrize(
    "name,gamma", [("fig4-gov-constant-free", 0.0), ("fig4-gov-constant-costly", 0.5)]
)
def test_constant_cost_government_scans(mocker, rough, name, gamma):
    traj = integrate_sir(3.0, rough)
    result = SweepResult(
        control=traj.eps, proposal=traj.eps, state=None, iterations=4, residual=1e-9, damping=0.05
    )
    solve_from = mocker.patch(
        "solvers.government._solve_from", return_value=(object(), traj, result)
    )
    preset = get_preset(name).spec
    axis = ScanAxis(name="alpha_g", values=(100.0, 400.0))
    spec = replace(preset, epidemic=rough, scan=axis)

    scan = run_scan(spec)

    assert preset.scan.values[0] == 100.0 and preset.scan.values[-1] == pytest.approx(1600.0)
    assert [point.converged for point in scan.points] == [True, True]
    assert scan.crossover is None
    assert [call[0][0] for call in solve_from.call_args_list] == ["zero", "zero"]
    for call, value in zip(solve_from.call_args_list, (100.0, 400.0)):
        cost = call[0][4].cost
        assert (cost.alpha0, cost.alpha1, cost.gamma) == (value, value, gamma)
    assert np.all(np.isfinite(scan.series("total_cost")))
