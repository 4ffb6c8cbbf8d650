"""Sweep tables, trend checks, calibration: small grids with known answers."""

import json
import time
from importlib import resources

import pytest

from etaxisim import cli
from etaxisim.errors import CalibrationError, ConfigError, PairingError, SpecError
from etaxisim.experiments import (
    AGGREGATE_COLUMNS,
    METRIC_COLUMNS,
    RUN_COLUMNS,
    calibrate_defaults,
    check_trends,
    load_rows,
    run_sweep,
)
from etaxisim.experiments import _knee
from etaxisim.scenario import ScenarioConfig, SweepSpec


def quick(**over):
    base = dict(horizon_s=1800.0)
    base.update(over)
    return ScenarioConfig(**base)


def strander():
    # 3 km hop vs a 1.25 km battery range: the single taxi always dies
    spec = {
        "nodes": [{"id": 0}, {"id": 1}, {"id": 2}],
        "segments": [
            {"id": 0, "from": 0, "to": 1, "length_m": 1000.0, "free_speed": 10.0},
            {"id": 1, "from": 1, "to": 0, "length_m": 1000.0, "free_speed": 10.0},
            {"id": 2, "from": 1, "to": 2, "length_m": 1000.0, "free_speed": 10.0},
            {"id": 3, "from": 2, "to": 1, "length_m": 1000.0, "free_speed": 10.0},
        ],
        "stops": [0, 1, 2],
        "stations": [{"id": 1, "node": 1, "chargers": 1, "charge_rate_kw": 50.0}],
    }
    return ScenarioConfig(map=spec, fleet_size=1, master_seed=1,
                          horizon_s=3600.0, initial_battery="full",
                          battery_capacity_kwh=0.25, idle_drain_kwh_per_hour=0.4,
                          scripted_arrivals=((0.0, 0, 2), (10.0, 1, 2)))


class TestRunTable:
    def test_fleet_sweep_at_one_replication_gives_sixteen_rows(self):
        spec = SweepSpec(base=quick(), axis="fleet_size",
                         values=tuple(range(5, 21)), seeds=(1,))
        result = run_sweep(spec)
        assert len(result.runs) == 16
        assert len(result.aggregate) == 16
        assert [r["value"] for r in result.runs] == list(range(5, 21))
        assert all(a["replications"] == 1 for a in result.aggregate)
        # a single replication has no spread
        assert all(a["passenger_avg_wait_ci95"] == 0.0 for a in result.aggregate)

    def test_csv_headers_are_the_documented_columns(self):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(5,), seeds=(1,))
        result = run_sweep(spec)
        assert result.runs_csv().splitlines()[0] == ",".join(RUN_COLUMNS)
        assert result.aggregate_csv().splitlines()[0] == ",".join(AGGREGATE_COLUMNS)

    def test_rerun_is_byte_identical(self):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(5, 11),
                         seeds=tuple(range(1, 11)))
        a = run_sweep(spec)
        b = run_sweep(spec)
        assert a.runs_csv() == b.runs_csv()
        assert a.aggregate_csv() == b.aggregate_csv()

    def test_aggregate_mean_matches_run_rows(self):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(8,),
                         seeds=(1, 2, 3, 4))
        result = run_sweep(spec)
        waits = [r["passenger_avg_wait"] for r in result.runs]
        agg = result.aggregate[0]
        assert agg["passenger_avg_wait_mean"] == pytest.approx(
            sum(waits) / len(waits))
        assert agg["passenger_avg_wait_ci95"] > 0.0
        assert agg["requests_mean"] == pytest.approx(
            sum(r["requests"] for r in result.runs) / 4)

    def test_same_seed_shares_arrivals_across_arms_and_fleet_sizes(self):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(5, 11),
                         seeds=(1, 2),
                         arms={"base": {}, "lt": {"path_policy": "least_time"}})
        result = run_sweep(spec)
        by_seed = {}
        for row in result.runs:
            by_seed.setdefault(row["seed"], set()).add(row["arrival_hash"])
        # demand is drawn from its own stream, so neither the arm nor the
        # fleet size can perturb it
        for seed, hashes in by_seed.items():
            assert len(hashes) == 1, f"seed {seed} saw {hashes}"
        assert by_seed[1] != by_seed[2]

    def test_stranding_flags_the_row_and_taints_the_cell(self):
        spec = SweepSpec(base=strander(), axis="fleet_size", values=(1,),
                         seeds=(1,))
        result = run_sweep(spec)
        assert result.runs[0]["stranded"] == 1
        assert result.runs[0]["flagged"] == 1
        assert result.aggregate[0]["tainted"] == 1

    def test_healthy_cells_are_untainted(self):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(11,), seeds=(1,))
        result = run_sweep(spec)
        assert result.runs[0]["flagged"] == 0
        assert result.aggregate[0]["tainted"] == 0

    def test_arm_may_not_override_the_swept_axis(self):
        with pytest.raises(ConfigError):
            SweepSpec(base=quick(), axis="fleet_size", values=(5,), seeds=(1,),
                      arms={"bad": {"fleet_size": 9}})


class TestLoadRows:
    def test_csv_roundtrip_restores_types(self, tmp_path):
        spec = SweepSpec(base=quick(), axis="fleet_size", values=(5,), seeds=(2,))
        result = run_sweep(spec)
        path = tmp_path / "runs.csv"
        path.write_text(result.runs_csv(), encoding="utf-8")
        for rows in (load_rows(str(path)), load_rows(result.runs_csv())):
            row = rows[0]
            assert row["value"] == 5 and isinstance(row["value"], int)
            assert row["seed"] == 2
            assert isinstance(row["passenger_avg_wait"], float)
            assert isinstance(row["arrival_hash"], str)
            assert row["requests"] == result.runs[0]["requests"]

    def test_list_input_passes_through(self):
        rows = [{"arm": "base", "value": 1, "passenger_avg_wait": 2.0}]
        assert load_rows(rows) == rows
        assert load_rows(rows) is not rows


def synth_rows(means_by_arm, seeds=(1,), jitter=None):
    """Rows for check_trends tests: one metric, paired arrival hashes."""
    rows = []
    for arm, means in means_by_arm.items():
        for value, mean in means.items():
            for seed in seeds:
                off = jitter(arm, value, seed) if jitter else 0.0
                rows.append({
                    "arm": arm, "axis": "fleet_size", "value": value,
                    "seed": seed, "config_hash": f"c-{arm}",
                    "arrival_hash": f"a-{value}-{seed}",
                    "passenger_avg_wait": mean + off,
                })
    return rows


class TestMonotone:
    def test_strictly_decreasing_passes(self):
        rows = synth_rows({"base": {v: 100.0 - v for v in range(5, 21)}})
        rep = check_trends(rows, [{"kind": "monotone",
                                   "metric": "passenger_avg_wait",
                                   "direction": "decreasing", "rho": -0.9}])
        assert rep.passed
        assert rep.verdicts[0].observed["rho"] == -1.0
        assert rep.verdicts[0].line().startswith("PASS monotone passenger_avg_wait")

    def test_increasing_curve_fails_a_decreasing_expectation(self):
        rows = synth_rows({"base": {v: float(v) for v in range(5, 21)}})
        rep = check_trends(rows, [{"kind": "monotone",
                                   "metric": "passenger_avg_wait",
                                   "direction": "decreasing"}])
        assert not rep.passed
        assert rep.verdicts[0].verdict == "fail"

    def test_soft_expectation_warns_instead_of_failing(self):
        rows = synth_rows({"base": {v: float(v) for v in range(5, 21)}})
        rep = check_trends(rows, [{"kind": "monotone",
                                   "metric": "passenger_avg_wait",
                                   "direction": "decreasing", "hard": False}])
        assert rep.passed
        assert rep.verdicts[0].verdict == "warn"

    def test_increasing_direction_checks_the_other_tail(self):
        rows = synth_rows({"base": {v: float(v) for v in range(5, 21)}})
        rep = check_trends(rows, [{"kind": "monotone",
                                   "metric": "passenger_avg_wait",
                                   "direction": "increasing", "rho": 0.9}])
        assert rep.passed

    def test_text_axis_is_rejected(self):
        rows = synth_rows({"base": {"small": 3.0, "large": 1.0}})
        with pytest.raises(SpecError):
            check_trends(rows, [{"kind": "monotone",
                                 "metric": "passenger_avg_wait"}])


class TestOrdering:
    def grid(self, b_lower_at):
        values = range(5, 21)
        base = {v: 100.0 for v in values}
        other = {v: (90.0 if v in b_lower_at else 110.0) for v in values}
        return synth_rows({"base": base, "alt": other})

    def test_fourteen_of_sixteen_meets_the_default_fraction(self):
        rows = self.grid(b_lower_at=set(range(5, 19)))      # 14 of 16
        rep = check_trends(rows, [{"kind": "ordering",
                                   "metric": "passenger_avg_wait",
                                   "arm_a": "base", "arm_b": "alt",
                                   "better": "lower"}])
        assert rep.passed
        assert rep.verdicts[0].observed == {"agree": 14, "of": 16, "need": 14}

    def test_thirteen_of_sixteen_fails(self):
        rows = self.grid(b_lower_at=set(range(5, 18)))      # 13 of 16
        rep = check_trends(rows, [{"kind": "ordering",
                                   "metric": "passenger_avg_wait",
                                   "arm_a": "base", "arm_b": "alt"}])
        assert not rep.passed

    def test_min_agree_overrides_the_fraction(self):
        rows = self.grid(b_lower_at=set(range(5, 18)))
        rep = check_trends(rows, [{"kind": "ordering",
                                   "metric": "passenger_avg_wait",
                                   "arm_a": "base", "arm_b": "alt",
                                   "min_agree": 12}])
        assert rep.passed

    def test_better_higher_counts_the_other_sign(self):
        rows = self.grid(b_lower_at=set())                  # alt above everywhere
        rep = check_trends(rows, [{"kind": "ordering",
                                   "metric": "passenger_avg_wait",
                                   "arm_a": "base", "arm_b": "alt",
                                   "better": "higher"}])
        assert rep.passed
        assert rep.verdicts[0].observed["agree"] == 16

    def test_unpaired_arrivals_are_refused(self):
        rows = self.grid(b_lower_at=set(range(5, 21)))
        for row in rows:
            if row["arm"] == "alt" and row["value"] == 7:
                row["arrival_hash"] = "divergent"
        with pytest.raises(PairingError):
            check_trends(rows, [{"kind": "ordering",
                                 "metric": "passenger_avg_wait",
                                 "arm_a": "base", "arm_b": "alt"}])

    def test_mismatched_seed_lists_are_refused(self):
        rows = self.grid(b_lower_at=set(range(5, 21)))
        rows = [r for r in rows if not (r["arm"] == "alt" and r["value"] == 20)]
        with pytest.raises(PairingError):
            check_trends(rows, [{"kind": "ordering",
                                 "metric": "passenger_avg_wait",
                                 "arm_a": "base", "arm_b": "alt"}])


class TestConvergenceExpectation:
    def test_knee_inside_window_passes(self):
        means = {5: 100.0, 6: 60.0, 7: 40.0, 8: 30.0, 9: 29.0, 10: 28.5}
        rows = synth_rows({"base": means})
        rep = check_trends(rows, [{"kind": "convergence",
                                   "metric": "passenger_avg_wait",
                                   "eps": 0.05, "window": [7, 9]}])
        assert rep.passed
        assert rep.verdicts[0].observed["point"] == 8

    def test_knee_outside_window_fails(self):
        means = {5: 100.0, 6: 60.0, 7: 40.0, 8: 30.0, 9: 29.0, 10: 28.5}
        rows = synth_rows({"base": means})
        rep = check_trends(rows, [{"kind": "convergence",
                                   "metric": "passenger_avg_wait",
                                   "eps": 0.05, "window": [9, 10]}])
        assert not rep.passed


class TestExpectationValidation:
    def rows(self):
        return synth_rows({"base": {5: 2.0, 6: 1.0}})

    def test_unknown_kind(self):
        with pytest.raises(SpecError):
            check_trends(self.rows(), [{"kind": "sorcery", "metric": "x"}])

    def test_unknown_metric(self):
        with pytest.raises(SpecError):
            check_trends(self.rows(), [{"kind": "monotone", "metric": "bogus"}])

    def test_unknown_arm(self):
        with pytest.raises(SpecError):
            check_trends(self.rows(), [{"kind": "monotone",
                                        "metric": "passenger_avg_wait",
                                        "arm": "ghost"}])

    def test_empty_table(self):
        with pytest.raises(SpecError):
            check_trends([], [{"kind": "monotone", "metric": "x"}])

    def test_expectations_may_come_wrapped_or_from_a_file(self, tmp_path):
        path = tmp_path / "expect.json"
        path.write_text(json.dumps({"expectations": [
            {"kind": "monotone", "metric": "passenger_avg_wait",
             "direction": "decreasing"}]}), encoding="utf-8")
        rep = check_trends(self.rows(), path)
        assert rep.passed


class TestCalibration:
    def test_unreachable_window_reports_the_nearest_miss(self):
        with pytest.raises(CalibrationError) as exc:
            calibrate_defaults(base=quick(), demand_means=(115.0,),
                               charger_counts=(2,),
                               fleet_values=(5, 8, 11), station_values=(1, 4, 8),
                               seeds=(1,), fleet_window=(1, 2),
                               station_window=(1, 8))
        assert exc.value.nearest is not None
        assert exc.value.nearest["fleet_knee"] >= 5

    def test_passing_cell_is_written_and_loads_back(self, tmp_path):
        out = tmp_path / "chosen.json"
        report = calibrate_defaults(base=quick(), demand_means=(115.0,),
                                    charger_counts=(2,),
                                    fleet_values=(5, 8, 11),
                                    station_values=(1, 4, 8),
                                    seeds=(1,), fleet_window=(5, 11),
                                    station_window=(1, 8), out_path=out)
        assert report["chosen"]["base_mean_interarrival"] == 115.0
        raw = json.loads(out.read_text(encoding="utf-8"))
        assert "_calibration" in raw
        cfg = ScenarioConfig.load(out)
        assert cfg == quick(base_mean_interarrival=115.0, chargers_per_station=2)

    def test_shipped_config_is_the_dataclass_default(self):
        path = resources.files("etaxisim") / "data" / "default_config.json"
        assert ScenarioConfig.load(path) == ScenarioConfig()


class TestScalingDirections:
    def test_doubled_demand_moves_the_wait_knee_to_a_larger_fleet(self):
        base = ScenarioConfig()
        seeds = (1, 2, 3)
        values = tuple(range(5, 21))
        k_base = _knee(base, "fleet_size", values, seeds,
                       "passenger_avg_wait", eps=0.05)
        k_busy = _knee(base.replaced(
            base_mean_interarrival=base.base_mean_interarrival / 2.0),
            "fleet_size", values, seeds, "passenger_avg_wait", eps=0.05)
        assert k_busy > k_base, (k_base, k_busy)

    def test_default_cell_runs_inside_the_interactive_budget(self):
        start = time.perf_counter()
        spec = SweepSpec(base=ScenarioConfig(), axis="fleet_size",
                         values=(11,), seeds=(1,))
        run_sweep(spec)
        assert time.perf_counter() - start < 60.0


class TestCli:
    def test_simulate_writes_one_row(self, tmp_path):
        out = tmp_path / "row.csv"
        code = cli.main(["simulate", "--seed", "2", "--until", "900",
                         "--out", str(out)])
        assert code == 0
        header, row = out.read_text(encoding="utf-8").splitlines()
        assert header.split(",")[:3] == ["seed", "config_hash", "arrival_hash"]
        assert row.split(",")[0] == "2"

    def test_sweep_check_report_roundtrip(self, tmp_path):
        spec = {"base": {"horizon_s": 1800.0}, "axis": "fleet_size",
                "values": [5, 8], "seeds": [1, 2]}
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec), encoding="utf-8")
        out_dir = tmp_path / "out"
        assert cli.main(["sweep", "--spec", str(spec_path),
                         "--out", str(out_dir)]) == 0
        runs = out_dir / "runs.csv"
        assert runs.is_file() and (out_dir / "aggregate.csv").is_file()

        expect = tmp_path / "expect.json"
        expect.write_text(json.dumps({"expectations": [
            {"kind": "monotone", "metric": "passenger_avg_wait",
             "direction": "decreasing", "rho": -0.5}]}), encoding="utf-8")
        assert cli.main(["check", "--csv", str(runs),
                         "--expect", str(expect)]) == 0

        assert cli.main(["report", "--csv", str(runs)]) == 0
        assert (out_dir / "runs_passenger_avg_wait.png").is_file()
        assert (out_dir / "runs_taxi_avg_idle.png").is_file()

    def test_check_exits_two_on_a_failed_hard_expectation(self, tmp_path):
        spec = {"base": {"horizon_s": 1800.0}, "axis": "fleet_size",
                "values": [5, 8], "seeds": [1]}
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec), encoding="utf-8")
        out_dir = tmp_path / "out"
        cli.main(["sweep", "--spec", str(spec_path), "--out", str(out_dir)])
        expect = tmp_path / "expect.json"
        expect.write_text(json.dumps({"expectations": [
            {"kind": "monotone", "metric": "passenger_avg_wait",
             "direction": "increasing"}]}), encoding="utf-8")
        assert cli.main(["check", "--csv", str(out_dir / "runs.csv"),
                         "--expect", str(expect)]) == 2

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        code = cli.main(["simulate", "--config", str(tmp_path / "nope.json")])
        assert code == 1
        assert "error:" in capsys.readouterr().err
