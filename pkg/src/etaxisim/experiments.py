"""Batch sweeps and trend checks.

run_sweep executes every (arm, value, seed) cell of a SweepSpec and returns
per-run rows plus per-cell aggregates, both with a fixed column order so the
CSV output is byte-stable under fixed seeds. check_trends evaluates
declarative expectations (monotonicity, paired ordering, convergence window)
against such a table. calibrate_defaults grid-searches demand mean and
charger count until both sweep knees land in their target windows.

Expectation objects (JSON):
  {"kind": "monotone",    "metric": M, "arm": A, "direction": "decreasing",
   "rho": -0.9, "hard": true}
  {"kind": "ordering",    "metric": M, "arm_a": A, "arm_b": B,
   "better": "lower", "min_agree": 14, "hard": true}
  {"kind": "convergence", "metric": M, "arm": A, "eps": 0.05,
   "window": [9, 13], "hard": true}
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import CalibrationError, PairingError, SpecError
from .metrics import convergence_point, _spearman
from .scenario import ScenarioConfig, SweepSpec
from .simulation import Simulation

METRIC_COLUMNS = [
    "passenger_avg_wait", "taxi_avg_idle", "taxi_avg_idle_with_charging",
    "taxi_avg_queue_wait", "requests", "deliveries", "cancelled",
    "charge_visits", "pooled_rides", "rental_trips", "stranded",
]

RUN_COLUMNS = ["arm", "axis", "value", "seed", "config_hash",
               "arrival_hash"] + METRIC_COLUMNS + ["flagged"]

AGGREGATE_COLUMNS = (
    ["arm", "axis", "value", "config_hash", "replications"]
    + [f"{m}_{suffix}" for m in METRIC_COLUMNS for suffix in ("mean", "ci95")]
    + ["tainted"]
)


def _arrival_hash(log) -> str:
    """Digest of the demand realization, for common-random-number pairing."""
    h = hashlib.sha256()
    for rec in log:
        if rec["ev"] == "call":
            h.update(f"{rec['t']!r}:{rec['origin']}:{rec['dest']};".encode())
    return h.hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _table_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


@dataclass
class SweepResult:
    spec: SweepSpec
    runs: list
    aggregate: list

    def runs_csv(self) -> str:
        return _table_csv(RUN_COLUMNS, self.runs)

    def aggregate_csv(self) -> str:
        return _table_csv(AGGREGATE_COLUMNS, self.aggregate)

    def write(self, out_dir) -> tuple:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runs_path = out / "runs.csv"
        agg_path = out / "aggregate.csv"
        runs_path.write_text(self.runs_csv(), encoding="utf-8")
        agg_path.write_text(self.aggregate_csv(), encoding="utf-8")
        return runs_path, agg_path


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Run every cell of the sweep; rows come out in (arm, value, seed) order."""
    runs = []
    aggregate = []
    for arm_name, value, cfg in spec.cells():
        chash = cfg.config_hash()
        cell_rows = []
        for seed in spec.seeds:
            sim = Simulation(cfg.replaced(master_seed=seed))
            sim.run_until(cfg.horizon_s)
            rep = sim.report()
            row = {"arm": arm_name, "axis": spec.axis, "value": value,
                   "seed": seed, "config_hash": chash,
                   "arrival_hash": _arrival_hash(sim.log)}
            row.update(rep.scalar_row())
            row["flagged"] = int(rep.stranded > 0)
            cell_rows.append(row)
            runs.append(row)
        agg = {"arm": arm_name, "axis": spec.axis, "value": value,
               "config_hash": chash, "replications": len(cell_rows)}
        for m in METRIC_COLUMNS:
            mean, ci = _mean_ci([r[m] for r in cell_rows])
            agg[f"{m}_mean"] = mean
            agg[f"{m}_ci95"] = ci
        agg["tainted"] = int(any(r["flagged"] for r in cell_rows))
        aggregate.append(agg)
    return SweepResult(spec=spec, runs=runs, aggregate=aggregate)


def _mean_ci(values) -> tuple:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, 1.96 * math.sqrt(var / n)


# ---------------------------------------------------------------------------
# Trend checks
# ---------------------------------------------------------------------------

_NUMERIC = set(METRIC_COLUMNS) | {"seed", "flagged"}


def _parse(col: str, text: str):
    if col in _NUMERIC:
        f = float(text)
        return int(f) if f.is_integer() and col not in (
            "passenger_avg_wait", "taxi_avg_idle",
            "taxi_avg_idle_with_charging", "taxi_avg_queue_wait") else f
    if col == "value":
        try:
            return int(text)
        except ValueError:
            try:
                return float(text)
            except ValueError:
                return text
    return text


def load_rows(source) -> list:
    """Rows from a run_sweep CSV: a path, CSV text, or an iterable of dicts."""
    if isinstance(source, (list, tuple)):
        return [dict(r) for r in source]
    text = str(source)
    if "\n" not in text:
        text = Path(source).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    return [{c: _parse(c, v) for c, v in row.items()} for row in reader]


@dataclass(frozen=True)
class Verdict:
    expectation: dict
    observed: dict
    verdict: str                    # "pass" | "fail" | "warn"

    def line(self) -> str:
        e = self.expectation
        bits = [self.verdict.upper(), e["kind"], e.get("metric", "")]
        bits += [f"{k}={v}" for k, v in sorted(self.observed.items())]
        return " ".join(str(b) for b in bits if b != "")


@dataclass
class TrendReport:
    verdicts: list

    @property
    def passed(self) -> bool:
        return all(v.verdict != "fail" for v in self.verdicts)

    def to_text(self) -> str:
        return "\n".join(v.line() for v in self.verdicts) + "\n"


def _arm_means(rows, arm: str, metric: str):
    """Per-value means for one arm, in first-seen value order."""
    arms = {r["arm"] for r in rows}
    if arm not in arms:
        raise SpecError(f"arm {arm!r} not in table (has {sorted(arms)})")
    if rows and metric not in rows[0]:
        raise SpecError(f"metric {metric!r} not in table")
    order, per_value = [], {}
    for r in rows:
        if r["arm"] != arm:
            continue
        v = r["value"]
        if v not in per_value:
            order.append(v)
            per_value[v] = []
        per_value[v].append(r)
    means = [sum(x[metric] for x in per_value[v]) / len(per_value[v])
             for v in order]
    return order, means, per_value


def _require_numeric_axis(values):
    if any(not isinstance(v, (int, float)) for v in values):
        raise SpecError("expectation needs a numeric sweep axis")


def _check_pairing(pa: dict, pb: dict):
    for v, rows_a in pa.items():
        rows_b = pb.get(v)
        if rows_b is None:
            raise PairingError(f"arms disagree on axis values (missing {v})")
        sa = [(r["seed"], r["arrival_hash"]) for r in rows_a]
        sb = [(r["seed"], r["arrival_hash"]) for r in rows_b]
        if [s for s, _ in sa] != [s for s, _ in sb]:
            raise PairingError(f"seed lists differ at value {v}")
        if sa != sb:
            raise PairingError(
                f"arrival streams differ at value {v}: not common random numbers")


def check_trends(table, expectations) -> TrendReport:
    """Evaluate expectations against a run table; pure function of the CSV."""
    rows = load_rows(table)
    if not rows:
        raise SpecError("empty result table")
    if isinstance(expectations, (str, Path)):
        expectations = json.loads(Path(expectations).read_text(encoding="utf-8"))
    if isinstance(expectations, dict):
        expectations = expectations.get("expectations", [])
    default_arm = rows[0]["arm"]

    verdicts = []
    for exp in expectations:
        kind = exp.get("kind")
        hard = bool(exp.get("hard", True))
        metric = exp.get("metric")
        if kind == "monotone":
            values, means, _ = _arm_means(rows, exp.get("arm", default_arm),
                                          metric)
            _require_numeric_axis(values)
            rho = _spearman(values, means)
            direction = exp.get("direction", "decreasing")
            bound = exp.get("rho", -0.9 if direction == "decreasing" else 0.9)
            ok = rho <= bound if direction == "decreasing" else rho >= bound
            observed = {"rho": round(rho, 4), "bound": bound}
        elif kind == "ordering":
            va, ma, pa = _arm_means(rows, exp["arm_a"], metric)
            vb, mb, pb = _arm_means(rows, exp["arm_b"], metric)
            if va != vb:
                raise PairingError("arms cover different axis values")
            _check_pairing(pa, pb)
            better = exp.get("better", "lower")
            agree = sum(1 for a, b in zip(ma, mb)
                        if (b < a if better == "lower" else b > a))
            need = exp.get("min_agree")
            if need is None:
                need = math.ceil(exp.get("min_fraction", 0.875) * len(va))
            ok = agree >= int(need)
            observed = {"agree": agree, "of": len(va), "need": int(need)}
        elif kind == "convergence":
            values, means, _ = _arm_means(rows, exp.get("arm", default_arm),
                                          metric)
            _require_numeric_axis(values)
            pairs = sorted(zip(values, means))
            k = convergence_point([v for v, _ in pairs], [m for _, m in pairs],
                                  eps=exp.get("eps", 0.05))
            lo, hi = exp["window"]
            ok = lo <= k <= hi
            observed = {"point": k, "window": [lo, hi]}
        else:
            raise SpecError(f"unknown expectation kind {kind!r}")
        verdict = "pass" if ok else ("fail" if hard else "warn")
        verdicts.append(Verdict(expectation=dict(exp), observed=observed,
                                verdict=verdict))
    return TrendReport(verdicts=verdicts)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def calibrate_defaults(base: Optional[ScenarioConfig] = None,
                       demand_means=(115.0, 105.0, 125.0, 95.0),
                       charger_counts=(2, 1, 3),
                       fleet_values=tuple(range(5, 21)),
                       station_values=tuple(range(1, 9)),
                       seeds=tuple(range(1, 11)),
                       eps: float = 0.05,
                       fleet_window=(9, 13),
                       station_window=(4, 6),
                       out_path=None) -> dict:
    """Search (demand mean, charger count) until both sweep knees land in
    their windows; first passing cell in grid order wins.

    Returns the calibration report; when out_path is given the chosen config
    is written there as JSON with a _calibration provenance block. Raises
    CalibrationError (with the nearest miss) when no cell passes.
    """
    base = base if base is not None else ScenarioConfig()
    evaluated = []
    nearest = None
    for mean in demand_means:
        for chargers in charger_counts:
            cand = base.replaced(base_mean_interarrival=float(mean),
                                 chargers_per_station=int(chargers))
            kf = _knee(cand, "fleet_size", fleet_values, seeds,
                       "passenger_avg_wait", eps)
            ks = _knee(cand.replaced(fleet_size=11), "station_count",
                       station_values, seeds, "taxi_avg_queue_wait", eps)
            cell = {"base_mean_interarrival": float(mean),
                    "chargers_per_station": int(chargers),
                    "fleet_knee": kf, "station_knee": ks}
            evaluated.append(cell)
            miss = (_window_miss(kf, fleet_window)
                    + _window_miss(ks, station_window))
            if nearest is None or miss < nearest[0]:
                nearest = (miss, cell)
            if miss == 0:
                report = {
                    "chosen": cell,
                    "targets": {"fleet_window": list(fleet_window),
                                "station_window": list(station_window),
                                "eps": eps},
                    "evaluated": evaluated,
                }
                if out_path is not None:
                    _write_calibrated(cand, report, out_path)
                return report
    raise CalibrationError(
        f"no grid cell put both knees in {list(fleet_window)} / "
        f"{list(station_window)}; nearest miss {nearest[1]}",
        nearest=nearest[1])


def _knee(cfg: ScenarioConfig, axis: str, values, seeds, metric: str,
          eps: float) -> int:
    spec = SweepSpec(base=cfg, axis=axis, values=tuple(values),
                     seeds=tuple(seeds))
    result = run_sweep(spec)
    means = [row[f"{metric}_mean"] for row in result.aggregate]
    return convergence_point(list(values), means, eps=eps)


def _window_miss(k, window) -> int:
    lo, hi = window
    if k < lo:
        return lo - k
    if k > hi:
        return k - hi
    return 0


def _write_calibrated(cfg: ScenarioConfig, report: dict, out_path) -> None:
    raw = cfg.to_dict()
    raw["_calibration"] = {
        "chosen": report["chosen"],
        "targets": report["targets"],
        "note": ("defaults chosen so the fleet-sweep wait knee and the "
                 "station-sweep queue knee land in the target windows; "
                 "keys starting with _ are ignored on load"),
    }
    Path(out_path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
