"""Run metrics, recomputed from the raw event log.

Nothing here reads simulator internals: the log is the contract. Records are
plain dicts with at least ``t`` (virtual seconds) and ``ev``. The ingest pass
replays request lifecycles and taxi state intervals, censors open intervals at
the horizon, and reduces to a MetricsReport.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

from scipy import stats as _scipy_stats

from .errors import LogError, PairingError
from .fleet import TaxiState

IDLE_STATES = {TaxiState.IDLE_AT_STOP.value, TaxiState.PARKED_AT_RENTAL_SITE.value}


@dataclass(frozen=True)
class MetricsReport:
    passenger_avg_wait: float
    taxi_avg_idle: float
    taxi_avg_idle_with_charging: float
    taxi_avg_queue_wait: float
    requests: int
    deliveries: int
    cancelled: int
    charge_visits: int
    pooled_rides: int
    rental_trips: int
    stranded: int
    horizon_s: float
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    time_series: tuple = ()

    def scalar_row(self) -> dict:
        row = {
            "passenger_avg_wait": self.passenger_avg_wait,
            "taxi_avg_idle": self.taxi_avg_idle,
            "taxi_avg_idle_with_charging": self.taxi_avg_idle_with_charging,
            "taxi_avg_queue_wait": self.taxi_avg_queue_wait,
            "requests": self.requests,
            "deliveries": self.deliveries,
            "cancelled": self.cancelled,
            "charge_visits": self.charge_visits,
            "pooled_rides": self.pooled_rides,
            "rental_trips": self.rental_trips,
            "stranded": self.stranded,
        }
        return row

    def to_dict(self) -> dict:
        d = dict(self.scalar_row())
        d["horizon_s"] = self.horizon_s
        d["seed"] = self.seed
        d["config_hash"] = self.config_hash
        d["time_series"] = [list(s) for s in self.time_series]
        return d


class _RequestTrace:
    __slots__ = ("call_t", "pickup_t", "dropoff_t", "cancelled_t", "rental", "pooled")

    def __init__(self, call_t: float):
        self.call_t = call_t
        self.pickup_t = None
        self.dropoff_t = None
        self.cancelled_t = None
        self.rental = False
        self.pooled = False


class _TaxiTrace:
    __slots__ = ("spawn_t", "state", "since", "durations", "queue_episodes",
                 "visits", "retired_t", "stranded")

    def __init__(self, spawn_t: float, state: str):
        self.spawn_t = spawn_t
        self.state = state
        self.since = spawn_t
        self.durations = {}
        self.queue_episodes = []
        self.visits = 0
        self.retired_t = None
        self.stranded = False

    def transition(self, t: float, from_state: str, to_state: str, taxi_id):
        if from_state != self.state:
            raise LogError(
                f"taxi {taxi_id}: transition at t={t} claims from={from_state} "
                f"but tracked state is {self.state}")
        dt = t - self.since
        if dt < -1e-9:
            raise LogError(f"taxi {taxi_id}: state log not time-ordered at t={t}")
        self.durations[self.state] = self.durations.get(self.state, 0.0) + dt
        if self.state == TaxiState.QUEUED_AT_STATION.value:
            self.queue_episodes.append(dt)
        if (from_state == TaxiState.EN_ROUTE_TO_STATION.value
                and to_state in (TaxiState.QUEUED_AT_STATION.value,
                                 TaxiState.CHARGING.value)):
            self.visits += 1
        self.state = to_state
        self.since = t
        if to_state == TaxiState.RETIRING.value:
            self.retired_t = t

    def flush(self, horizon: float):
        end = self.retired_t if self.retired_t is not None else horizon
        dt = end - self.since
        if dt > 0:
            self.durations[self.state] = self.durations.get(self.state, 0.0) + dt
            if self.state == TaxiState.QUEUED_AT_STATION.value:
                self.queue_episodes.append(dt)
        self.since = end

    def idle_seconds(self) -> float:
        return sum(self.durations.get(s, 0.0) for s in IDLE_STATES)

    def active_seconds(self, horizon: float) -> float:
        end = self.retired_t if self.retired_t is not None else horizon
        return end - self.spawn_t


def ingest(log, horizon_s: float, seed=None, config_hash=None,
           sample_interval: float = 60.0, strict: bool = True) -> MetricsReport:
    """Reduce an event log to a MetricsReport.

    Open intervals (requests not yet picked up, taxis mid-state) are censored
    at the horizon. Raises LogError on unbalanced or out-of-order records when
    strict.
    """
    requests: dict[int, _RequestTrace] = {}
    taxis: dict[int, _TaxiTrace] = {}
    samples = []
    delivered_cum = 0

    for rec in log:
        t = rec["t"]
        if t > horizon_s + 1e-9:
            break
        ev = rec["ev"]
        if ev == "call":
            rid = rec["rid"]
            if rid in requests:
                raise LogError(f"request {rid} called twice")
            requests[rid] = _RequestTrace(t)
        elif ev == "pickup":
            tr = _req(requests, rec["rid"], ev)
            tr.pickup_t = t
        elif ev == "dropoff":
            tr = _req(requests, rec["rid"], ev)
            if strict and tr.pickup_t is None:
                raise LogError(f"request {rec['rid']} dropped off before pickup")
            tr.dropoff_t = t
            delivered_cum += 1
        elif ev == "cancel":
            tr = _req(requests, rec["rid"], ev)
            tr.cancelled_t = t
        elif ev == "pool":
            _req(requests, rec["rid"], ev).pooled = True
        elif ev == "rental_start":
            tr = _req(requests, rec["rid"], ev)
            tr.rental = True
            tr.pickup_t = t
        elif ev == "rental_end":
            tr = _req(requests, rec["rid"], ev)
            tr.dropoff_t = t
            delivered_cum += 1
        elif ev == "taxi_spawn":
            tid = rec["taxi"]
            if tid in taxis:
                raise LogError(f"taxi {tid} spawned twice")
            taxis[tid] = _TaxiTrace(t, rec["state"])
        elif ev == "taxi_state":
            tid = rec["taxi"]
            if tid not in taxis:
                raise LogError(f"state record for unknown taxi {tid}")
            taxis[tid].transition(t, rec["from"], rec["to"], tid)
        elif ev == "stranded":
            if rec["taxi"] in taxis:
                taxis[rec["taxi"]].stranded = True
        elif ev == "sample":
            waiting = sum(1 for r in requests.values()
                          if r.pickup_t is None and r.cancelled_t is None)
            samples.append((t, waiting, delivered_cum))
        # command/jam/prompt records carry no metric weight

    for trace in taxis.values():
        trace.flush(horizon_s)

    if strict:
        _check_partition(taxis, horizon_s)

    waits = []
    counts = dict(requests=0, deliveries=0, cancelled=0, pooled=0, rentals=0)
    for tr in requests.values():
        counts["requests"] += 1
        if tr.rental:
            counts["rentals"] += 1
            if tr.dropoff_t is not None:
                counts["deliveries"] += 1
            continue
        if tr.cancelled_t is not None:
            counts["cancelled"] += 1
            continue
        if tr.pooled:
            counts["pooled"] += 1
        if tr.dropoff_t is not None:
            counts["deliveries"] += 1
        if tr.pickup_t is not None:
            waits.append(tr.pickup_t - tr.call_t)
        else:
            waits.append(horizon_s - tr.call_t)

    idle_list = [tr.idle_seconds() for tr in taxis.values()]
    idle_chg_list = [
        tr.idle_seconds()
        + tr.durations.get(TaxiState.CHARGING.value, 0.0)
        + tr.durations.get(TaxiState.QUEUED_AT_STATION.value, 0.0)
        for tr in taxis.values()
    ]
    episodes = []
    visit_total = 0
    for tr in taxis.values():
        visit_total += tr.visits
        queued = list(tr.queue_episodes)
        # direct admissions are visits with zero queue time
        episodes.extend(queued + [0.0] * (tr.visits - len(queued)))

    report = MetricsReport(
        passenger_avg_wait=_mean(waits),
        taxi_avg_idle=_mean(idle_list),
        taxi_avg_idle_with_charging=_mean(idle_chg_list),
        taxi_avg_queue_wait=_mean(episodes),
        requests=counts["requests"],
        deliveries=counts["deliveries"],
        cancelled=counts["cancelled"],
        charge_visits=visit_total,
        pooled_rides=counts["pooled"],
        rental_trips=counts["rentals"],
        stranded=sum(1 for tr in taxis.values() if tr.stranded),
        horizon_s=horizon_s,
        seed=seed,
        config_hash=config_hash,
        time_series=tuple(samples),
    )
    return report


def _req(requests, rid, ev) -> _RequestTrace:
    if rid not in requests:
        raise LogError(f"{ev} record for unknown request {rid}")
    return requests[rid]


def _mean(values) -> float:
    if not values:
        return 0.0
    return sum(values) / len(values)


def _check_partition(taxis, horizon_s):
    for tid, tr in taxis.items():
        total = sum(tr.durations.values())
        active = tr.active_seconds(horizon_s)
        if abs(total - active) > 1e-6 * max(1.0, active):
            raise LogError(
                f"taxi {tid}: state durations sum to {total:.6f}, "
                f"active span is {active:.6f}")


def convergence_point(sizes, values, eps: float = 0.05):
    """Smallest size after which every consecutive relative decrease is < eps.

    Pairs with equal values count as settled; if no suffix settles, the
    largest size is returned.
    """
    sizes = list(sizes)
    values = list(values)
    if len(sizes) != len(values) or not sizes:
        raise PairingError("sizes and values must be equal-length and non-empty")
    if any(sizes[i] >= sizes[i + 1] for i in range(len(sizes) - 1)):
        raise PairingError("sizes must be strictly increasing")

    def settled(j):
        a, b = values[j], values[j + 1]
        if a == b:
            return True
        return (a - b) < eps * a

    n = len(sizes)
    ok_suffix = True
    answer = sizes[-1]
    for j in range(n - 2, -1, -1):
        ok_suffix = ok_suffix and settled(j)
        if ok_suffix:
            answer = sizes[j]
    return answer


@dataclass(frozen=True)
class TrendStats:
    sizes: tuple
    mean_a: tuple
    mean_b: tuple
    diffs: tuple          # mean_a - mean_b per size
    a_lower: int
    b_lower: int
    ties: int
    rho_a: float          # spearman of arm A means against size
    rho_b: float

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "mean_a": list(self.mean_a),
            "mean_b": list(self.mean_b),
            "diffs": list(self.diffs),
            "a_lower": self.a_lower,
            "b_lower": self.b_lower,
            "ties": self.ties,
            "rho_a": self.rho_a,
            "rho_b": self.rho_b,
        }


def trend_stats(cells_a, cells_b) -> TrendStats:
    """Pairwise comparison of two sweep arms.

    Each arm is a list of (size, seeds, values) cells. Arms must share the
    size grid and, cell by cell, the seed list; otherwise PairingError.
    """
    if len(cells_a) != len(cells_b):
        raise PairingError("arms have different cell counts")
    sizes, means_a, means_b = [], [], []
    for (sa, seeds_a, vals_a), (sb, seeds_b, vals_b) in zip(cells_a, cells_b):
        if sa != sb:
            raise PairingError(f"size grids differ: {sa} vs {sb}")
        if tuple(seeds_a) != tuple(seeds_b):
            raise PairingError(f"seed lists differ at size {sa}")
        if len(vals_a) != len(seeds_a) or len(vals_b) != len(seeds_b):
            raise PairingError(f"value count mismatch at size {sa}")
        sizes.append(sa)
        means_a.append(_mean(list(vals_a)))
        means_b.append(_mean(list(vals_b)))
    diffs = [a - b for a, b in zip(means_a, means_b)]
    a_lower = sum(1 for d in diffs if d < 0)
    b_lower = sum(1 for d in diffs if d > 0)
    ties = sum(1 for d in diffs if d == 0)
    rho_a = _spearman(sizes, means_a)
    rho_b = _spearman(sizes, means_b)
    return TrendStats(tuple(sizes), tuple(means_a), tuple(means_b), tuple(diffs),
                      a_lower, b_lower, ties, rho_a, rho_b)


def _spearman(x, y) -> float:
    if len(x) < 2:
        return 0.0
    with warnings.catch_warnings():
        # constant arms are legal input; the NaN they produce maps to 0
        warnings.simplefilter("ignore")
        rho = _scipy_stats.spearmanr(x, y).statistic
    return 0.0 if rho != rho else float(rho)
