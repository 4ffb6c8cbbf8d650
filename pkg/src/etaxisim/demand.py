"""Passenger generation.

Inter-arrival gaps are normally distributed, truncated below, with a
piecewise-constant rate multiplier (rush hour scales the arrival rate, so
both the mean gap and its spread shrink by the multiplier). Origins and
destinations are town-weighted: pick a town proportional to demand_weight,
then a uniform stop inside it; redraw the destination while it collides with
the origin.

The arrival sequence consumes only the demand-timing and demand-od streams,
so it is identical across fleet sizes, station counts, and policies for a
given seed. Paired experiment designs rely on that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .city import RoadNetwork
from .errors import ConfigError, ProtocolError


class RequestStatus(Enum):
    WAITING = "WAITING"
    ASSIGNED = "ASSIGNED"
    ABOARD = "ABOARD"
    DELIVERED = "DELIVERED"
    RENTAL_TRIP = "RENTAL_TRIP"
    CANCELLED = "CANCELLED"


_ALLOWED = {
    RequestStatus.WAITING: {RequestStatus.ASSIGNED, RequestStatus.RENTAL_TRIP,
                            RequestStatus.CANCELLED},
    RequestStatus.ASSIGNED: {RequestStatus.ABOARD},
    RequestStatus.ABOARD: {RequestStatus.DELIVERED},
    RequestStatus.RENTAL_TRIP: {RequestStatus.DELIVERED},
    RequestStatus.DELIVERED: set(),
    RequestStatus.CANCELLED: set(),
}


@dataclass
class RideRequest:
    id: int
    call_time: float
    origin_stop: int
    dest_stop: int
    party_size: int = 1
    status: RequestStatus = RequestStatus.WAITING
    assigned_taxi: Optional[int] = None
    pickup_time: Optional[float] = None
    dropoff_time: Optional[float] = None
    # direct LEAST_TIME ride time frozen at call time; pooling detours are
    # bounded against this, not against a moving target
    direct_time: float = 0.0

    def advance_status(self, new: RequestStatus) -> None:
        if new not in _ALLOWED[self.status]:
            raise ProtocolError(
                f"request {self.id}: illegal transition {self.status.value} -> {new.value}"
            )
        self.status = new


@dataclass(frozen=True)
class DemandProfile:
    base_mean_interarrival: float
    interarrival_stddev: float
    rate_schedule: tuple = ((0.0, 1.0),)   # (start_time, multiplier), sorted
    min_interarrival: float = 1.0

    def __post_init__(self):
        if self.base_mean_interarrival <= 0 or self.min_interarrival <= 0:
            raise ConfigError("interarrival mean and floor must be positive")
        if self.interarrival_stddev < 0:
            raise ConfigError("interarrival stddev must be nonnegative")
        if not self.rate_schedule or self.rate_schedule[0][0] != 0.0:
            raise ConfigError("rate schedule must start at t=0")
        last = None
        for start, mult in self.rate_schedule:
            if mult <= 0:
                raise ConfigError("rate multipliers must be positive")
            if last is not None and start <= last:
                raise ConfigError("rate schedule times must increase")
            last = start

    def multiplier_at(self, t: float) -> float:
        current = self.rate_schedule[0][1]
        for start, mult in self.rate_schedule:
            if start <= t:
                current = mult
            else:
                break
        return current


def next_interarrival(profile: DemandProfile, t_now: float,
                      rng: np.random.Generator) -> float:
    mult = profile.multiplier_at(t_now)
    mean = profile.base_mean_interarrival / mult
    stddev = profile.interarrival_stddev / mult
    draw = rng.normal(mean, stddev) if stddev > 0 else mean
    return max(float(draw), profile.min_interarrival)


def _town_stop_table(net: RoadNetwork, weight_of):
    table = []
    for town in sorted(net.towns, key=lambda t: t.id):
        stops = tuple(sorted(n for n in town.node_ids if n in net.stops))
        w = weight_of(town)
        if stops and w > 0:
            table.append((w, stops))
    if not table:
        raise ConfigError("no town has both a stop and positive demand weight")
    return table


def _od_tables(net: RoadNetwork):
    tables = getattr(net, "_od_tables", None)
    if tables is None:
        origin = _town_stop_table(net, lambda t: t.demand_weight)
        dest = _town_stop_table(net, lambda t: t.dest_weight_value())
        tables = []
        for table in (origin, dest):
            weights = np.array([w for w, _ in table])
            tables.append((table, weights / weights.sum()))
        tables = tuple(tables)
        object.__setattr__(net, "_od_tables", tables)
    return tables


def sample_od(net: RoadNetwork, rng: np.random.Generator) -> tuple[int, int]:
    (o_table, o_probs), (d_table, d_probs) = _od_tables(net)

    def draw_stop(table, probs) -> int:
        town_ix = int(rng.choice(len(table), p=probs))
        stops = table[town_ix][1]
        return int(stops[int(rng.integers(len(stops)))]) if len(stops) > 1 else stops[0]

    origin = draw_stop(o_table, o_probs)
    dest = draw_stop(d_table, d_probs)
    attempts = 0
    while dest == origin:
        attempts += 1
        if attempts > 16:
            # weighted support may be a single stop (all weight on a one-stop
            # town); fall back to uniform over the remaining stops
            others = sorted(s for s in net.stops if s != origin)
            dest = others[int(rng.integers(len(others)))] if len(others) > 1 else others[0]
            break
        dest = draw_stop(d_table, d_probs)
    return origin, dest


class DemandSource:
    """Owns the two demand streams and mints WAITING requests in call order."""

    def __init__(self, net: RoadNetwork, profile: DemandProfile, rng_streams,
                 scripted=None):
        self.net = net
        self.profile = profile
        self._timing = rng_streams.stream("demand-timing")
        self._od = rng_streams.stream("demand-od")
        self._next_id = 1
        self.scripted = list(scripted) if scripted is not None else None
        self._script_ix = 0

    def first_arrival_time(self) -> Optional[float]:
        if self.scripted is not None:
            if not self.scripted:
                return None
            return float(self.scripted[0][0])
        return next_interarrival(self.profile, 0.0, self._timing)

    def spawn(self, t: float) -> tuple[RideRequest, Optional[float]]:
        """Create the request arriving at t and return the next arrival time."""
        if self.scripted is not None:
            at, origin, dest = self.scripted[self._script_ix]
            if abs(float(at) - t) > 1e-9:
                raise ProtocolError(f"scripted arrival at {at} spawned at {t}")
            self._script_ix += 1
            nxt = (float(self.scripted[self._script_ix][0])
                   if self._script_ix < len(self.scripted) else None)
            origin, dest = int(origin), int(dest)
        else:
            origin, dest = sample_od(self.net, self._od)
            nxt = t + next_interarrival(self.profile, t, self._timing)
        req = RideRequest(id=self._next_id, call_time=t,
                          origin_stop=origin, dest_stop=dest)
        self._next_id += 1
        return req, nxt
