"""Electric-taxi agents: motion, battery, charging behavior, jam reaction.

Motion is event-driven. A taxi's position and battery are materialized lazily
by ``advance``; between two calls the simulation guarantees that nothing
affecting the taxi's current segment (jam flips, replans) happened, so
integrating at the current effective speed is exact, not an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .city import (ChargingStation, PathPolicy, RoadNetwork, TrafficState,
                   effective_speed, shortest_tree)
from .errors import ProtocolError, StrandedError


class TaxiRole(Enum):
    TAXI = "TAXI"
    RENTAL = "RENTAL"


class TaxiState(Enum):
    IDLE_AT_STOP = "IDLE_AT_STOP"
    EN_ROUTE_TO_PICKUP = "EN_ROUTE_TO_PICKUP"
    OCCUPIED = "OCCUPIED"
    EN_ROUTE_TO_STATION = "EN_ROUTE_TO_STATION"
    QUEUED_AT_STATION = "QUEUED_AT_STATION"
    CHARGING = "CHARGING"
    PARKED_AT_RENTAL_SITE = "PARKED_AT_RENTAL_SITE"
    RENTED_OUT = "RENTED_OUT"
    RETIRING = "RETIRING"


# IDLE_AT_STOP covers both standing at a stop and the empty repositioning leg
# toward one; the per-taxi time partition treats both as idle.
LEGAL_TRANSITIONS = {
    TaxiState.IDLE_AT_STOP: {TaxiState.EN_ROUTE_TO_PICKUP, TaxiState.OCCUPIED,
                             TaxiState.EN_ROUTE_TO_STATION, TaxiState.RETIRING},
    TaxiState.EN_ROUTE_TO_PICKUP: {TaxiState.OCCUPIED, TaxiState.IDLE_AT_STOP},
    TaxiState.OCCUPIED: {TaxiState.OCCUPIED, TaxiState.EN_ROUTE_TO_PICKUP,
                         TaxiState.IDLE_AT_STOP},
    TaxiState.EN_ROUTE_TO_STATION: {TaxiState.QUEUED_AT_STATION, TaxiState.CHARGING,
                                    TaxiState.RETIRING},
    TaxiState.QUEUED_AT_STATION: {TaxiState.CHARGING, TaxiState.RETIRING},
    TaxiState.CHARGING: {TaxiState.IDLE_AT_STOP},
    TaxiState.PARKED_AT_RENTAL_SITE: {TaxiState.RENTED_OUT},
    TaxiState.RENTED_OUT: {TaxiState.PARKED_AT_RENTAL_SITE},
    TaxiState.RETIRING: set(),
}

DISPATCH_STATES = {TaxiState.EN_ROUTE_TO_PICKUP, TaxiState.OCCUPIED,
                   TaxiState.EN_ROUTE_TO_STATION}

CHARGE_CYCLE_STATES = {TaxiState.EN_ROUTE_TO_STATION, TaxiState.QUEUED_AT_STATION,
                       TaxiState.CHARGING}


@dataclass(frozen=True)
class BatteryModel:
    capacity_kwh: float = 40.0
    drive_consumption_kwh_per_km: float = 0.2
    idle_drain_kwh_per_hour: float = 0.4
    reserve_fraction: float = 0.2

    def __post_init__(self):
        ok = (self.capacity_kwh > 0 and self.drive_consumption_kwh_per_km > 0
              and self.idle_drain_kwh_per_hour > 0
              and 0 < self.reserve_fraction < 1)
        if not ok:
            raise ValueError("battery model fields must be positive, reserve in (0,1)")

    @property
    def reserve_kwh(self) -> float:
        return self.reserve_fraction * self.capacity_kwh


class PlanAction(Enum):
    PICKUP = "PICKUP"
    DROPOFF = "DROPOFF"


@dataclass
class PlanStop:
    node: int
    action: PlanAction
    request_id: int


@dataclass
class Taxi:
    id: int
    role: TaxiRole
    state: TaxiState
    node: Optional[int]                    # set when standing at a node
    battery_kwh: float
    seats: int = 4
    # current segment while moving: id, fraction covered as of synced_at
    seg_id: Optional[int] = None
    seg_frac: float = 0.0
    route: list = field(default_factory=list)    # remaining segment ids, current leg
    route_ix: int = 0
    plan: list = field(default_factory=list)     # ordered PlanStop list
    onboard: list = field(default_factory=list)  # request ids currently riding
    synced_at: float = 0.0
    motion_token: int = 0
    charge_rate_kw: float = 0.0            # nonzero while plugged in (station or depot)
    station_id: Optional[int] = None       # set across the charge cycle
    retiring: bool = False                 # marked for removal when next idle
    stranded: bool = False
    spawned_at: float = 0.0
    leg_purpose: Optional[str] = None      # why the current route is driven

    @property
    def moving(self) -> bool:
        return self.seg_id is not None

    def remaining_segments(self) -> list:
        return self.route[self.route_ix:]

    def set_state(self, new: TaxiState, log: Optional[list] = None) -> None:
        if new is self.state:
            return
        if new not in LEGAL_TRANSITIONS[self.state]:
            raise ProtocolError(
                f"taxi {self.id}: illegal transition {self.state.value} -> {new.value}"
            )
        if self.role is TaxiRole.RENTAL and new in DISPATCH_STATES:
            raise ProtocolError(f"rental car {self.id} cannot enter {new.value}")
        if log is not None:
            log.append((self.id, self.state.value, new.value))
        self.state = new


def advance(taxi: Taxi, t_now: float, net: RoadNetwork, traffic: TrafficState,
            battery: BatteryModel,
            on_enter: Optional[Callable[[int], None]] = None,
            on_leave: Optional[Callable[[int], None]] = None) -> None:
    """Materialize position and battery at t_now.

    Driving consumes drive_consumption per km; everything else drains
    idle_drain per hour, or charges at charge_rate_kw while plugged in
    (at a station or parked at a rental depot).
    Raises StrandedError when the battery would cross zero; the taxi is left
    at 0 kWh and the caller decides what freezing means.
    """
    dt = t_now - taxi.synced_at
    if dt < -1e-7:
        raise ProtocolError(f"taxi {taxi.id} advanced backwards ({taxi.synced_at} -> {t_now})")
    if dt <= 0:
        return
    taxi.synced_at = t_now
    if taxi.stranded:
        return

    if not taxi.moving:
        if taxi.charge_rate_kw > 0:
            taxi.battery_kwh = min(
                battery.capacity_kwh,
                taxi.battery_kwh + taxi.charge_rate_kw * dt / 3600.0,
            )
        else:
            _drain(taxi, battery.idle_drain_kwh_per_hour * dt / 3600.0)
        return

    remaining = dt
    while remaining > 1e-7:
        if taxi.seg_id is None:
            # route exhausted mid-advance: the rest of the interval is idle
            _drain(taxi, battery.idle_drain_kwh_per_hour * remaining / 3600.0)
            return
        seg = net.segment(taxi.seg_id)
        speed = effective_speed(seg, traffic.count(seg.id))
        left_m = (1.0 - taxi.seg_frac) * seg.length_m
        time_to_node = left_m / speed
        if remaining < time_to_node - 1e-7:
            covered = speed * remaining
            taxi.seg_frac += covered / seg.length_m
            _drain(taxi, battery.drive_consumption_kwh_per_km * covered / 1000.0)
            return
        # reach the segment end
        _drain(taxi, battery.drive_consumption_kwh_per_km * left_m / 1000.0)
        remaining -= time_to_node
        done = seg.id
        taxi.node = seg.to_node
        taxi.seg_id = None
        taxi.seg_frac = 0.0
        taxi.route_ix += 1
        if on_leave is not None:
            on_leave(done)
        nxt = taxi.route[taxi.route_ix] if taxi.route_ix < len(taxi.route) else None
        if nxt is not None:
            taxi.seg_id = nxt
            taxi.seg_frac = 0.0
            taxi.node = None
            if on_enter is not None:
                on_enter(nxt)


def _drain(taxi: Taxi, amount: float) -> None:
    if amount <= 0:
        return
    taxi.battery_kwh -= amount
    if taxi.battery_kwh < -1e-9:
        taxi.battery_kwh = 0.0
        taxi.stranded = True
        raise StrandedError(f"taxi {taxi.id} battery depleted")
    taxi.battery_kwh = max(taxi.battery_kwh, 0.0)


def needs_charge(taxi: Taxi, battery: BatteryModel) -> bool:
    if taxi.state in CHARGE_CYCLE_STATES:
        return False
    return taxi.battery_kwh <= battery.reserve_kwh


@dataclass
class StationState:
    """Runtime side of a charging station: FIFO queue plus occupied chargers."""

    config: ChargingStation
    queue: list = field(default_factory=list)        # taxi ids, FIFO
    in_service: dict = field(default_factory=dict)   # taxi id -> completion time
    committed: int = 0   # taxis EN_ROUTE_TO_STATION that chose this station

    @property
    def busy(self) -> bool:
        return len(self.in_service) >= self.config.charger_count

    @property
    def free_chargers(self) -> int:
        return self.config.charger_count - len(self.in_service)

    def expected_load(self) -> int:
        """Pending work used by the selection criterion."""
        backlog = len(self.queue) + max(0, len(self.in_service) - self.free_chargers)
        return backlog


def full_charge_seconds(battery_kwh: float, capacity_kwh: float, rate_kw: float) -> float:
    return max(0.0, capacity_kwh - battery_kwh) / rate_kw * 3600.0


def mean_full_charge_seconds(battery: BatteryModel, rate_kw: float) -> float:
    """Expected session length for a taxi arriving at the reserve threshold."""
    return full_charge_seconds(battery.reserve_kwh, battery.capacity_kwh, rate_kw)


def select_station(taxi_node: int, stations: list[StationState], net: RoadNetwork,
                   occupancy, mean_charge_s: float,
                   include_committed: bool = True) -> StationState:
    """Station minimizing ETA + expected-wait score; ties to smaller id.

    score = ETA(LEAST_TIME from taxi_node) + (queue + charger overflow
    [+ committed inbound]) * mean_charge_s. Station states are whatever the
    control center reports at decision time; no re-selection happens en route.
    """
    if not stations:
        raise ProtocolError("select_station called with no stations")
    tree = shortest_tree(net, occupancy, taxi_node, PathPolicy.LEAST_TIME)
    best = None
    for st in stations:
        entry = tree.get(st.config.node_id)
        if entry is None:
            continue
        eta = entry[1]
        load = st.expected_load()
        if include_committed:
            load += st.committed
        score = eta + load * mean_charge_s
        key = (score, st.config.id)
        if best is None or key < best[0]:
            best = (key, st)
    if best is None:
        raise ProtocolError(f"no station reachable from node {taxi_node}")
    return best[1]


def reroute_for_jams(taxi: Taxi, net: RoadNetwork, occupancy,
                     jammed: frozenset, policy: PathPolicy):
    """Jam-broadcast reaction: replan the remaining route avoiding all
    currently jammed segments.

    Returns the new remaining segment list, or None when the route is kept
    (no jammed segment ahead, or no jam-free alternative exists). The segment
    being traversed is never abandoned; replanning starts at its end node.
    """
    from .city import plan_route
    from .errors import NoPathError

    remaining = taxi.remaining_segments()
    if not remaining:
        return None
    if taxi.moving:
        current, ahead = remaining[0], remaining[1:]
        start = net.segment(current).to_node
    else:
        current, ahead = None, remaining
        start = taxi.node
    if not any(s in jammed for s in ahead):
        return None
    destination = net.segment(remaining[-1]).to_node
    try:
        fresh = plan_route(net, occupancy, start, destination, policy,
                           excluded=jammed)
    except NoPathError:
        return None
    new_remaining = ([current] if current is not None else []) + list(fresh.segment_ids)
    if new_remaining == remaining:
        return None
    return new_remaining
