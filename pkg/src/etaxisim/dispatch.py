"""Control-center logic: request intake, pooling, rentals, fleet split.

The dispatcher only decides; executing a decision (building routes, boarding,
scheduling motion) belongs to the simulation. Everything here is deterministic
given the world state it is shown: candidate orders are fixed, ties break on
ids, and no RNG stream is consumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .city import PathPolicy, RoadNetwork, plan_route, route_time
from .demand import RideRequest
from .errors import ConfigError, InventoryError, NoPathError
from .fleet import PlanAction, PlanStop, Taxi, TaxiRole, TaxiState


@dataclass
class PolicyConfig:
    path_policy: PathPolicy = PathPolicy.SHORTEST_DISTANCE
    carpool: bool = False
    carsharing: bool = False
    rental_fraction: float = 0.2
    carpool_detour_factor: float = 1.5
    negotiation_wait_threshold: float = 600.0

    def validate(self, net: RoadNetwork) -> None:
        if not 0 <= self.rental_fraction < 1:
            raise ConfigError("rental_fraction must be in [0,1)")
        if self.carpool_detour_factor < 1:
            raise ConfigError("carpool_detour_factor must be >= 1")
        if self.negotiation_wait_threshold <= 0:
            raise ConfigError("negotiation_wait_threshold must be positive")
        if self.carsharing and len(net.rental_sites) != 2:
            raise ConfigError("carsharing requires exactly 2 rental sites")


def split_fleet(fleet_size: int, rental_fraction: float) -> tuple[int, int]:
    """(service taxis, rental cars); rentals rounded half-up, at least 2."""
    if fleet_size < 3:
        raise ConfigError("carsharing needs a fleet of at least 3")
    rental = int(math.floor(fleet_size * rental_fraction + 0.5))
    rental = max(rental, 2)
    if rental >= fleet_size:
        rental = fleet_size - 1
    return fleet_size - rental, rental


def seed_rental_sites(rental_count: int, sites: tuple[int, int]) -> dict[int, int]:
    """Initial per-site inventory; the smaller node id takes any odd car."""
    a, b = sorted(sites)
    half = rental_count // 2
    return {a: rental_count - half, b: half}


# ---------------------------------------------------------------------------
# Car-pool insertion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Insertion:
    taxi_id: int
    pickup_pos: int
    dropoff_pos: int
    added_time: float
    plan: tuple


def make_leg_time(net, occupancy, policy):
    """Plain leg-time function over policy routes; None when unroutable."""
    def leg_time(a: int, b: int):
        try:
            leg = plan_route(net, occupancy, a, b, policy)
        except NoPathError:
            return None
        return route_time(net, occupancy, leg)
    return leg_time


def plan_leg_times(leg_time, start_node, start_offset, now, plan):
    """Absolute arrival time at each plan stop, driving policy routes.

    leg_time(a, b) prices one leg (None = unroutable). start_offset covers
    the time to finish the segment the taxi is already committed to.
    Returns None when some leg has no route.
    """
    t = now + start_offset
    node = start_node
    arrivals = []
    for stop in plan:
        if stop.node != node:
            dt = leg_time(node, stop.node)
            if dt is None:
                return None
            t += dt
            node = stop.node
        arrivals.append(t)
    return arrivals


def _plan_feasible(taxi: Taxi, plan, arrivals, requests, now: float,
                   alpha: float, wait_threshold: float,
                   new_request_id: Optional[int],
                   latest_pickup: Optional[float] = None,
                   base_pickups: Optional[dict] = None,
                   new_alpha: Optional[float] = None) -> bool:
    # seat load along the plan
    load = len(taxi.onboard)
    for stop in plan:
        load += 1 if stop.action is PlanAction.PICKUP else -1
        if load > taxi.seats:
            return False
    # ride-time bound for every passenger with a dropoff in the plan
    pickup_at = {}
    for stop, t in zip(plan, arrivals):
        if stop.action is PlanAction.PICKUP:
            pickup_at[stop.request_id] = t
            # a match never postpones a pickup the host already promised
            if (base_pickups is not None
                    and stop.request_id != new_request_id
                    and t > base_pickups.get(stop.request_id, t) + 1e-9):
                return False
            continue
        req = requests[stop.request_id]
        if stop.request_id in pickup_at:
            start = pickup_at[stop.request_id]
        elif req.pickup_time is not None:
            start = req.pickup_time
        else:
            return False
        # a negotiated request may carry its own relaxed detour factor
        a = new_alpha if (new_alpha is not None
                          and stop.request_id == new_request_id) else alpha
        if t - start > a * req.direct_time + 1e-9:
            return False
    if new_request_id is not None:
        req = requests[new_request_id]
        if pickup_at[new_request_id] - req.call_time > wait_threshold + 1e-9:
            return False
        # pooling must not be slower than sending the closest idle taxi
        if (latest_pickup is not None
                and pickup_at[new_request_id] > latest_pickup + 1e-9):
            return False
    return True


def carpool_match(req: RideRequest, hosts, leg_time, now: float,
                  alpha: float, wait_threshold: float,
                  requests, taxi_starts,
                  latest_pickup: Optional[float] = None,
                  new_alpha: Optional[float] = None) -> Optional[Insertion]:
    """Best single-vehicle insertion of (pickup, dropoff) over all hosts.

    hosts: taxis in EN_ROUTE_TO_PICKUP or OCCUPIED with a spare seat.
    taxi_starts: taxi id -> (start_node, start_offset_s) for plan projection.
    All (i, j) insertions preserving existing stop order are scored; the
    minimum (added_time, taxi_id, i, j) wins. latest_pickup (when given) caps
    the pooled pickup at the moment the closest idle taxi would arrive, so a
    pool match never beats a faster direct dispatch. Pickups already in the
    host plan must not arrive later than they would without the insertion.
    new_alpha, when given, replaces alpha for the new request only (the
    negotiated-relaxation path). Returns None if nothing is feasible.
    """
    best: Optional[Insertion] = None
    pickup = PlanStop(req.origin_stop, PlanAction.PICKUP, req.id)
    dropoff = PlanStop(req.dest_stop, PlanAction.DROPOFF, req.id)
    for taxi in sorted(hosts, key=lambda t: t.id):
        if len(taxi.onboard) >= taxi.seats:
            continue
        start_node, start_offset = taxi_starts[taxi.id]
        base_plan = list(taxi.plan)
        base_arrivals = plan_leg_times(leg_time, start_node, start_offset,
                                       now, base_plan)
        if base_arrivals is None:
            continue
        base_total = (base_arrivals[-1] - now) if base_arrivals else start_offset
        base_pickups = {s.request_id: t for s, t in zip(base_plan, base_arrivals)
                        if s.action is PlanAction.PICKUP}
        n = len(base_plan)
        for i in range(n + 1):
            for j in range(i, n + 1):
                candidate = base_plan[:i] + [pickup] + base_plan[i:j] \
                    + [dropoff] + base_plan[j:]
                arrivals = plan_leg_times(leg_time, start_node, start_offset,
                                          now, candidate)
                if arrivals is None:
                    continue
                if not _plan_feasible(taxi, candidate, arrivals, requests, now,
                                      alpha, wait_threshold, req.id,
                                      latest_pickup, base_pickups, new_alpha):
                    continue
                added = (arrivals[-1] - now) - base_total
                key = (added, taxi.id, i, j)
                if best is None or key < (best.added_time, best.taxi_id,
                                          best.pickup_pos, best.dropoff_pos):
                    best = Insertion(taxi.id, i, j, added, tuple(candidate))
    return best


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

@dataclass
class Decision:
    kind: str                      # "assigned" | "pooled" | "rental" | "queued"
    taxi_id: Optional[int] = None
    insertion: Optional[Insertion] = None
    rental_site: Optional[int] = None


class Dispatcher:
    """Holds the pending FIFO and rental inventory; decides per request."""

    def __init__(self, net: RoadNetwork, policy: PolicyConfig):
        self.net = net
        self.policy = policy
        self.pending: list[int] = []
        self.rental_inventory: dict[int, int] = {}
        self.rented_out: set[int] = set()

    # --- car sharing ---

    def rental_available(self, req: RideRequest) -> bool:
        if not self.policy.carsharing:
            return False
        sites = set(self.net.rental_sites)
        return (req.origin_stop in sites and req.dest_stop in sites
                and self.rental_inventory.get(req.origin_stop, 0) > 0)

    def take_rental(self, site: int) -> None:
        if self.rental_inventory.get(site, 0) <= 0:
            raise InventoryError(f"no rental car at site {site}")
        self.rental_inventory[site] -= 1

    def return_rental(self, site: int) -> None:
        if site not in self.net.rental_sites:
            raise InventoryError(f"{site} is not a rental site")
        self.rental_inventory[site] = self.rental_inventory.get(site, 0) + 1

    # --- core intake ---

    def handle_request(self, req: RideRequest, world) -> Decision:
        """Assignment chain: rental, then pool, then nearest idle, then queue.

        world supplies the taxi views: idle_candidates(origin) -> [(eta, id)],
        pool_hosts() -> taxis, taxi_starts(), leg_time(a, b), requests, now.
        """
        if self.rental_available(req):
            return Decision("rental", rental_site=req.origin_stop)
        candidates = world.idle_candidates(req.origin_stop)
        latest = (world.now + min(candidates)[0]) if candidates else None
        ins = self._pool_match(req, world, latest_pickup=latest)
        if ins is not None:
            return Decision("pooled", taxi_id=ins.taxi_id, insertion=ins)
        if candidates:
            eta, taxi_id = min(candidates)
            return Decision("assigned", taxi_id=taxi_id)
        self.pending.append(req.id)
        return Decision("queued")

    def requeue_decision(self, req: RideRequest, world) -> Decision:
        """Re-examination of an already queued request (no rental retry)."""
        candidates = world.idle_candidates(req.origin_stop)
        latest = (world.now + min(candidates)[0]) if candidates else None
        ins = self._pool_match(req, world, latest_pickup=latest)
        if ins is not None:
            return Decision("pooled", taxi_id=ins.taxi_id, insertion=ins)
        if candidates:
            eta, taxi_id = min(candidates)
            return Decision("assigned", taxi_id=taxi_id)
        return Decision("queued")

    def _pool_match(self, req: RideRequest, world,
                    relaxed_alpha: Optional[float] = None,
                    latest_pickup: Optional[float] = None) -> Optional[Insertion]:
        if not self.policy.carpool and relaxed_alpha is None:
            return None
        return carpool_match(
            req, world.pool_hosts(), world.leg_time, world.now,
            self.policy.carpool_detour_factor,
            self.policy.negotiation_wait_threshold, world.requests,
            world.taxi_starts(), latest_pickup=latest_pickup,
            new_alpha=relaxed_alpha,
        )
