"""The closed-loop world: demand, dispatch, motion, energy, commands.

One Simulation owns one Engine and is strictly single-threaded. All mutation
happens inside event handlers; between events the world is frozen, which is
what makes run_until prefix-stable and snapshots pure reads. The external
surface is: construct, submit_commands, run_until, snapshot, report.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

from .city import (
    ChargingStation,
    PathPolicy,
    TrafficState,
    build_city,
    effective_speed,
    nearest_stop,
    plan_route,
    shortest_tree,
    town_center_stops,
)
from .demand import DemandSource, RequestStatus, RideRequest
from .dispatch import (Decision, Dispatcher, plan_leg_times,
                       seed_rental_sites, split_fleet)
from .engine import Engine, EventKind, SimEvent, SimSnapshot
from .errors import (
    CommandError,
    NoPathError,
    StrandedError,
    TargetError,
)
from .fleet import (
    PlanAction,
    PlanStop,
    StationState,
    Taxi,
    TaxiRole,
    TaxiState,
    advance,
    full_charge_seconds,
    mean_full_charge_seconds,
    needs_charge,
    reroute_for_jams,
    select_station,
)
from .metrics import MetricsReport, ingest
from .scenario import ScenarioConfig

COMMAND_KINDS = frozenset({
    "Pause", "Resume", "StepUntil", "SetGenerationRate", "SetFleetSize",
    "SetStationCount", "SetPolicy", "ForceAssign", "RerouteTaxi",
    "NegotiationReply",
})

NEGOTIATION_CHOICES = ("KEEP_WAITING", "OFFER_CARPOOL", "CANCEL_REQUEST")


class _World:
    """What the dispatcher is allowed to see."""

    def __init__(self, sim: "Simulation"):
        self._sim = sim

    @property
    def now(self):
        return self._sim.engine.now

    @property
    def occupancy(self):
        return self._sim.traffic.occupancy

    @property
    def requests(self):
        return self._sim.requests

    def leg_time(self, a: int, b: int):
        return self._sim.leg_time(a, b)

    def idle_candidates(self, origin: int):
        return self._sim._idle_candidates(origin)

    def pool_hosts(self):
        return self._sim._pool_hosts()

    def taxi_starts(self):
        return self._sim._taxi_starts()


class Simulation:
    def __init__(self, config: ScenarioConfig, master_seed: Optional[int] = None,
                 outbox: Optional[list] = None):
        self.config = config
        seed = config.master_seed if master_seed is None else master_seed
        self.seed = seed
        self.net = build_city(config.map_spec())
        self.traffic = TrafficState(self.net)
        self.engine = Engine(seed)
        self.battery = config.battery_model()
        self.policy = config.policy_config()
        self.policy.validate(self.net)
        self.dispatcher = Dispatcher(self.net, self.policy)
        self.demand = DemandSource(self.net, config.demand_profile(),
                                   self.engine.rng,
                                   scripted=config.scripted_arrivals)
        self.requests: dict[int, RideRequest] = {}
        self.taxis: dict[int, Taxi] = {}
        self.retired: dict[int, Taxi] = {}
        self.stations: dict[int, StationState] = {}
        self._closed: dict[int, StationState] = {}
        self.log: list[dict] = []
        self.command_log: list[dict] = []
        self.outbox = outbox            # gateway stream hook; None when headless
        self.prompts: dict[int, dict] = {}
        self._relaxed_alpha: dict[int, float] = {}
        self._next_prompt_id = 1
        self._next_cmd_ix = 0
        self._spawn_cursor = 0
        self._tree_cache: dict = {}
        self._world = _World(self)

        eng = self.engine
        eng.on(EventKind.PASSENGER_ARRIVAL, self._on_arrival)
        eng.on(EventKind.TAXI_ARRIVED_AT_NODE, self._on_taxi_arrived)
        eng.on(EventKind.CHARGE_COMPLETE, self._on_charge_complete)
        eng.on(EventKind.JAM_STATE_CHANGED, self._on_jam_changed)
        eng.on(EventKind.DISPATCH_TICK, self._on_dispatch_tick)
        eng.on(EventKind.COMMAND_APPLIED, self._on_command)
        eng.on(EventKind.NEGOTIATION_TIMEOUT, self._on_negotiation_timeout)
        eng.on(EventKind.METRICS_SAMPLE, self._on_metrics_sample)

        self._init_stations()
        self._init_fleet()

        first = self.demand.first_arrival_time()
        if first is not None:
            eng.schedule(first, EventKind.PASSENGER_ARRIVAL)
        eng.schedule(config.dispatch_tick_s, EventKind.DISPATCH_TICK)
        eng.schedule(config.metrics_sample_s, EventKind.METRICS_SAMPLE)

    # ------------------------------------------------------------------
    # Construction
    # ------------------------------------------------------------------

    def _init_stations(self):
        for st in self.net.stations:
            self.stations[st.id] = StationState(config=st)

    def _init_fleet(self):
        cfg = self.config
        if self.policy.carsharing:
            service, rentals = split_fleet(cfg.fleet_size, self.policy.rental_fraction)
        else:
            service, rentals = cfg.fleet_size, 0
        stops = town_center_stops(self.net)
        usable = self.battery.capacity_kwh - self.battery.reserve_kwh
        for k in range(service):
            if cfg.initial_battery == "staggered":
                level = self.battery.reserve_kwh + usable * ((k % 8) + 1) / 8.0
            else:
                level = self.battery.capacity_kwh
            node = stops[self._spawn_cursor % len(stops)]
            self._spawn_cursor += 1
            self._spawn_taxi(TaxiRole.TAXI, node, level, TaxiState.IDLE_AT_STOP)
        if rentals:
            inventory = seed_rental_sites(rentals, self.net.rental_sites)
            self.dispatcher.rental_inventory = dict(inventory)
            for site in sorted(inventory):
                for _ in range(inventory[site]):
                    car = self._spawn_taxi(TaxiRole.RENTAL, site,
                                           self.battery.capacity_kwh,
                                           TaxiState.PARKED_AT_RENTAL_SITE)
                    # parked rentals sit on a depot plug
                    car.charge_rate_kw = self.config.charge_rate_kw

    def _spawn_taxi(self, role, node, battery_kwh, state) -> Taxi:
        tid = len(self.taxis) + len(self.retired) + 1
        taxi = Taxi(id=tid, role=role, state=state, node=node,
                    battery_kwh=battery_kwh, seats=self.config.seats,
                    synced_at=self.engine.now, spawned_at=self.engine.now)
        self.taxis[tid] = taxi
        self._rec("taxi_spawn", taxi=tid, role=role.value, state=state.value,
                  node=node)
        return taxi

    # ------------------------------------------------------------------
    # Logging
    # ------------------------------------------------------------------

    def _rec(self, ev: str, **fields):
        rec = {"t": self.engine.now, "ev": ev}
        rec.update(fields)
        self.log.append(rec)

    def _set_state(self, taxi: Taxi, new: TaxiState):
        if new is taxi.state:
            return
        moves: list = []
        taxi.set_state(new, moves)
        for tid, frm, to in moves:
            self._rec("taxi_state", taxi=tid, **{"from": frm, "to": to})

    def _emit(self, kind: str, body: dict):
        # the stream kind is authoritative; payloads cannot override it
        if self.outbox is not None:
            self.outbox.append({"t": self.engine.now, **body, "kind": kind})

    # ------------------------------------------------------------------
    # Routing caches
    # ------------------------------------------------------------------

    def _forward_tree(self, source: int, policy: PathPolicy):
        key = ("f", source, policy, self.traffic.jam_version)
        tree = self._tree_cache.get(key)
        if tree is None:
            if len(self._tree_cache) > 4096:
                self._tree_cache.clear()
            tree = shortest_tree(self.net, self.traffic.occupancy, source, policy)
            self._tree_cache[key] = tree
        return tree

    def _reverse_tree(self, target: int, policy: PathPolicy):
        key = ("r", target, policy, self.traffic.jam_version)
        tree = self._tree_cache.get(key)
        if tree is None:
            if len(self._tree_cache) > 4096:
                self._tree_cache.clear()
            tree = shortest_tree(self.net, self.traffic.occupancy, target, policy,
                                 reverse=True)
            self._tree_cache[key] = tree
        return tree

    def leg_time(self, a: int, b: int) -> Optional[float]:
        entry = self._forward_tree(a, self.policy.path_policy).get(b)
        return None if entry is None else entry[1]

    def _route_segments(self, a: int, b: int, policy: PathPolicy) -> list:
        entry = self._forward_tree(a, policy).get(b)
        if entry is None:
            raise NoPathError(f"no route {a} -> {b}")
        return list(entry[2])

    # ------------------------------------------------------------------
    # Dispatcher world views
    # ------------------------------------------------------------------

    def _idle_candidates(self, origin: int):
        rev = self._reverse_tree(origin, self.policy.path_policy)
        out = []
        for tid in sorted(self.taxis):
            taxi = self.taxis[tid]
            if (taxi.role is not TaxiRole.TAXI or taxi.retiring or taxi.stranded
                    or taxi.state is not TaxiState.IDLE_AT_STOP):
                continue
            if taxi.moving:
                seg = self.net.segment(taxi.seg_id)
                head = self._remaining_segment_time(taxi)
                entry = rev.get(seg.to_node)
            else:
                head = 0.0
                entry = rev.get(taxi.node)
            if entry is None:
                continue
            out.append((head + entry[1], tid))
        return out

    def _pool_hosts(self):
        return [t for tid, t in sorted(self.taxis.items())
                if t.role is TaxiRole.TAXI and not t.retiring and not t.stranded
                and t.state in (TaxiState.EN_ROUTE_TO_PICKUP, TaxiState.OCCUPIED)
                and len(t.onboard) < t.seats]

    def _taxi_starts(self):
        starts = {}
        for taxi in self._pool_hosts():
            if taxi.moving:
                seg = self.net.segment(taxi.seg_id)
                starts[taxi.id] = (seg.to_node, self._remaining_segment_time(taxi))
            else:
                starts[taxi.id] = (taxi.node, 0.0)
        return starts

    def _remaining_segment_time(self, taxi: Taxi) -> float:
        # seg_frac is only materialized lazily; extrapolate from the last
        # sync (the speed cannot have changed since: riders are materialized
        # before any jam flip)
        seg = self.net.segment(taxi.seg_id)
        speed = effective_speed(seg, self.traffic.count(seg.id))
        left = (1.0 - taxi.seg_frac) * seg.length_m / speed
        return max(0.0, left - (self.engine.now - taxi.synced_at))

    # ------------------------------------------------------------------
    # Motion
    # ------------------------------------------------------------------

    def _advance(self, taxi: Taxi):
        try:
            advance(taxi, self.engine.now, self.net, self.traffic, self.battery,
                    on_enter=lambda sid: self._seg_enter(sid, taxi),
                    on_leave=lambda sid: self._seg_leave(sid, taxi))
        except StrandedError:
            self._on_stranded(taxi)

    def _seg_enter(self, seg_id: int, taxi: Taxi):
        seg = self.net.segment(seg_id)
        if self.traffic.count(seg_id) + 1 == seg.jam_threshold:
            self._sync_riders(seg_id, exclude=taxi.id)
        state, changed = self.traffic.enter_segment(seg_id, taxi.id)
        if changed:
            self._rec("jam", seg=seg_id, state=state.value)
            self.engine.schedule(self.engine.now, EventKind.JAM_STATE_CHANGED,
                                 {"seg": seg_id, "state": state.value})

    def _seg_leave(self, seg_id: int, taxi: Taxi):
        seg = self.net.segment(seg_id)
        if self.traffic.count(seg_id) == seg.jam_threshold:
            self._sync_riders(seg_id, exclude=taxi.id)
        state, changed = self.traffic.leave_segment(seg_id, taxi.id)
        if changed:
            self._rec("jam", seg=seg_id, state=state.value)
            self.engine.schedule(self.engine.now, EventKind.JAM_STATE_CHANGED,
                                 {"seg": seg_id, "state": state.value})

    def _sync_riders(self, seg_id: int, exclude: int):
        """Materialize everyone on a segment before its speed flips."""
        for tid in sorted(self.traffic._vehicles.get(seg_id, ())):
            if tid == exclude:
                continue
            rider = self.taxis.get(tid)
            if rider is not None:
                self._advance(rider)

    def _depart(self, taxi: Taxi, segments: list, purpose: str):
        """Start driving an already-positioned taxi along segments."""
        if not segments:
            taxi.leg_purpose = purpose
            self._leg_complete(taxi)
            return
        taxi.route = list(segments)
        taxi.route_ix = 0
        taxi.leg_purpose = purpose
        taxi.seg_id = segments[0]
        taxi.seg_frac = 0.0
        taxi.node = None
        taxi.synced_at = self.engine.now
        self._seg_enter(segments[0], taxi)
        self._schedule_arrival(taxi)

    def _schedule_arrival(self, taxi: Taxi):
        taxi.motion_token += 1
        t_arr = self.engine.now + self._remaining_segment_time(taxi)
        self.engine.schedule(t_arr, EventKind.TAXI_ARRIVED_AT_NODE,
                             {"taxi": taxi.id, "token": taxi.motion_token})

    def _replan_current_leg(self, taxi: Taxi, target: int, purpose: str,
                            excluded=frozenset()):
        """Point the taxi at target, keeping any segment already underway."""
        self._advance(taxi)
        if taxi.stranded:
            return
        if taxi.moving:
            seg = self.net.segment(taxi.seg_id)
            if seg.to_node == target:
                tail = []
            else:
                if excluded:
                    tail = list(plan_route(self.net, self.traffic.occupancy,
                                           seg.to_node, target,
                                           self.policy.path_policy,
                                           excluded=excluded).segment_ids)
                else:
                    tail = self._route_segments(seg.to_node, target,
                                                self.policy.path_policy)
            taxi.route = [seg.id] + tail
            taxi.route_ix = 0
            taxi.leg_purpose = purpose
            self._schedule_arrival(taxi)
        else:
            if taxi.node == target:
                taxi.route = []
                taxi.route_ix = 0
                taxi.leg_purpose = purpose
                self._leg_complete(taxi)
            else:
                segs = self._route_segments(taxi.node, target,
                                            self.policy.path_policy)
                self._depart(taxi, segs, purpose)

    # ------------------------------------------------------------------
    # Event handlers
    # ------------------------------------------------------------------

    def _on_arrival(self, ev: SimEvent):
        req, nxt = self.demand.spawn(self.engine.now)
        if nxt is not None:
            self.engine.schedule(nxt, EventKind.PASSENGER_ARRIVAL)
        self.requests[req.id] = req
        direct = self._forward_tree(req.origin_stop, PathPolicy.LEAST_TIME)
        req.direct_time = direct[req.dest_stop][1]
        self._rec("call", rid=req.id, origin=req.origin_stop, dest=req.dest_stop)
        decision = self.dispatcher.handle_request(req, self._world)
        self._execute_decision(req, decision)

    def _execute_decision(self, req: RideRequest, decision: Decision):
        if decision.kind == "rental":
            self._start_rental(req, decision.rental_site)
        elif decision.kind == "pooled":
            self._apply_insertion(self.taxis[decision.taxi_id], req,
                                  decision.insertion)
        elif decision.kind == "assigned":
            self._assign(req, self.taxis[decision.taxi_id])
        # queued: FIFO already holds it

    def _start_rental(self, req: RideRequest, site: int):
        self.dispatcher.take_rental(site)
        car = None
        for tid in sorted(self.taxis):
            cand = self.taxis[tid]
            if (cand.role is TaxiRole.RENTAL and cand.node == site
                    and cand.state is TaxiState.PARKED_AT_RENTAL_SITE):
                car = cand
                break
        if car is None:
            raise CommandError(f"rental inventory out of sync at site {site}")
        req.advance_status(RequestStatus.RENTAL_TRIP)
        req.assigned_taxi = car.id
        req.pickup_time = self.engine.now
        self._set_state(car, TaxiState.RENTED_OUT)
        car.plan = []
        self._advance(car)
        car.charge_rate_kw = 0.0
        self._rec("rental_start", rid=req.id, car=car.id, site=site)
        segs = self._route_segments(site, req.dest_stop, PathPolicy.LEAST_TIME)
        car.station_id = None
        car.onboard = [req.id]
        self._depart(car, segs, "rental")

    def _assign(self, req: RideRequest, taxi: Taxi):
        req.advance_status(RequestStatus.ASSIGNED)
        req.assigned_taxi = taxi.id
        taxi.plan = [PlanStop(req.origin_stop, PlanAction.PICKUP, req.id),
                     PlanStop(req.dest_stop, PlanAction.DROPOFF, req.id)]
        self._set_state(taxi, TaxiState.EN_ROUTE_TO_PICKUP)
        self._rec("assign", rid=req.id, taxi=taxi.id)
        self._resolve_prompt_for(req, "ASSIGNED")
        self._replan_current_leg(taxi, taxi.plan[0].node, "plan")

    def _apply_insertion(self, taxi: Taxi, req: RideRequest, insertion):
        req.advance_status(RequestStatus.ASSIGNED)
        req.assigned_taxi = taxi.id
        taxi.plan = list(insertion.plan)
        self._rec("assign", rid=req.id, taxi=taxi.id)
        self._rec("pool", rid=req.id, taxi=taxi.id)
        self._log_pool_projection(taxi)
        self._resolve_prompt_for(req, "ASSIGNED")
        if not taxi.onboard:
            self._set_state(taxi, TaxiState.EN_ROUTE_TO_PICKUP)
        self._replan_current_leg(taxi, taxi.plan[0].node, "plan")

    def _log_pool_projection(self, taxi: Taxi):
        """Record the ride time promised to each passenger on a pooled plan.

        The detour bound is a matching-time constraint on projected times;
        traffic that shifts after commitment may stretch the realized ride.
        The log carries the projection so the promise stays auditable.
        """
        if taxi.moving:
            seg = self.net.segment(taxi.seg_id)
            start = (seg.to_node, self._remaining_segment_time(taxi))
        else:
            start = (taxi.node, 0.0)
        arrivals = plan_leg_times(self.leg_time, start[0], start[1],
                                  self.engine.now, taxi.plan)
        if arrivals is None:
            return
        pickup_at = {}
        for stop, t in zip(taxi.plan, arrivals):
            if stop.action is PlanAction.PICKUP:
                pickup_at[stop.request_id] = t
                continue
            req = self.requests[stop.request_id]
            if stop.request_id in pickup_at:
                begin = pickup_at[stop.request_id]
            elif req.pickup_time is not None:
                begin = req.pickup_time
            else:
                continue
            factor = self._relaxed_alpha.get(stop.request_id,
                                             self.policy.carpool_detour_factor)
            self._rec("pool_projection", rid=stop.request_id, taxi=taxi.id,
                      projected_ride=t - begin,
                      bound=factor * req.direct_time)

    def _on_taxi_arrived(self, ev: SimEvent):
        taxi = self.taxis.get(ev.payload["taxi"])
        if taxi is None or taxi.stranded:
            return
        if ev.payload["token"] != taxi.motion_token:
            return
        self._advance(taxi)
        if taxi.stranded:
            return
        if taxi.moving:
            self._schedule_arrival(taxi)
            return
        self._leg_complete(taxi)

    def _leg_complete(self, taxi: Taxi):
        purpose = taxi.leg_purpose
        taxi.route = []
        taxi.route_ix = 0
        if purpose == "plan":
            self._execute_plan_stops(taxi)
        elif purpose == "station":
            self._station_arrival(taxi)
        elif purpose == "rental":
            self._rental_arrival(taxi)
        elif purpose == "reposition":
            taxi.leg_purpose = None
        else:
            taxi.leg_purpose = None

    def _execute_plan_stops(self, taxi: Taxi):
        freed_seat = False
        while taxi.plan and taxi.plan[0].node == taxi.node:
            stop = taxi.plan.pop(0)
            req = self.requests[stop.request_id]
            if stop.action is PlanAction.PICKUP:
                req.advance_status(RequestStatus.ABOARD)
                req.pickup_time = self.engine.now
                taxi.onboard.append(req.id)
                self._rec("pickup", rid=req.id, taxi=taxi.id)
                self._set_state(taxi, TaxiState.OCCUPIED)
            else:
                req.advance_status(RequestStatus.DELIVERED)
                req.dropoff_time = self.engine.now
                taxi.onboard.remove(req.id)
                self._rec("dropoff", rid=req.id, taxi=taxi.id)
                freed_seat = True
        if taxi.plan:
            if not taxi.onboard:
                self._set_state(taxi, TaxiState.EN_ROUTE_TO_PICKUP)
            self._replan_current_leg(taxi, taxi.plan[0].node, "plan")
            if freed_seat:
                # seat capacity opened: the FIFO may pool into this taxi now
                # that it is back underway
                self._drain_pending()
            return
        self._taxi_free(taxi)

    def _taxi_free(self, taxi: Taxi):
        """Manifest just emptied (or charge finished): decide what is next."""
        self._set_state(taxi, TaxiState.IDLE_AT_STOP)
        taxi.leg_purpose = None
        if taxi.retiring:
            self._retire(taxi)
            return
        if self.stations and needs_charge(taxi, self.battery):
            self._begin_charge_cycle(taxi)
            return
        self._drain_pending()
        if (taxi.state is TaxiState.IDLE_AT_STOP and not taxi.moving
                and not taxi.stranded and taxi.node not in self.net.stops):
            self._reposition(taxi)

    def _reposition(self, taxi: Taxi):
        stop = nearest_stop(self.net, self.traffic.occupancy, taxi.node)
        if stop == taxi.node:
            return
        segs = self._route_segments(taxi.node, stop, PathPolicy.LEAST_TIME)
        self._depart(taxi, segs, "reposition")

    def _drain_pending(self):
        pending = self.dispatcher.pending
        while pending:
            req = self.requests[pending[0]]
            decision = self.dispatcher.requeue_decision(req, self._world)
            if decision.kind == "queued":
                return
            pending.pop(0)
            self._execute_decision(req, decision)

    # --- charging ---

    def _active_stations(self):
        return [self.stations[i] for i in sorted(self.stations)]

    def _begin_charge_cycle(self, taxi: Taxi):
        stations = self._active_stations()
        if not stations:
            return
        start = (self.net.segment(taxi.seg_id).to_node if taxi.moving
                 else taxi.node)
        mean_s = mean_full_charge_seconds(self.battery, self.config.charge_rate_kw)
        chosen = select_station(
            start, stations, self.net, self.traffic.occupancy, mean_s,
            include_committed=self.config.commit_aware_station_choice)
        chosen.committed += 1
        taxi.station_id = chosen.config.id
        self._set_state(taxi, TaxiState.EN_ROUTE_TO_STATION)
        self._replan_current_leg(taxi, chosen.config.node_id, "station")

    def _station_arrival(self, taxi: Taxi):
        station = self.stations.get(taxi.station_id)
        if station is None:
            station = self._closed_station(taxi.station_id)
        station.committed = max(0, station.committed - 1)
        self._rec("station_arrival", taxi=taxi.id, station=station.config.id)
        if station.free_chargers > 0 and not station.queue:
            self._start_charging(taxi, station)
        else:
            station.queue.append(taxi.id)
            self._set_state(taxi, TaxiState.QUEUED_AT_STATION)

    def _start_charging(self, taxi: Taxi, station: StationState):
        self._set_state(taxi, TaxiState.CHARGING)
        self._rec("charge_start", taxi=taxi.id, station=station.config.id)
        taxi.charge_rate_kw = station.config.charge_rate_kw
        duration = full_charge_seconds(taxi.battery_kwh,
                                       self.battery.capacity_kwh,
                                       station.config.charge_rate_kw)
        done = self.engine.now + duration
        station.in_service[taxi.id] = done
        self.engine.schedule(done, EventKind.CHARGE_COMPLETE,
                             {"taxi": taxi.id, "station": station.config.id})

    def _on_charge_complete(self, ev: SimEvent):
        taxi = self.taxis.get(ev.payload["taxi"])
        if taxi is None:
            return
        station = self.stations.get(ev.payload["station"])
        if station is None:
            station = self._closed_station(ev.payload["station"])
        taxi.synced_at = self.engine.now
        taxi.battery_kwh = self.battery.capacity_kwh
        taxi.charge_rate_kw = 0.0
        taxi.station_id = None
        station.in_service.pop(taxi.id, None)
        self._rec("charge_end", taxi=taxi.id, station=station.config.id)
        while station.queue and station.free_chargers > 0:
            nxt = self.taxis.get(station.queue.pop(0))
            if nxt is None or nxt.stranded:
                continue
            self._advance(nxt)
            if not nxt.stranded:
                self._start_charging(nxt, station)
        self._taxi_free(taxi)

    def _closed_station(self, station_id: int) -> StationState:
        st = self._closed.get(station_id)
        if st is None:
            raise CommandError(f"station {station_id} vanished")
        return st

    def _rental_arrival(self, taxi: Taxi):
        rid = taxi.onboard.pop()
        req = self.requests[rid]
        req.advance_status(RequestStatus.DELIVERED)
        req.dropoff_time = self.engine.now
        site = taxi.node
        self.dispatcher.return_rental(site)
        self._set_state(taxi, TaxiState.PARKED_AT_RENTAL_SITE)
        taxi.charge_rate_kw = self.config.charge_rate_kw
        taxi.leg_purpose = None
        self._rec("rental_end", rid=rid, car=taxi.id, site=site)

    # --- jams ---

    def _on_jam_changed(self, ev: SimEvent):
        seg_id = ev.payload["seg"]
        self._emit("jam", {"seg": seg_id, "state": ev.payload["state"]})
        for tid in sorted(self.traffic._vehicles.get(seg_id, ())):
            rider = self.taxis.get(tid)
            if rider is None or rider.stranded:
                continue
            self._advance(rider)
            if rider.moving:
                self._schedule_arrival(rider)
        jammed = self.traffic.jammed_segments()
        if not jammed:
            return
        for tid in sorted(self.taxis):
            taxi = self.taxis[tid]
            if taxi.stranded or not taxi.route:
                continue
            fresh = reroute_for_jams(taxi, self.net, self.traffic.occupancy,
                                     jammed, self.policy.path_policy)
            if fresh is None:
                continue
            if taxi.moving and fresh[0] == taxi.seg_id:
                taxi.route = list(fresh)
                taxi.route_ix = 0

    # --- ticks ---

    def _on_dispatch_tick(self, ev: SimEvent):
        self.engine.schedule(self.engine.now + self.config.dispatch_tick_s,
                             EventKind.DISPATCH_TICK)
        for tid in sorted(self.taxis):
            taxi = self.taxis[tid]
            if taxi.stranded or taxi.moving:
                continue
            self._advance(taxi)
        for tid in sorted(self.taxis):
            taxi = self.taxis[tid]
            if (taxi.role is TaxiRole.TAXI and not taxi.retiring
                    and not taxi.stranded
                    and taxi.state is TaxiState.IDLE_AT_STOP
                    and not taxi.moving and self.stations
                    and needs_charge(taxi, self.battery)):
                self._begin_charge_cycle(taxi)
        if self.config.negotiation_enabled:
            self._negotiation_scan()

    def _negotiation_scan(self):
        threshold = self.policy.negotiation_wait_threshold
        for rid in sorted(self.requests):
            req = self.requests[rid]
            if req.status is not RequestStatus.WAITING:
                continue
            if any(p["rid"] == rid for p in self.prompts.values()):
                continue
            waited = self.engine.now - req.call_time
            candidates = self._idle_candidates(req.origin_stop)
            estimate = waited + min(candidates)[0] if candidates else math.inf
            if estimate <= threshold:
                continue
            pid = self._next_prompt_id
            self._next_prompt_id += 1
            self.prompts[pid] = {"rid": rid, "issued_at": self.engine.now,
                                 "resolved": False, "choice": None}
            self._rec("prompt", prompt=pid, rid=rid)
            self._emit("prompt", {
                "prompt": pid, "rid": rid,
                "choices": list(NEGOTIATION_CHOICES),
                "default": "KEEP_WAITING",
                "timeout_s": self.config.negotiation_timeout_s,
            })
            self.engine.schedule(
                self.engine.now + self.config.negotiation_timeout_s,
                EventKind.NEGOTIATION_TIMEOUT, {"prompt": pid})

    def _on_negotiation_timeout(self, ev: SimEvent):
        pid = ev.payload["prompt"]
        prompt = self.prompts.get(pid)
        if prompt is None or prompt["resolved"]:
            return
        cmd = {
            "index": self._next_cmd_ix, "t": self.engine.now,
            "kind": "NegotiationReply",
            "args": {"prompt": pid, "choice": "KEEP_WAITING"},
            "synthesized": True,
        }
        self._next_cmd_ix += 1
        self.command_log.append(cmd)
        self._apply_command(cmd)

    def _resolve_prompt_for(self, req: RideRequest, outcome: str):
        for pid in sorted(self.prompts):
            p = self.prompts[pid]
            if p["rid"] == req.id and not p["resolved"]:
                p["resolved"] = True
                p["choice"] = outcome
                self._rec("prompt_resolved", prompt=pid, choice=outcome)

    def _on_metrics_sample(self, ev: SimEvent):
        self.engine.schedule(self.engine.now + self.config.metrics_sample_s,
                             EventKind.METRICS_SAMPLE)
        self._rec("sample")
        if self.outbox is not None:
            self._emit("snapshot", {"snapshot": self.snapshot().to_dict()})

    # ------------------------------------------------------------------
    # Stranding / retirement
    # ------------------------------------------------------------------

    def _on_stranded(self, taxi: Taxi):
        taxi.motion_token += 1
        self._rec("stranded", taxi=taxi.id)
        if taxi.station_id is not None:
            st = self.stations.get(taxi.station_id)
            if st is not None and taxi.state is TaxiState.EN_ROUTE_TO_STATION:
                st.committed = max(0, st.committed - 1)

    def _retire(self, taxi: Taxi):
        taxi.motion_token += 1
        if taxi.moving:
            self._advance(taxi)
        if taxi.moving:
            sid = taxi.seg_id
            taxi.node = self.net.segment(sid).to_node
            taxi.seg_id = None
            taxi.seg_frac = 0.0
            self._seg_leave(sid, taxi)
        taxi.route = []
        taxi.route_ix = 0
        self._set_state(taxi, TaxiState.RETIRING)
        self.taxis.pop(taxi.id, None)
        self.retired[taxi.id] = taxi

    # ------------------------------------------------------------------
    # Commands
    # ------------------------------------------------------------------

    def submit_commands(self, commands) -> list:
        """Stamp, record, and schedule commands for application."""
        out = []
        for raw in commands:
            kind = raw.get("kind")
            if kind not in COMMAND_KINDS:
                raise CommandError(f"unknown command kind {kind!r}",
                                   index=raw.get("index"))
            args = raw.get("args", {})
            if not isinstance(args, dict):
                raise CommandError("command args must be an object",
                                   index=raw.get("index"))
            t = float(raw.get("t", self.engine.now))
            cmd = {"index": self._next_cmd_ix, "t": t, "kind": kind,
                   "args": args}
            if raw.get("synthesized"):
                cmd["synthesized"] = True
            self._next_cmd_ix += 1
            self.command_log.append(cmd)
            self.engine.schedule(t, EventKind.COMMAND_APPLIED, cmd)
            out.append(cmd)
        return out

    def _on_command(self, ev: SimEvent):
        self._apply_command(ev.payload)

    def _apply_command(self, cmd: dict):
        kind = cmd["kind"]
        args = cmd.get("args", {})
        try:
            getattr(self, "_cmd_" + _snake(kind))(args)
        except TargetError as exc:
            self._rec("command_rejected", index=cmd.get("index"),
                      kind=kind, reason=str(exc))
            self._emit("command_applied", {"index": cmd.get("index"),
                                           "command": kind, "ok": False,
                                           "reason": str(exc)})
            return
        self._rec("command", index=cmd.get("index"), kind=kind, args=args,
                  synthesized=bool(cmd.get("synthesized")))
        self._emit("command_applied", {"index": cmd.get("index"),
                                       "command": kind, "ok": True})

    # Pause / Resume / StepUntil pace the gateway loop, not the world.
    def _cmd_pause(self, args):
        pass

    def _cmd_resume(self, args):
        pass

    def _cmd_step_until(self, args):
        pass

    def _cmd_set_generation_rate(self, args):
        profile = self.demand.profile
        if "multiplier" in args:
            mult = float(args["multiplier"])
        elif "mean_interarrival" in args:
            mean = float(args["mean_interarrival"])
            if mean <= 0:
                raise CommandError("mean_interarrival must be positive")
            mult = profile.base_mean_interarrival / mean
        else:
            raise CommandError("SetGenerationRate needs multiplier or "
                               "mean_interarrival")
        if mult <= 0:
            raise CommandError("generation multiplier must be positive")
        kept = tuple(p for p in profile.rate_schedule if p[0] <= self.engine.now)
        if not kept:
            kept = ((0.0, profile.multiplier_at(self.engine.now)),)
        self.demand.profile = dataclasses.replace(
            profile, rate_schedule=kept + ((self.engine.now, mult),))

    def _cmd_set_fleet_size(self, args):
        target = int(args.get("size", -1))
        if target < 1:
            raise CommandError("SetFleetSize needs size >= 1")
        if self.policy.carsharing:
            raise CommandError("fleet resize with carsharing is not supported")
        current = [t for t in self.taxis.values()
                   if t.role is TaxiRole.TAXI and not t.retiring]
        if target > len(current):
            stops = town_center_stops(self.net)
            for _ in range(target - len(current)):
                node = stops[self._spawn_cursor % len(stops)]
                self._spawn_cursor += 1
                self._spawn_taxi(TaxiRole.TAXI, node,
                                 self.battery.capacity_kwh,
                                 TaxiState.IDLE_AT_STOP)
            self._drain_pending()
            return
        excess = len(current) - target
        if excess == 0:
            return
        idle = sorted(t.id for t in current
                      if t.state is TaxiState.IDLE_AT_STOP)
        victims = idle[:excess]
        for tid in victims:
            taxi = self.taxis[tid]
            self._advance(taxi)
            if not taxi.stranded:
                self._retire(taxi)
        remaining = excess - len(victims)
        if remaining > 0:
            busy = sorted(t.id for t in current
                          if t.id not in victims
                          and t.state is not TaxiState.IDLE_AT_STOP)
            for tid in busy[:remaining]:
                taxi = self.taxis[tid]
                taxi.retiring = True
                if taxi.state in (TaxiState.EN_ROUTE_TO_STATION,
                                  TaxiState.QUEUED_AT_STATION):
                    self._retire_from_charge_cycle(taxi)

    def _retire_from_charge_cycle(self, taxi: Taxi):
        station = self.stations.get(taxi.station_id)
        if station is None:
            station = self._closed.get(taxi.station_id)
        if station is not None:
            if taxi.state is TaxiState.EN_ROUTE_TO_STATION:
                station.committed = max(0, station.committed - 1)
            if taxi.id in station.queue:
                station.queue.remove(taxi.id)
        self._advance(taxi)
        if not taxi.stranded:
            self._retire(taxi)

    def _cmd_set_station_count(self, args):
        target = int(args.get("count", -1))
        if target < 0:
            raise CommandError("SetStationCount needs count >= 0")
        open_ids = sorted(self.stations)
        if target > len(open_ids):
            need = target - len(open_ids)
            reopen = sorted(self._closed)[:need]
            for sid in reopen:
                self.stations[sid] = self._closed.pop(sid)
                need -= 1
            used_nodes = {st.config.node_id
                          for st in list(self.stations.values())
                          + list(self._closed.values())}
            next_id = max(list(self.stations) + list(self._closed), default=0)
            for cand in self.net.station_candidates:
                if need <= 0:
                    break
                if cand in used_nodes:
                    continue
                next_id += 1
                cfg = ChargingStation(id=next_id, node_id=cand,
                                      charger_count=self.config.chargers_per_station,
                                      charge_rate_kw=self.config.charge_rate_kw)
                self.stations[next_id] = StationState(config=cfg)
                used_nodes.add(cand)
                need -= 1
            if need > 0:
                raise CommandError("not enough station candidates to grow to "
                                   f"{target}")
        elif target < len(open_ids):
            for sid in sorted(open_ids, reverse=True)[:len(open_ids) - target]:
                self._closed[sid] = self.stations.pop(sid)

    def _cmd_set_policy(self, args):
        allowed = {"path_policy", "carpool", "carpool_detour_factor",
                   "negotiation_wait_threshold"}
        unknown = set(args) - allowed
        if unknown:
            if "carsharing" in unknown:
                raise CommandError("carsharing cannot be toggled mid-run")
            raise CommandError(f"SetPolicy got unknown fields {sorted(unknown)}")
        if "path_policy" in args:
            name = str(args["path_policy"]).upper()
            if name not in PathPolicy.__members__:
                raise CommandError(f"unknown path policy {args['path_policy']!r}")
            self.policy.path_policy = PathPolicy[name]
        if "carpool" in args:
            self.policy.carpool = bool(args["carpool"])
        if "carpool_detour_factor" in args:
            v = float(args["carpool_detour_factor"])
            if v < 1:
                raise CommandError("carpool_detour_factor must be >= 1")
            self.policy.carpool_detour_factor = v
        if "negotiation_wait_threshold" in args:
            v = float(args["negotiation_wait_threshold"])
            if v <= 0:
                raise CommandError("negotiation_wait_threshold must be positive")
            self.policy.negotiation_wait_threshold = v

    def _cmd_force_assign(self, args):
        rid = args.get("request")
        tid = args.get("taxi")
        req = self.requests.get(rid)
        if req is None:
            raise TargetError(f"request {rid} does not exist")
        host = None
        if req.assigned_taxi is not None:
            host = self.taxis.get(req.assigned_taxi) \
                or self.retired.get(req.assigned_taxi)
        # a request stuck on a stranded car may be reopened and moved as
        # long as the passenger never boarded
        rescuable = (req.status is RequestStatus.ASSIGNED and host is not None
                     and host.stranded and rid not in host.onboard)
        if req.status is not RequestStatus.WAITING and not rescuable:
            raise TargetError(f"request {rid} is {req.status.value}, "
                              "not reassignable")
        taxi = self.taxis.get(tid)
        if taxi is None:
            raise TargetError(f"taxi {tid} does not exist")
        if (taxi.role is not TaxiRole.TAXI or taxi.retiring or taxi.stranded
                or taxi.state is not TaxiState.IDLE_AT_STOP):
            raise TargetError(f"taxi {tid} is not an assignable idle taxi")
        if rescuable:
            host.plan = [s for s in host.plan if s.request_id != rid]
            req.status = RequestStatus.WAITING
            req.assigned_taxi = None
        if rid in self.dispatcher.pending:
            self.dispatcher.pending.remove(rid)
        self._assign(req, taxi)

    def _cmd_reroute_taxi(self, args):
        tid = args.get("taxi")
        taxi = self.taxis.get(tid)
        if taxi is None:
            raise TargetError(f"taxi {tid} does not exist")
        if taxi.stranded:
            raise TargetError(f"taxi {tid} is stranded")
        node = args.get("node")
        if node is None:
            # refresh the current leg against present traffic
            if not taxi.route:
                return
            target = self.net.segment(taxi.route[-1]).to_node
            purpose = taxi.leg_purpose or "plan"
            try:
                self._replan_current_leg(taxi, target, purpose,
                                         excluded=self.traffic.jammed_segments())
            except NoPathError:
                pass
            return
        node = int(node)
        if node not in self.net.node_ids():
            raise TargetError(f"node {node} does not exist")
        if (taxi.role is not TaxiRole.TAXI or taxi.retiring
                or taxi.state is not TaxiState.IDLE_AT_STOP):
            raise TargetError(f"taxi {tid} cannot be redirected now")
        self._advance(taxi)
        if taxi.stranded:
            return
        self._replan_current_leg(taxi, node, "reposition")

    def _cmd_negotiation_reply(self, args):
        pid = args.get("prompt")
        prompt = self.prompts.get(pid)
        if prompt is None:
            raise TargetError(f"prompt {pid} does not exist")
        choice = args.get("choice")
        if choice not in NEGOTIATION_CHOICES:
            raise CommandError(f"unknown negotiation choice {choice!r}")
        if prompt["resolved"]:
            raise TargetError(f"prompt {pid} already resolved (stale reply)")
        prompt["resolved"] = True
        prompt["choice"] = choice
        self._rec("prompt_resolved", prompt=pid, choice=choice)
        req = self.requests[prompt["rid"]]
        if req.status is not RequestStatus.WAITING:
            return
        if choice == "CANCEL_REQUEST":
            req.advance_status(RequestStatus.CANCELLED)
            if req.id in self.dispatcher.pending:
                self.dispatcher.pending.remove(req.id)
            self._rec("cancel", rid=req.id)
        elif choice == "OFFER_CARPOOL":
            relaxed = 2.0 * self.policy.carpool_detour_factor
            ins = self.dispatcher._pool_match(req, self._world,
                                              relaxed_alpha=relaxed)
            if ins is not None:
                if req.id in self.dispatcher.pending:
                    self.dispatcher.pending.remove(req.id)
                self._relaxed_alpha[req.id] = relaxed
                self._apply_insertion(self.taxis[ins.taxi_id], req, ins)
        # KEEP_WAITING: nothing changes

    # ------------------------------------------------------------------
    # Public surface
    # ------------------------------------------------------------------

    def run_until(self, t_end: float, commands=None) -> None:
        if commands:
            self.submit_commands(commands)
        self.engine.run_until(t_end)

    def run(self) -> MetricsReport:
        self.run_until(self.config.horizon_s)
        return self.report()

    def report(self, strict: bool = True) -> MetricsReport:
        return ingest(self.log, horizon_s=self.engine.now, seed=self.seed,
                      config_hash=self.config.config_hash(), strict=strict)

    def snapshot(self) -> SimSnapshot:
        now = self.engine.now
        taxis = []
        for tid in sorted(self.taxis):
            taxis.append(self._peek_taxi(self.taxis[tid], now))
        stations = []
        for sid in sorted(self.stations):
            st = self.stations[sid]
            stations.append({
                "id": sid, "node": st.config.node_id,
                "chargers": st.config.charger_count,
                "queue": list(st.queue),
                "charging": sorted(st.in_service),
                "committed": st.committed,
            })
        roads = []
        for sid in sorted(self.traffic.occupancy):
            occ = self.traffic.occupancy[sid]
            if occ <= 0:
                continue
            roads.append({"seg": sid, "occupancy": occ,
                          "state": self.traffic.state_of(sid).value})
        requests = []
        for rid in sorted(self.requests):
            req = self.requests[rid]
            if req.status in (RequestStatus.DELIVERED, RequestStatus.CANCELLED):
                continue
            requests.append({
                "id": rid, "status": req.status.value,
                "origin": req.origin_stop, "dest": req.dest_stop,
                "called_at": req.call_time, "taxi": req.assigned_taxi,
            })
        metrics = self.report(strict=False).scalar_row()
        return SimSnapshot(time=now, taxis=tuple(taxis),
                           stations=tuple(stations), roads=tuple(roads),
                           requests=tuple(requests), metrics=metrics)

    def _peek_taxi(self, taxi: Taxi, now: float) -> dict:
        dt = max(0.0, now - taxi.synced_at)
        battery = taxi.battery_kwh
        node, seg, frac = taxi.node, taxi.seg_id, taxi.seg_frac
        if taxi.stranded:
            battery = 0.0
        elif taxi.moving:
            s = self.net.segment(seg)
            speed = effective_speed(s, self.traffic.count(seg))
            covered = speed * dt
            frac = min(1.0, frac + covered / s.length_m)
            battery = max(0.0, battery - self.battery.drive_consumption_kwh_per_km
                          * covered / 1000.0)
        elif taxi.charge_rate_kw > 0:
            battery = min(self.battery.capacity_kwh,
                          battery + taxi.charge_rate_kw * dt / 3600.0)
        else:
            battery = max(0.0, battery
                          - self.battery.idle_drain_kwh_per_hour * dt / 3600.0)
        return {
            "id": taxi.id, "role": taxi.role.value, "state": taxi.state.value,
            "node": node, "seg": seg, "frac": round(frac, 9),
            "battery_kwh": round(battery, 9),
            "onboard": list(taxi.onboard),
            "plan": [[p.node, p.action.value, p.request_id] for p in taxi.plan],
            "retiring": taxi.retiring, "stranded": taxi.stranded,
        }


def _snake(kind: str) -> str:
    out = []
    for ch in kind:
        if ch.isupper() and out:
            out.append("_")
        out.append(ch.lower())
    return "".join(out)
