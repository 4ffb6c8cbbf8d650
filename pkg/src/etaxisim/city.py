"""City model: congestible directed road graph, towns, stops, stations, routing.

The network itself is an immutable value. Dynamic traffic state (how many
vehicles currently occupy each segment) lives in an occupancy table owned by
the caller and is passed into every routing query, so all functions here stay
pure and deterministic.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

from .errors import ConstructionError, NoPathError


class RoadState(Enum):
    FREE = "free"
    JAMMED = "jammed"


class PathPolicy(Enum):
    SHORTEST_DISTANCE = "shortest_distance"
    LEAST_TIME = "least_time"


@dataclass(frozen=True)
class Intersection:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class RoadSegment:
    id: int
    from_node: int
    to_node: int
    length_m: float
    free_speed: float       # m/s
    jam_threshold: int      # vehicle count at which the road jams
    jam_factor: float       # speed divisor while jammed


@dataclass(frozen=True)
class Town:
    id: int
    node_ids: tuple[int, ...]
    demand_weight: float
    # weight for destination draws; None means same as demand_weight.
    # Splitting the two lets a scenario pull trips toward downtown while
    # origins stay spread over the map.
    dest_weight: Optional[float] = None

    def dest_weight_value(self) -> float:
        return self.demand_weight if self.dest_weight is None else self.dest_weight


@dataclass(frozen=True)
class ChargingStation:
    id: int
    node_id: int
    charger_count: int
    charge_rate_kw: float


@dataclass(frozen=True)
class Route:
    segment_ids: tuple[int, ...]
    origin: int
    destination: int


@dataclass(frozen=True)
class RoadNetwork:
    nodes: tuple[Intersection, ...]
    segments: tuple[RoadSegment, ...]
    stops: frozenset[int]
    stations: tuple[ChargingStation, ...]
    station_candidates: tuple[int, ...]   # node ids usable for live station growth
    rental_sites: tuple[int, ...]         # exactly 0 or 2 node ids
    towns: tuple[Town, ...]
    out_edges: dict[int, tuple[RoadSegment, ...]] = field(repr=False)
    in_edges: dict[int, tuple[RoadSegment, ...]] = field(repr=False)

    def node_ids(self):
        return [n.id for n in self.nodes]

    def segment(self, seg_id: int) -> RoadSegment:
        return self._seg_by_id[seg_id]

    @property
    def _seg_by_id(self):
        by_id = self.__dict__.get("_seg_cache")
        if by_id is None:
            by_id = {s.id: s for s in self.segments}
            self.__dict__["_seg_cache"] = by_id
        return by_id

    def town_of(self, node_id: int) -> Town:
        by_node = self.__dict__.get("_town_cache")
        if by_node is None:
            by_node = {}
            for town in self.towns:
                for nid in town.node_ids:
                    by_node[nid] = town
            self.__dict__["_town_cache"] = by_node
        return by_node[node_id]


def road_state(seg: RoadSegment, occupancy: int) -> RoadState:
    """Binary congestion state, a pure function of the occupancy count."""
    return RoadState.JAMMED if occupancy >= seg.jam_threshold else RoadState.FREE


def effective_speed(seg: RoadSegment, occupancy: int) -> float:
    if occupancy >= seg.jam_threshold:
        return seg.free_speed / seg.jam_factor
    return seg.free_speed


def edge_travel_time(seg: RoadSegment, occupancy: int) -> float:
    """Traversal time in seconds at the given occupancy."""
    if occupancy < 0:
        raise ValueError("occupancy must be >= 0")
    return seg.length_m / effective_speed(seg, occupancy)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

EIGHT_TOWNS = "eight-towns"

# Preset geometry: 3x3 town blocks, centre block is downtown. Roads between
# adjacent town centres are split by a midpoint node; the four links touching
# downtown ("spokes") are slower than the eight perimeter links, so the two
# path-planning policies genuinely disagree even on an uncongested network.
_PRESET_DEFAULTS = {
    "block_spacing_m": 2000.0,
    "spoke_speed": 8.0,
    "ring_speed": 14.0,
    "jam_threshold": 5,
    "jam_factor": 3.0,
    # origins spread evenly; destinations pull toward downtown, so idle
    # taxis pool there and the fleet-size wait curve bottoms out at the
    # downtown-to-perimeter travel time instead of decaying forever
    "downtown_weight": 1.0,
    "town_weight": 1.0,
    "downtown_dest_weight": 8.0,
    "town_dest_weight": 1.0,
}


def _build_adjacency(nodes, segments):
    out_edges = {n.id: [] for n in nodes}
    in_edges = {n.id: [] for n in nodes}
    for seg in segments:
        out_edges[seg.from_node].append(seg)
        in_edges[seg.to_node].append(seg)
    return (
        {k: tuple(sorted(v, key=lambda s: s.id)) for k, v in out_edges.items()},
        {k: tuple(sorted(v, key=lambda s: s.id)) for k, v in in_edges.items()},
    )


def _reachable(start, edges_of, next_node):
    seen = {start}
    frontier = [start]
    while frontier:
        node = frontier.pop()
        for seg in edges_of.get(node, ()):
            nxt = next_node(seg)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return seen


def _validate(net: RoadNetwork) -> RoadNetwork:
    ids = set(net.node_ids())
    if len(ids) != len(net.nodes):
        raise ConstructionError("duplicate node ids")
    for seg in net.segments:
        if seg.from_node not in ids or seg.to_node not in ids:
            raise ConstructionError(f"segment {seg.id} references unknown node")
        if seg.length_m <= 0 or seg.free_speed <= 0:
            raise ConstructionError(f"segment {seg.id} has nonpositive length/speed")
        if seg.jam_threshold < 1 or seg.jam_factor <= 1:
            raise ConstructionError(f"segment {seg.id} has invalid jam parameters")
    seg_ids = [s.id for s in net.segments]
    if len(set(seg_ids)) != len(seg_ids):
        raise ConstructionError("duplicate segment ids")
    if len(ids) > 1:
        start = min(ids)
        fwd = _reachable(start, net.out_edges, lambda s: s.to_node)
        bwd = _reachable(start, net.in_edges, lambda s: s.from_node)
        if fwd != ids or bwd != ids:
            raise ConstructionError("road graph is not strongly connected")
    for nid in net.stops:
        if nid not in ids:
            raise ConstructionError(f"stop {nid} is not a node")
    for st in net.stations:
        if st.node_id not in ids:
            raise ConstructionError(f"station {st.id} at unknown node {st.node_id}")
        if st.charger_count < 1 or st.charge_rate_kw <= 0:
            raise ConstructionError(f"station {st.id} has invalid charger config")
    if len(net.rental_sites) not in (0, 2):
        raise ConstructionError("rental_sites must have exactly 0 or 2 nodes")
    for nid in net.rental_sites:
        if nid not in ids:
            raise ConstructionError(f"rental site {nid} is not a node")
    covered = []
    for town in net.towns:
        covered.extend(town.node_ids)
        if town.demand_weight < 0:
            raise ConstructionError(f"town {town.id} has negative demand weight")
        if town.dest_weight_value() < 0:
            raise ConstructionError(f"town {town.id} has negative dest weight")
    if sorted(covered) != sorted(ids):
        raise ConstructionError("towns must partition the node set")
    if sum(t.demand_weight for t in net.towns) <= 0:
        raise ConstructionError("town demand weights must sum > 0")
    if sum(t.dest_weight_value() for t in net.towns) <= 0:
        raise ConstructionError("town dest weights must sum > 0")
    return net


def build_city(map_spec: dict) -> RoadNetwork:
    """Build a validated road network from a preset name or explicit spec.

    ``map_spec`` is the ``map`` section of a scenario config: either
    ``{"preset": "eight-towns", ...overrides}`` or an explicit dict with
    ``nodes``, ``segments`` and optional ``stops``/``stations``/
    ``rental_sites``/``towns``.
    """
    if map_spec.get("preset") == EIGHT_TOWNS:
        return _build_eight_towns(map_spec)
    if "preset" in map_spec:
        raise ConstructionError(f"unknown preset {map_spec['preset']!r}")
    return _build_explicit(map_spec)


def _build_eight_towns(spec: dict) -> RoadNetwork:
    p = dict(_PRESET_DEFAULTS)
    p.update({k: spec[k] for k in _PRESET_DEFAULTS if k in spec})
    spacing = float(p["block_spacing_m"])
    half = spacing / 2.0

    # Town centres, row-major on a 3x3 grid; node id = 3*row + col.
    nodes = []
    for row in range(3):
        for col in range(3):
            nodes.append(Intersection(3 * row + col, col * spacing, row * spacing))
    downtown_node = 4

    links = []  # (a, b) with a < b, adjacent centres
    for row in range(3):
        for col in range(3):
            nid = 3 * row + col
            if col < 2:
                links.append((nid, nid + 1))
            if row < 2:
                links.append((nid, nid + 3))
    links.sort()

    midpoint_of = {}
    next_node = 9
    for a, b in links:
        ax, ay = nodes[a].x, nodes[a].y
        bx, by = nodes[b].x, nodes[b].y
        nodes.append(Intersection(next_node, (ax + bx) / 2.0, (ay + by) / 2.0))
        midpoint_of[(a, b)] = next_node
        next_node += 1

    segments = []
    seg_id = 0
    for a, b in links:
        mid = midpoint_of[(a, b)]
        speed = p["spoke_speed"] if downtown_node in (a, b) else p["ring_speed"]
        for u, v in ((a, mid), (mid, b), (b, mid), (mid, a)):
            segments.append(
                RoadSegment(seg_id, u, v, half, float(speed),
                            int(p["jam_threshold"]), float(p["jam_factor"]))
            )
            seg_id += 1

    towns = []
    town_nodes = {t: [t - 1] for t in range(1, 10)}  # town t owns centre t-1
    for (a, b), mid in midpoint_of.items():
        town_nodes[min(a, b) + 1].append(mid)
    for t in range(1, 10):
        downtown = t - 1 == downtown_node
        weight = p["downtown_weight"] if downtown else p["town_weight"]
        dest = p["downtown_dest_weight"] if downtown else p["town_dest_weight"]
        towns.append(Town(t, tuple(sorted(town_nodes[t])), float(weight),
                          float(dest)))

    stops = frozenset(range(9))

    # Station candidates: the four spoke midpoints closest to downtown first,
    # then the perimeter midpoints, all in node-id order.
    spoke_mids = sorted(m for (a, b), m in midpoint_of.items() if downtown_node in (a, b))
    ring_mids = sorted(m for (a, b), m in midpoint_of.items() if downtown_node not in (a, b))
    candidates = tuple(spoke_mids + ring_mids)

    station_nodes = spec.get("station_nodes")
    if station_nodes is None:
        count = int(spec.get("station_count", 0))
        station_nodes = list(candidates[:count])
    chargers = int(spec.get("chargers_per_station", 1))
    rate = float(spec.get("charge_rate_kw", 50.0))
    stations = tuple(
        ChargingStation(i + 1, nid, chargers, rate) for i, nid in enumerate(station_nodes)
    )

    rental_sites = tuple(spec.get("rental_sites", ()))
    if spec.get("carsharing_default_sites"):
        rental_sites = (0, 8)

    out_edges, in_edges = _build_adjacency(nodes, segments)
    return _validate(RoadNetwork(
        nodes=tuple(nodes), segments=tuple(segments), stops=stops,
        stations=stations, station_candidates=candidates,
        rental_sites=rental_sites, towns=tuple(towns),
        out_edges=out_edges, in_edges=in_edges,
    ))


def _build_explicit(spec: dict) -> RoadNetwork:
    try:
        nodes = tuple(Intersection(int(n["id"]), float(n.get("x", 0.0)), float(n.get("y", 0.0)))
                      for n in spec["nodes"])
        segments = tuple(
            RoadSegment(
                int(s["id"]), int(s["from"]), int(s["to"]), float(s["length_m"]),
                float(s.get("free_speed", 10.0)),
                int(s.get("jam_threshold", 5)), float(s.get("jam_factor", 3.0)),
            )
            for s in spec["segments"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConstructionError(f"malformed explicit map spec: {exc}") from exc

    node_ids = [n.id for n in nodes]
    stops = frozenset(spec.get("stops", node_ids))
    stations = tuple(
        ChargingStation(int(s["id"]), int(s["node"]), int(s.get("chargers", 1)),
                        float(s.get("charge_rate_kw", 50.0)))
        for s in spec.get("stations", ())
    )
    candidates = tuple(spec.get("station_candidates", [s.node_id for s in stations]))
    rental_sites = tuple(spec.get("rental_sites", ()))
    if "towns" in spec:
        towns = tuple(
            Town(int(t["id"]), tuple(t["nodes"]), float(t.get("weight", 1.0)),
                 None if t.get("dest_weight") is None else float(t["dest_weight"]))
            for t in spec["towns"])
    else:
        towns = (Town(1, tuple(sorted(node_ids)), 1.0),)
    out_edges, in_edges = _build_adjacency(nodes, segments)
    return _validate(RoadNetwork(
        nodes=nodes, segments=segments, stops=stops, stations=stations,
        station_candidates=candidates, rental_sites=rental_sites, towns=towns,
        out_edges=out_edges, in_edges=in_edges,
    ))


# ---------------------------------------------------------------------------
# Traffic state
# ---------------------------------------------------------------------------

class TrafficState:
    """Per-segment occupancy counts, the only mutable piece of the city.

    Owned by the engine and touched only from the simulation thread. The
    ``occupancy`` dict doubles as the table every routing query reads, and
    ``jam_version`` bumps on every FREE<->JAMMED flip so route caches can
    invalidate cheaply.
    """

    def __init__(self, net: RoadNetwork):
        self.net = net
        self.occupancy: dict[int, int] = {}
        self._vehicles: dict[int, set] = {}
        self.jam_version = 0

    def count(self, seg_id: int) -> int:
        return self.occupancy.get(seg_id, 0)

    def state_of(self, seg_id: int) -> RoadState:
        return road_state(self.net.segment(seg_id), self.count(seg_id))

    def enter_segment(self, seg_id: int, taxi_id: int) -> tuple[RoadState, bool]:
        """Returns (post-update state, whether the jam state flipped)."""
        from .errors import ProtocolError
        aboard = self._vehicles.setdefault(seg_id, set())
        if taxi_id in aboard:
            raise ProtocolError(f"taxi {taxi_id} already on segment {seg_id}")
        before = self.state_of(seg_id)
        aboard.add(taxi_id)
        self.occupancy[seg_id] = self.count(seg_id) + 1
        after = self.state_of(seg_id)
        changed = after is not before
        if changed:
            self.jam_version += 1
        return after, changed

    def leave_segment(self, seg_id: int, taxi_id: int) -> tuple[RoadState, bool]:
        from .errors import ProtocolError
        aboard = self._vehicles.get(seg_id)
        if not aboard or taxi_id not in aboard:
            raise ProtocolError(f"taxi {taxi_id} left segment {seg_id} without entering")
        before = self.state_of(seg_id)
        aboard.remove(taxi_id)
        self.occupancy[seg_id] -= 1
        after = self.state_of(seg_id)
        changed = after is not before
        if changed:
            self.jam_version += 1
        return after, changed

    def jammed_segments(self) -> frozenset[int]:
        return frozenset(
            sid for sid, occ in self.occupancy.items()
            if occ >= self.net.segment(sid).jam_threshold
        )

    def total_occupancy(self) -> int:
        return sum(self.occupancy.values())


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------

def _edge_cost(seg: RoadSegment, occupancy: int, policy: PathPolicy) -> float:
    if policy is PathPolicy.SHORTEST_DISTANCE:
        return seg.length_m
    return edge_travel_time(seg, occupancy)


def shortest_tree(net: RoadNetwork, occupancy, source: int, policy: PathPolicy,
                  excluded=frozenset(), reverse: bool = False):
    """Dijkstra from ``source`` over all nodes.

    Returns ``{node: (cost, time, segment_id_path)}`` where the path is the
    lexicographically smallest segment-id sequence among minimum-cost paths
    (forward order even when ``reverse`` searches the transposed graph).
    Ties are resolved by comparing the path tuples directly, which is exact
    because edge costs are strictly positive.
    """
    edges = net.in_edges if reverse else net.out_edges
    best: dict[int, tuple[float, tuple[int, ...]]] = {}
    times: dict[int, float] = {}
    heap = [(0.0, (), source, 0.0)]
    while heap:
        cost, path, node, time = heapq.heappop(heap)
        cur = best.get(node)
        if cur is not None and (cur[0], cur[1]) <= (cost, path):
            continue
        best[node] = (cost, path)
        times[node] = time
        for seg in edges[node]:
            if seg.id in excluded:
                continue
            occ = occupancy.get(seg.id, 0) if occupancy else 0
            step = _edge_cost(seg, occ, policy)
            step_t = edge_travel_time(seg, occ)
            if reverse:
                nxt = seg.from_node
                npath = (seg.id,) + path
            else:
                nxt = seg.to_node
                npath = path + (seg.id,)
            ncost = cost + step
            old = best.get(nxt)
            if old is None or (ncost, npath) < old:
                heapq.heappush(heap, (ncost, npath, nxt, time + step_t))
    return {node: (cost, times[node], path) for node, (cost, path) in best.items()}


def plan_route(net: RoadNetwork, occupancy, origin: int, destination: int,
               policy: PathPolicy, excluded=frozenset()) -> Route:
    """Minimum-cost route under the policy, never using excluded segments.

    SHORTEST_DISTANCE minimises summed length; LEAST_TIME minimises summed
    traversal time at the occupancies frozen at call time. Equal-cost ties go
    to the smallest lexicographic segment-id sequence.
    """
    if origin == destination:
        return Route((), origin, destination)
    tree = shortest_tree(net, occupancy, origin, policy, frozenset(excluded))
    if destination not in tree:
        raise NoPathError(f"no route {origin}->{destination} avoiding {sorted(excluded)}")
    _, _, path = tree[destination]
    return Route(path, origin, destination)


def route_time(net: RoadNetwork, occupancy, route: Route) -> float:
    total = 0.0
    for seg_id in route.segment_ids:
        seg = net.segment(seg_id)
        total += edge_travel_time(seg, occupancy.get(seg_id, 0) if occupancy else 0)
    return total


def route_length(net: RoadNetwork, route: Route) -> float:
    return sum(net.segment(s).length_m for s in route.segment_ids)


def times_to(net: RoadNetwork, occupancy, target: int, policy: PathPolicy):
    """Travel time from every node to ``target`` along its policy-best path."""
    tree = shortest_tree(net, occupancy, target, policy, reverse=True)
    return {node: time for node, (_, time, _) in tree.items()}


def nearest_stop(net: RoadNetwork, occupancy, node: int) -> int:
    """Closest stop by LEAST_TIME at current occupancies; ties by node id."""
    tree = shortest_tree(net, occupancy, node, PathPolicy.LEAST_TIME)
    best = None
    for stop in sorted(net.stops):
        entry = tree.get(stop)
        if entry is None:
            continue
        key = (entry[1], stop)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoPathError(f"no stop reachable from {node}")
    return best[1]


def nearest_station_set(net: RoadNetwork, occupancy, node: int, stations=None):
    """Stations ordered by LEAST_TIME ETA from ``node``; ties by station id."""
    if stations is None:
        stations = net.stations
    tree = shortest_tree(net, occupancy, node, PathPolicy.LEAST_TIME)
    ranked = []
    for st in stations:
        entry = tree.get(st.node_id)
        if entry is not None:
            ranked.append((entry[1], st.id, st))
    ranked.sort(key=lambda item: (item[0], item[1]))
    return [(st, eta) for eta, _, st in ranked]


def town_center_stops(net: RoadNetwork) -> list[int]:
    """Stops ordered by town id (used for round-robin taxi placement)."""
    ordered = []
    for town in sorted(net.towns, key=lambda t: t.id):
        town_stops = sorted(n for n in town.node_ids if n in net.stops)
        ordered.extend(town_stops)
    return ordered


def euclidean(net: RoadNetwork, a: int, b: int) -> float:
    na = next(n for n in net.nodes if n.id == a)
    nb = next(n for n in net.nodes if n.id == b)
    return math.hypot(na.x - nb.x, na.y - nb.y)
