"""Road graph construction, congestion arithmetic, and routing."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etaxisim.city import (
    EIGHT_TOWNS,
    PathPolicy,
    RoadSegment,
    RoadState,
    TrafficState,
    build_city,
    edge_travel_time,
    nearest_station_set,
    nearest_stop,
    plan_route,
    road_state,
    route_length,
    route_time,
    times_to,
)
from etaxisim.errors import ConstructionError, NoPathError, ProtocolError

from .oracles import brute_force_route, random_city, random_occupancy


def diamond_spec(jam_bd=0):
    # A=0, B=1, C=2, D=3. A->B->D is 2km+2km, A->C->D is 3km+3km, all 10 m/s.
    return {
        "nodes": [{"id": i, "x": 0.0, "y": 0.0} for i in range(4)],
        "segments": [
            {"id": 0, "from": 0, "to": 1, "length_m": 2000.0, "free_speed": 10.0,
             "jam_threshold": 5, "jam_factor": 4.0},
            {"id": 1, "from": 1, "to": 3, "length_m": 2000.0, "free_speed": 10.0,
             "jam_threshold": 5, "jam_factor": 4.0},
            {"id": 2, "from": 0, "to": 2, "length_m": 3000.0, "free_speed": 10.0,
             "jam_threshold": 5, "jam_factor": 4.0},
            {"id": 3, "from": 2, "to": 3, "length_m": 3000.0, "free_speed": 10.0,
             "jam_threshold": 5, "jam_factor": 4.0},
            # return edges so the graph is strongly connected
            {"id": 4, "from": 3, "to": 0, "length_m": 1000.0, "free_speed": 10.0,
             "jam_threshold": 5, "jam_factor": 4.0},
        ],
    }


class TestConstruction:
    def test_minimal_two_node_city(self):
        net = build_city({
            "nodes": [{"id": 0}, {"id": 1}],
            "segments": [
                {"id": 0, "from": 0, "to": 1, "length_m": 100.0},
                {"id": 1, "from": 1, "to": 0, "length_m": 100.0},
            ],
        })
        assert len(net.nodes) == 2
        assert len(net.towns) == 1
        assert net.towns[0].node_ids == (0, 1)

    def test_unreachable_node_rejected(self):
        with pytest.raises(ConstructionError):
            build_city({
                "nodes": [{"id": 0}, {"id": 1}, {"id": 2}],
                "segments": [
                    {"id": 0, "from": 0, "to": 1, "length_m": 100.0},
                    {"id": 1, "from": 1, "to": 0, "length_m": 100.0},
                ],
            })

    def test_one_way_only_rejected(self):
        with pytest.raises(ConstructionError):
            build_city({
                "nodes": [{"id": 0}, {"id": 1}],
                "segments": [{"id": 0, "from": 0, "to": 1, "length_m": 100.0}],
            })

    def test_rental_sites_must_be_pair(self):
        spec = diamond_spec()
        spec["rental_sites"] = [0]
        with pytest.raises(ConstructionError):
            build_city(spec)
        spec["rental_sites"] = [0, 3]
        assert build_city(spec).rental_sites == (0, 3)

    def test_eight_towns_preset(self):
        net = build_city({"preset": EIGHT_TOWNS, "station_count": 4})
        assert len(net.towns) == 9
        # origins uniform; destination pull concentrated on downtown
        assert [t.demand_weight for t in net.towns] == [1.0] * 9
        dests = sorted(t.dest_weight_value() for t in net.towns)
        assert dests[:8] == [1.0] * 8 and dests[8] == 8.0
        downtown = next(t for t in net.towns if t.dest_weight_value() == 8.0)
        assert 4 in downtown.node_ids
        assert len(net.nodes) == 21
        assert len(net.segments) == 48
        assert net.stops == frozenset(range(9))
        assert len(net.stations) == 4
        # stations occupy the spoke midpoints adjacent to downtown
        station_nodes = {s.node_id for s in net.stations}
        assert station_nodes == set(net.station_candidates[:4])
        assert len(net.station_candidates) == 12

    def test_eight_towns_is_deterministic(self):
        a = build_city({"preset": EIGHT_TOWNS, "station_count": 2})
        b = build_city({"preset": EIGHT_TOWNS, "station_count": 2})
        assert a == b

    def test_unknown_preset(self):
        with pytest.raises(ConstructionError):
            build_city({"preset": "nine-towns"})


class TestEdgeTravelTime:
    SEG = RoadSegment(0, 0, 1, 600.0, 10.0, 5, 3.0)

    def test_free_flow(self):
        assert edge_travel_time(self.SEG, 0) == 60.0

    def test_jammed(self):
        assert edge_travel_time(self.SEG, 5) == 180.0

    def test_boundary_below_threshold_stays_free(self):
        assert edge_travel_time(self.SEG, 4) == 60.0

    def test_state_is_function_of_occupancy(self):
        assert road_state(self.SEG, 4) is RoadState.FREE
        assert road_state(self.SEG, 5) is RoadState.JAMMED
        assert road_state(self.SEG, 11) is RoadState.JAMMED

    def test_negative_occupancy_rejected(self):
        with pytest.raises(ValueError):
            edge_travel_time(self.SEG, -1)


class TestTrafficState:
    def test_threshold_crossing_both_ways(self):
        net = build_city(diamond_spec())
        traffic = TrafficState(net)
        for taxi in range(4):
            state, changed = traffic.enter_segment(0, taxi)
            assert state is RoadState.FREE
        assert not changed
        state, changed = traffic.enter_segment(0, 4)
        assert state is RoadState.JAMMED and changed
        state, changed = traffic.leave_segment(0, 4)
        assert state is RoadState.FREE and changed
        state, changed = traffic.enter_segment(1, 99)
        assert state is RoadState.FREE and not changed

    def test_leave_without_enter_is_protocol_error(self):
        traffic = TrafficState(build_city(diamond_spec()))
        with pytest.raises(ProtocolError):
            traffic.leave_segment(0, 7)

    def test_double_enter_is_protocol_error(self):
        traffic = TrafficState(build_city(diamond_spec()))
        traffic.enter_segment(0, 7)
        with pytest.raises(ProtocolError):
            traffic.enter_segment(0, 7)

    def test_occupancy_conservation(self):
        traffic = TrafficState(build_city(diamond_spec()))
        traffic.enter_segment(0, 1)
        traffic.enter_segment(0, 2)
        traffic.enter_segment(3, 3)
        assert traffic.total_occupancy() == 3
        traffic.leave_segment(0, 1)
        assert traffic.total_occupancy() == 2

    def test_jam_version_bumps_only_on_flips(self):
        traffic = TrafficState(build_city(diamond_spec()))
        v0 = traffic.jam_version
        for taxi in range(4):
            traffic.enter_segment(2, taxi)
        assert traffic.jam_version == v0
        traffic.enter_segment(2, 4)
        assert traffic.jam_version == v0 + 1
        assert traffic.jammed_segments() == frozenset({2})


class TestPlanRoute:
    def test_single_segment(self):
        net = build_city({
            "nodes": [{"id": 0}, {"id": 1}],
            "segments": [
                {"id": 0, "from": 0, "to": 1, "length_m": 100.0},
                {"id": 1, "from": 1, "to": 0, "length_m": 100.0},
            ],
        })
        assert plan_route(net, {}, 0, 1, PathPolicy.SHORTEST_DISTANCE).segment_ids == (0,)

    def test_diamond_policies_disagree_under_jam(self):
        net = build_city(diamond_spec())
        occupancy = {1: 5}   # B->D jammed at factor 4
        sd = plan_route(net, occupancy, 0, 3, PathPolicy.SHORTEST_DISTANCE)
        lt = plan_route(net, occupancy, 0, 3, PathPolicy.LEAST_TIME)
        assert sd.segment_ids == (0, 1)        # A-B-D, 4 km
        assert lt.segment_ids == (2, 3)        # A-C-D, 600 s beats 200+800 s
        assert route_length(net, sd) == 4000.0
        assert route_time(net, occupancy, lt) == pytest.approx(600.0)
        assert route_time(net, occupancy, sd) == pytest.approx(1000.0)

    def test_exclusion_forces_detour(self):
        net = build_city(diamond_spec())
        for policy in PathPolicy:
            route = plan_route(net, {}, 0, 3, policy, excluded={0})
            assert route.segment_ids == (2, 3)

    def test_no_path_when_everything_excluded(self):
        net = build_city(diamond_spec())
        with pytest.raises(NoPathError):
            plan_route(net, {}, 0, 3, PathPolicy.LEAST_TIME, excluded={0, 2})

    def test_origin_equals_destination(self):
        net = build_city(diamond_spec())
        route = plan_route(net, {}, 2, 2, PathPolicy.LEAST_TIME)
        assert route.segment_ids == ()

    def test_tie_broken_by_segment_ids(self):
        # two parallel A->B segments of equal length; route must take id 0
        net = build_city({
            "nodes": [{"id": 0}, {"id": 1}],
            "segments": [
                {"id": 0, "from": 0, "to": 1, "length_m": 100.0},
                {"id": 1, "from": 0, "to": 1, "length_m": 100.0},
                {"id": 2, "from": 1, "to": 0, "length_m": 100.0},
            ],
        })
        for policy in PathPolicy:
            assert plan_route(net, {}, 0, 1, policy).segment_ids == (0,)

    def test_matches_brute_force_on_random_graphs(self):
        rng = random.Random(0xC17)
        for _ in range(60):
            net = random_city(rng)
            occupancy = random_occupancy(rng, net)
            nodes = net.node_ids()
            origin, destination = rng.sample(nodes, 2) if len(nodes) > 1 else (0, 0)
            excluded = frozenset(
                s.id for s in net.segments if rng.random() < 0.15
            )
            for policy in PathPolicy:
                expected = brute_force_route(net, occupancy, origin, destination,
                                             policy, excluded)
                if expected is None:
                    with pytest.raises(NoPathError):
                        plan_route(net, occupancy, origin, destination, policy, excluded)
                    continue
                route = plan_route(net, occupancy, origin, destination, policy, excluded)
                assert route.segment_ids == expected[1], (
                    f"policy={policy} o={origin} d={destination} excl={sorted(excluded)}"
                )

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_uniform_speeds_make_policies_agree(self, seed):
        rng = random.Random(seed)
        net = random_city(rng)
        # rebuild with one shared speed: time is then distance / constant
        spec = {
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in net.nodes],
            "segments": [
                {"id": s.id, "from": s.from_node, "to": s.to_node,
                 "length_m": s.length_m, "free_speed": 10.0,
                 "jam_threshold": 10**6, "jam_factor": 3.0}
                for s in net.segments
            ],
        }
        net = build_city(spec)
        nodes = net.node_ids()
        origin, destination = (rng.sample(nodes, 2) if len(nodes) > 1 else (0, 0))
        sd = plan_route(net, {}, origin, destination, PathPolicy.SHORTEST_DISTANCE)
        lt = plan_route(net, {}, origin, destination, PathPolicy.LEAST_TIME)
        assert sd.segment_ids == lt.segment_ids


class TestNearest:
    def line_city(self):
        # 0 -1km- 1 -1km- 2 -1km- 3, bidirectional, stops at 0 and 3
        segs = []
        sid = 0
        for a, b in [(0, 1), (1, 2), (2, 3)]:
            segs.append({"id": sid, "from": a, "to": b, "length_m": 1000.0}); sid += 1
            segs.append({"id": sid, "from": b, "to": a, "length_m": 1000.0}); sid += 1
        return {
            "nodes": [{"id": i} for i in range(4)],
            "segments": segs,
            "stops": [0, 3],
            "stations": [
                {"id": 1, "node": 0}, {"id": 2, "node": 2}, {"id": 3, "node": 3},
            ],
        }

    def test_stop_node_is_its_own_nearest(self):
        net = build_city(self.line_city())
        assert nearest_stop(net, {}, 3) == 3

    def test_equidistant_stops_tie_to_smaller_id(self):
        net = build_city(self.line_city())
        # node 1 is 1km from stop 0 and 2km from stop 3
        assert nearest_stop(net, {}, 1) == 0
        # midpoint: build a symmetric 5-node line to hit the tie
        spec = self.line_city()
        spec["nodes"].append({"id": 4})
        spec["segments"] += [
            {"id": 6, "from": 3, "to": 4, "length_m": 1000.0},
            {"id": 7, "from": 4, "to": 3, "length_m": 1000.0},
        ]
        spec["stops"] = [0, 4]
        net = build_city(spec)
        assert nearest_stop(net, {}, 2) == 0

    def test_station_ranking_matches_line_distances(self):
        net = build_city(self.line_city())
        ranked = nearest_station_set(net, {}, 1)
        assert [(s.id, eta) for s, eta in ranked] == [
            (1, pytest.approx(100.0)),
            (2, pytest.approx(100.0)),
            (3, pytest.approx(200.0)),
        ]

    def test_times_to_is_reverse_consistent(self):
        rng = random.Random(7)
        for _ in range(10):
            net = random_city(rng)
            occupancy = random_occupancy(rng, net)
            target = rng.choice(net.node_ids())
            table = times_to(net, occupancy, target, PathPolicy.LEAST_TIME)
            for origin in net.node_ids():
                route = plan_route(net, occupancy, origin, target, PathPolicy.LEAST_TIME)
                assert table[origin] == pytest.approx(route_time(net, occupancy, route))
