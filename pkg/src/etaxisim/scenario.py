"""Scenario and sweep configuration: JSON in, validated objects out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .city import PathPolicy
from .demand import DemandProfile
from .dispatch import PolicyConfig
from .errors import ConfigError
from .fleet import BatteryModel


@dataclass
class ScenarioConfig:
    """Complete description of one run. Defaults are the calibrated scenario
    (see calibrate_defaults): the fleet-sweep wait knee sits in [9, 13] and
    the station-sweep queue knee in [4, 6]."""

    name: str = "default"
    map: dict = field(default_factory=lambda: {
        "preset": "eight-towns",
        "downtown_dest_weight": 12.0,
        "jam_threshold": 3,
    })
    fleet_size: int = 11
    station_count: int = 8
    chargers_per_station: int = 2
    charge_rate_kw: float = 16.0
    # demand
    base_mean_interarrival: float = 115.0
    interarrival_stddev: float = 30.0
    rate_schedule: tuple = ((0.0, 1.0),)
    min_interarrival: float = 1.0
    scripted_arrivals: Optional[tuple] = None
    # battery
    battery_capacity_kwh: float = 10.0
    drive_consumption_kwh_per_km: float = 0.2
    idle_drain_kwh_per_hour: float = 2.0
    reserve_fraction: float = 0.2
    initial_battery: str = "staggered"        # "staggered" | "full"
    # policy
    path_policy: str = "shortest_distance"
    carpool: bool = False
    carsharing: bool = False
    rental_fraction: float = 0.2
    carpool_detour_factor: float = 1.5
    negotiation_wait_threshold: float = 600.0
    commit_aware_station_choice: bool = False
    # run shape
    horizon_s: float = 14400.0
    master_seed: int = 1
    dispatch_tick_s: float = 60.0
    metrics_sample_s: float = 60.0
    negotiation_enabled: bool = False
    negotiation_timeout_s: float = 30.0
    seats: int = 4

    def __post_init__(self):
        if self.fleet_size < 1:
            raise ConfigError("fleet_size must be >= 1")
        if self.station_count < 1:
            raise ConfigError("station_count must be >= 1")
        if self.horizon_s <= 0:
            raise ConfigError("horizon must be positive")
        if self.initial_battery not in ("staggered", "full"):
            raise ConfigError("initial_battery must be 'staggered' or 'full'")
        if self.path_policy not in ("shortest_distance", "least_time"):
            raise ConfigError("path_policy must be shortest_distance or least_time")
        self.rate_schedule = tuple(tuple(pair) for pair in self.rate_schedule)
        if self.scripted_arrivals is not None:
            self.scripted_arrivals = tuple(tuple(a) for a in self.scripted_arrivals)

    # --- derived objects ---

    def demand_profile(self) -> DemandProfile:
        return DemandProfile(
            base_mean_interarrival=self.base_mean_interarrival,
            interarrival_stddev=self.interarrival_stddev,
            rate_schedule=self.rate_schedule,
            min_interarrival=self.min_interarrival,
        )

    def battery_model(self) -> BatteryModel:
        return BatteryModel(
            capacity_kwh=self.battery_capacity_kwh,
            drive_consumption_kwh_per_km=self.drive_consumption_kwh_per_km,
            idle_drain_kwh_per_hour=self.idle_drain_kwh_per_hour,
            reserve_fraction=self.reserve_fraction,
        )

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(
            path_policy=PathPolicy[self.path_policy.upper()],
            carpool=self.carpool,
            carsharing=self.carsharing,
            rental_fraction=self.rental_fraction,
            carpool_detour_factor=self.carpool_detour_factor,
            negotiation_wait_threshold=self.negotiation_wait_threshold,
        )

    def map_spec(self) -> dict:
        spec = dict(self.map)
        if spec.get("preset"):
            spec.setdefault("station_count", self.station_count)
            spec.setdefault("chargers_per_station", self.chargers_per_station)
            spec.setdefault("charge_rate_kw", self.charge_rate_kw)
            if self.carsharing and "rental_sites" not in spec:
                spec["carsharing_default_sites"] = True
        return spec

    # --- serialization ---

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["rate_schedule"] = [list(p) for p in self.rate_schedule]
        if self.scripted_arrivals is not None:
            raw["scripted_arrivals"] = [list(a) for a in self.scripted_arrivals]
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        # keys starting with "_" are annotations (calibration provenance etc.)
        raw = {k: v for k, v in raw.items() if not k.startswith("_")}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def config_hash(self) -> str:
        """Cell identity: every field except the seed."""
        raw = self.to_dict()
        raw.pop("master_seed")
        blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replaced(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SweepSpec:
    """One swept axis, optionally run as several policy arms.

    Every (arm, value) cell runs once per seed, and all cells share the seed
    list, so arms are compared under common random numbers.
    """

    base: ScenarioConfig
    axis: str                      # "fleet_size" | "station_count" | config field
    values: tuple
    seeds: tuple                   # one replication per seed, shared across cells
    arms: tuple = (("base", {}),)  # (name, config overrides) pairs

    def __post_init__(self):
        if not self.values:
            raise ConfigError("sweep needs at least one axis value")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        self.values = tuple(self.values)
        self.seeds = tuple(int(s) for s in self.seeds)
        if isinstance(self.arms, dict):
            self.arms = tuple(self.arms.items())
        self.arms = tuple((str(n), dict(o)) for n, o in self.arms)
        names = [n for n, _ in self.arms]
        if len(names) != len(set(names)):
            raise ConfigError("arm names must be unique")
        for name, over in self.arms:
            if self.axis in over:
                raise ConfigError(f"arm {name!r} overrides the swept axis")

    def cells(self):
        for arm_name, over in self.arms:
            arm_base = self.base.replaced(**over) if over else self.base
            for value in self.values:
                yield arm_name, value, arm_base.replaced(**{self.axis: value})

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        base = ScenarioConfig.from_dict(raw.get("base", {}))
        axis = raw.get("axis", "fleet_size")
        if axis not in {f.name for f in dataclasses.fields(ScenarioConfig)}:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        values = raw.get("values")
        if values is None:
            lo, hi = raw.get("from"), raw.get("to")
            if lo is None or hi is None:
                raise ConfigError("sweep needs 'values' or 'from'/'to'")
            values = list(range(int(lo), int(hi) + 1))
        seeds = raw.get("seeds")
        if seeds is None:
            r = int(raw.get("replications", 10))
            first = int(raw.get("first_seed", 1))
            seeds = list(range(first, first + r))
        arms = raw.get("arms", {"base": {}})
        if isinstance(arms, dict):
            arms = tuple(arms.items())
        return cls(base=base, axis=axis, values=tuple(values),
                   seeds=tuple(seeds), arms=tuple(arms))

    @classmethod
    def load(cls, path) -> "SweepSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"sweep spec {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)
