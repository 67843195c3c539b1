"""Simulated device fleet speaking the HTTP/JSON device wire protocol.

Stands in for real hardware: one plant monitor, smart plugs that power the
(non-smart) grow lamp and water pump, and a plant recognizer that answers
name lookups from a bundled species table. The physics are deliberately
linear with clamps: just enough dynamics for a closed control loop.

Units are fixtures chosen for the demo, not measured data: light in lux
(accumulated as lux-hours per day, reset at each day boundary), moisture in
percent, fertility in microsiemens/cm, temperature in Celsius.

Wire protocol (also served over HTTP by build_sim_app):

    GET  /devices                        -> {"devices": [{dev_id, device_type, online}]}
    GET  /devices/{id}/state             -> {"dev_id", "device_type", "attrs": {...}}
    PUT  /devices/{id}/state             body {"attrs": {...}}; 404/422/503 on error
    POST /sim/step                       body {"dt_hours": f}  (test-only)
    POST /devices/{id}/recognize         body {"plant_name": "..."} -> species profile
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

DEVICE_TYPES = ("PlantMonitor", "SmartPlug", "Recognizer")

# Attribute schema per device type: name -> (python type, writable over the wire).
MONITOR_RANGE_ATTRS = (
    "light_min", "light_max",
    "temperature_min", "temperature_max",
    "moisture_min", "moisture_max",
    "fertility_min", "fertility_max",
)
DEVICE_ATTRS: dict[str, dict[str, tuple[type, bool]]] = {
    "PlantMonitor": {
        "accumulated_light": (float, False),
        "temperature": (float, False),
        "soil_moisture": (float, False),
        "soil_fertility": (float, False),
        **{name: (float, False) for name in MONITOR_RANGE_ATTRS},
    },
    "SmartPlug": {"power": (bool, True)},
    "Recognizer": {"plant_name": (str, True), "species": (str, False)},
}


class SimError(Exception):
    status = 500


class UnknownDevice(SimError):
    status = 404


class ReadOnlyDeviceAttr(SimError):
    status = 422


class BadDeviceValue(SimError):
    status = 422


class DeviceOffline(SimError):
    status = 503


@dataclass
class SimConfig:
    """Physics constants; all defaults are demo fixtures."""

    ambient_light_rate: float = 50.0      # lux while daylight lasts
    lamp_light_rate: float = 400.0        # lux added by the grow lamp
    daylight_fraction: float = 0.5        # leading fraction of the day with ambient light
    moisture_decay_rate: float = 0.8      # %/h lost to evaporation
    pump_fill_rate: float = 6.0           # %/h added while the pump runs
    temperature_mean: float = 22.0
    temperature_amplitude: float = 2.0
    fertility_decay_rate: float = 0.05    # uS/cm per hour
    day_length_hours: float = 24.0
    sim_hours_per_tick: float = 0.25      # sim-time <-> host-tick mapping

    def validate(self) -> None:
        rates = (
            self.ambient_light_rate, self.lamp_light_rate, self.moisture_decay_rate,
            self.pump_fill_rate, self.fertility_decay_rate, self.temperature_amplitude,
        )
        if any(r < 0 for r in rates):
            raise ValueError("simulation rates must be >= 0")
        if self.day_length_hours <= 0:
            raise ValueError("day_length_hours must be > 0")
        if not 0.0 <= self.daylight_fraction <= 1.0:
            raise ValueError("daylight_fraction must be within [0, 1]")
        if self.sim_hours_per_tick <= 0:
            raise ValueError("sim_hours_per_tick must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class SpeciesProfile:
    species: str
    light_min: float
    light_max: float
    temperature_min: float
    temperature_max: float
    moisture_min: float
    moisture_max: float
    fertility_min: float
    fertility_max: float

    def __post_init__(self):
        for metric in ("light", "temperature", "moisture", "fertility"):
            lo = getattr(self, f"{metric}_min")
            hi = getattr(self, f"{metric}_max")
            if not lo < hi:
                raise ValueError(f"{self.species}: {metric} range needs min < max")

    def ranges(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in MONITOR_RANGE_ATTRS}

    def to_json(self) -> dict:
        return {"species": self.species, **self.ranges()}


def load_species_table(path: str | None = None) -> dict[str, SpeciesProfile]:
    """Bundled name -> profile lookup; must contain the 'default' entry."""
    if path is None:
        raw = resources.files("modelhome.fixtures").joinpath("species.json").read_text()
    else:
        with open(path) as fh:
            raw = fh.read()
    data = json.loads(raw)
    table = {
        name: SpeciesProfile(species=entry.get("species", name), **{
            k: float(v) for k, v in entry.items() if k != "species"
        })
        for name, entry in data.items()
    }
    if "default" not in table:
        raise ValueError("species table needs a 'default' profile")
    return table


@dataclass
class SimDevice:
    dev_id: str
    device_type: str
    attrs: dict[str, Any] = field(default_factory=dict)
    online: bool = True
    powers: str | None = None  # 'lamp' | 'pump' | None (plugs only)

    def listing(self) -> dict:
        return {"dev_id": self.dev_id, "device_type": self.device_type, "online": self.online}

    def state_json(self) -> dict:
        return {"dev_id": self.dev_id, "device_type": self.device_type, "attrs": dict(self.attrs)}


class DeviceFleet:
    """Owns device truth. Deterministic: equal configs plus equal call
    sequences give bit-identical fleets."""

    def __init__(self, devices: list[SimDevice], config: SimConfig,
                 species_table: dict[str, SpeciesProfile] | None = None):
        config.validate()
        self.config = config
        self.species_table = species_table or load_species_table()
        self.devices: dict[str, SimDevice] = {}
        self.time_hours = 0.0
        for dev in devices:
            if dev.device_type not in DEVICE_TYPES:
                raise ValueError(f"unknown device type {dev.device_type!r}")
            if dev.dev_id in self.devices:
                raise ValueError(f"duplicate dev_id {dev.dev_id!r}")
            schema = DEVICE_ATTRS[dev.device_type]
            extra = set(dev.attrs) - set(schema)
            if extra:
                raise ValueError(f"{dev.dev_id}: unknown attribute(s) {sorted(extra)}")
            attrs = {}
            for name, (py_type, _) in schema.items():
                value = dev.attrs.get(name)
                if value is None:
                    value = py_type()
                attrs[name] = py_type(value) if py_type is float else value
                if type(attrs[name]) is not py_type:
                    raise ValueError(f"{dev.dev_id}.{name} expects {py_type.__name__}")
            dev.attrs = attrs
            self.devices[dev.dev_id] = dev
        for mon in self._of_type("PlantMonitor"):
            if mon.attrs["temperature"] == 0.0:
                mon.attrs["temperature"] = self._temperature(0.0)
        # A preloaded recognizer name seeds the monitor's suitable ranges.
        for rec in self._of_type("Recognizer"):
            if rec.attrs["plant_name"]:
                self._apply_recognition(rec, rec.attrs["plant_name"])

    # -- helpers ----------------------------------------------------------

    def _of_type(self, device_type: str) -> list[SimDevice]:
        return [d for d in self.devices.values() if d.device_type == device_type]

    def device(self, dev_id: str) -> SimDevice:
        try:
            return self.devices[dev_id]
        except KeyError:
            raise UnknownDevice(f"unknown device {dev_id!r}") from None

    def _effect_on(self, effect: str) -> bool:
        return any(
            d.powers == effect and d.attrs.get("power") for d in self._of_type("SmartPlug")
        )

    def _temperature(self, t: float) -> float:
        day = self.config.day_length_hours
        return self.config.temperature_mean + self.config.temperature_amplitude * math.sin(
            2.0 * math.pi * (t % day) / day
        )

    def _ambient_integral(self, day_pos: float, dt: float) -> float:
        """Integral of ambient light over [day_pos, day_pos+dt) within one day."""
        daylight_end = self.config.daylight_fraction * self.config.day_length_hours
        lit = max(0.0, min(day_pos + dt, daylight_end) - min(day_pos, daylight_end))
        return self.config.ambient_light_rate * lit

    # -- operations -------------------------------------------------------

    def step(self, dt_hours: float) -> None:
        if dt_hours <= 0:
            raise ValueError("dt_hours must be > 0")
        cfg = self.config
        day = cfg.day_length_hours
        remaining = dt_hours
        while remaining > 1e-12:
            day_pos = self.time_hours % day
            to_boundary = day - day_pos
            seg = min(remaining, to_boundary)
            lamp_on = self._effect_on("lamp")
            pump_on = self._effect_on("pump")
            light_gain = self._ambient_integral(day_pos, seg)
            if lamp_on:
                light_gain += cfg.lamp_light_rate * seg
            moisture_delta = (cfg.pump_fill_rate if pump_on else 0.0) * seg
            moisture_delta -= cfg.moisture_decay_rate * seg
            crossed = remaining >= to_boundary - 1e-12
            self.time_hours += seg
            remaining -= seg
            for mon in self._of_type("PlantMonitor"):
                a = mon.attrs
                a["accumulated_light"] += light_gain
                if crossed:
                    a["accumulated_light"] = 0.0
                a["soil_moisture"] = min(100.0, max(0.0, a["soil_moisture"] + moisture_delta))
                a["soil_fertility"] = max(0.0, a["soil_fertility"] - cfg.fertility_decay_rate * seg)
                a["temperature"] = self._temperature(self.time_hours)
            if crossed:
                # Land exactly on the boundary so day arithmetic stays exact.
                self.time_hours = round(self.time_hours / day) * day

    def get_state(self, dev_id: str) -> dict:
        dev = self.device(dev_id)
        if not dev.online:
            raise DeviceOffline(f"device {dev_id!r} is offline")
        return dev.state_json()

    def set_state(self, dev_id: str, patch: dict[str, Any]) -> dict:
        dev = self.device(dev_id)
        if not dev.online:
            raise DeviceOffline(f"device {dev_id!r} is offline")
        schema = DEVICE_ATTRS[dev.device_type]
        checked: dict[str, Any] = {}
        for name, value in patch.items():
            if name not in schema:
                raise ReadOnlyDeviceAttr(f"{dev.device_type} has no attribute {name!r}")
            py_type, writable = schema[name]
            if not writable:
                raise ReadOnlyDeviceAttr(f"attribute {name!r} is read-only")
            if py_type is float and type(value) is int:
                value = float(value)
            if type(value) is not py_type:
                raise BadDeviceValue(f"attribute {name!r} expects {py_type.__name__}")
            checked[name] = value
        dev.attrs.update(checked)
        if dev.device_type == "Recognizer" and "plant_name" in checked:
            self._apply_recognition(dev, checked["plant_name"])
        return dev.state_json()

    def recognize(self, dev_id: str, plant_name: str) -> SpeciesProfile:
        dev = self.device(dev_id)
        if dev.device_type != "Recognizer":
            raise BadDeviceValue(f"device {dev_id!r} is not a Recognizer")
        if not dev.online:
            raise DeviceOffline(f"device {dev_id!r} is offline")
        dev.attrs["plant_name"] = plant_name
        return self._apply_recognition(dev, plant_name)

    def _apply_recognition(self, rec: SimDevice, plant_name: str) -> SpeciesProfile:
        key = plant_name.strip().lower()
        profile = self.species_table.get(key) if key else None
        if profile is None:
            profile = self.species_table["default"]
        rec.attrs["species"] = profile.species
        for mon in self._of_type("PlantMonitor"):
            mon.attrs.update(profile.ranges())
        return profile

    # -- test and fault hooks --------------------------------------------

    def set_online(self, dev_id: str, online: bool) -> None:
        self.device(dev_id).online = online

    def rewire(self, dev_id: str, powers: str | None) -> None:
        """Re-plug the appliance behind a smart plug (models swapping sockets)."""
        dev = self.device(dev_id)
        if dev.device_type != "SmartPlug":
            raise BadDeviceValue(f"device {dev_id!r} is not a SmartPlug")
        dev.powers = powers


# Roster documents also carry connector-side keys; accepted here, used there.
ROSTER_DEVICE_KEYS = {
    "dev_id", "device_type", "initial", "powers",
    "base_url", "poll_interval_ticks", "offline_after",
}


def load_roster(data: dict) -> tuple[SimConfig, list[SimDevice]]:
    """Split a roster document into sim config plus device truth entries."""
    config = SimConfig.from_dict(data.get("sim", {}))
    devices = []
    for entry in data.get("devices", []):
        unknown = set(entry) - ROSTER_DEVICE_KEYS
        if unknown:
            raise ValueError(f"roster device has unknown key(s) {sorted(unknown)}")
        if "dev_id" not in entry or "device_type" not in entry:
            raise ValueError("every roster device needs dev_id and device_type")
        devices.append(
            SimDevice(
                dev_id=entry["dev_id"],
                device_type=entry["device_type"],
                attrs=dict(entry.get("initial", {})),
                powers=entry.get("powers"),
            )
        )
    return config, devices


# -- wire protocol --------------------------------------------------------


def handle_wire(fleet: DeviceFleet, method: str, path: str, body: dict | None = None
                ) -> tuple[int, dict]:
    """Route one wire request. The single source of truth for the protocol:
    both the in-process client and the HTTP app go through here."""
    try:
        parts = [p for p in path.split("/") if p]
        if method == "GET" and parts == ["devices"]:
            listing = [d.listing() for d in sorted(fleet.devices.values(), key=lambda d: d.dev_id)]
            return 200, {"devices": listing}
        if len(parts) == 3 and parts[0] == "devices" and parts[2] == "state":
            if method == "GET":
                return 200, fleet.get_state(parts[1])
            if method == "PUT":
                attrs = (body or {}).get("attrs")
                if not isinstance(attrs, dict):
                    return 422, {"error": "body must be {\"attrs\": {...}}"}
                return 200, fleet.set_state(parts[1], attrs)
        if method == "POST" and parts == ["sim", "step"]:
            dt = (body or {}).get("dt_hours")
            if not isinstance(dt, (int, float)) or dt <= 0:
                return 422, {"error": "dt_hours must be a positive number"}
            fleet.step(float(dt))
            return 200, {"time_hours": fleet.time_hours}
        if method == "POST" and len(parts) == 3 and parts[0] == "devices" and parts[2] == "recognize":
            name = (body or {}).get("plant_name")
            if not isinstance(name, str):
                return 422, {"error": "plant_name must be a string"}
            profile = fleet.recognize(parts[1], name)
            return 200, profile.to_json()
        return 404, {"error": f"no route {method} {path}"}
    except SimError as exc:
        return exc.status, {"error": str(exc)}


class InProcessWire:
    """Wire client for embedded mode: same protocol, no sockets."""

    def __init__(self, fleet: DeviceFleet):
        self.fleet = fleet

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        return handle_wire(self.fleet, method, path, body)


class HttpWire:
    """Wire client for an external simulator process."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.client = httpx.Client(base_url=self.base_url, timeout=timeout)

    def request(self, method: str, path: str, body: dict | None = None) -> tuple[int, dict]:
        resp = self.client.request(method, path, json=body)
        try:
            payload = resp.json()
        except ValueError:
            payload = {"error": resp.text}
        return resp.status_code, payload


def build_sim_app(fleet: DeviceFleet):
    """FastAPI wrapper over handle_wire; requests are linearized by a lock."""
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="modelhome device simulator")
    lock = threading.Lock()

    async def dispatch(method: str, path: str, request: Request | None = None):
        body = None
        if request is not None:
            raw = await request.body()
            if raw:
                try:
                    body = json.loads(raw)
                except ValueError:
                    return JSONResponse({"error": "body is not JSON"}, status_code=422)
        with lock:
            status, payload = handle_wire(fleet, method, path, body)
        return JSONResponse(payload, status_code=status)

    @app.get("/devices")
    async def list_devices():
        return await dispatch("GET", "/devices")

    @app.get("/devices/{dev_id}/state")
    async def get_state(dev_id: str):
        return await dispatch("GET", f"/devices/{dev_id}/state")

    @app.put("/devices/{dev_id}/state")
    async def put_state(dev_id: str, request: Request):
        return await dispatch("PUT", f"/devices/{dev_id}/state", request)

    @app.post("/sim/step")
    async def sim_step(request: Request):
        return await dispatch("POST", "/sim/step", request)

    @app.post("/devices/{dev_id}/recognize")
    async def recognize(dev_id: str, request: Request):
        return await dispatch("POST", f"/devices/{dev_id}/recognize", request)

    return app
