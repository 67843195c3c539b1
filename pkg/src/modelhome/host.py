"""Host process: wires the fleet, connector, synchronizer, and behavior
engine into one tick loop and owns every model mutation.

Tick phases, in fixed order:

0. drain control queue (console actions, rule swaps)
1. simulator step
2. poll due devices
3. sync runtime -> scenario
4. step behavior
5. sync scenario -> runtime

HTTP handlers never touch models. Reads go through a snapshot published
between ticks; writes become control messages the next tick consumes.
"""

from __future__ import annotations

import itertools
import json
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import devicesim, mapping, scenario
from .connector import Connector, DescriptorInvalid, descriptors_from_roster
from .devicesim import DeviceFleet, InProcessWire, HttpWire
from .errors import Diagnostic, ValidationFailed
from .metamodel import Model, ModelError, RUNTIME
from .metamodel_text import MetamodelTextError, parse_metamodel_text
from .synchronizer import Synchronizer
from .xmldoc import XmlMalformed

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2

JOURNAL_SIZE = 10_000


class ConfigError(Exception):
    """Startup failure with a CLI exit category attached."""

    def __init__(self, message: str, exit_code: int = EXIT_VALIDATION,
                 diagnostics: list[Diagnostic] | None = None):
        super().__init__(message)
        self.exit_code = exit_code
        self.diagnostics = diagnostics or []


@dataclass
class HostConfig:
    roster: Path
    rules: Path
    scenario: Path
    runtime_metamodel: Path
    tick_ms: int = 250
    sim_hours_per_tick: float | None = None  # None: take the roster's value
    embed_simulator: bool = True
    sim_url: str = ""
    api_host: str = "127.0.0.1"
    api_port: int = 8000
    test_mode: bool = False
    frontend_dir: str = ""

    KEYS = (
        "roster", "rules", "scenario", "runtime_metamodel", "tick_ms",
        "sim_hours_per_tick", "embed_simulator", "sim_url",
        "api_host", "api_port", "test_mode", "frontend_dir",
    )

    def validate(self) -> None:
        if self.tick_ms <= 0:
            raise ConfigError(f"tick_ms must be positive, got {self.tick_ms}")
        if self.sim_hours_per_tick is not None and self.sim_hours_per_tick <= 0:
            raise ConfigError("sim_hours_per_tick must be positive")
        if not self.embed_simulator and not self.sim_url:
            raise ConfigError("external simulator mode needs sim_url")
        for name in ("roster", "rules", "scenario", "runtime_metamodel"):
            path = getattr(self, name)
            if not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path}", exit_code=EXIT_IO)
        if self.frontend_dir and not Path(self.frontend_dir).is_dir():
            raise ConfigError(
                f"frontend_dir is not a directory: {self.frontend_dir}", exit_code=EXIT_IO
            )

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, Any] | None = None) -> "HostConfig":
        path = Path(path)
        try:
            raw = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", exit_code=EXIT_IO) from None
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        unknown = set(data) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        missing = [k for k in ("roster", "rules", "scenario", "runtime_metamodel")
                   if k not in data]
        if missing:
            raise ConfigError(f"config is missing {missing}")
        base = path.parent
        for key in ("roster", "rules", "scenario", "runtime_metamodel"):
            data[key] = (base / data[key]).resolve()
        if data.get("frontend_dir"):
            data["frontend_dir"] = str((base / data["frontend_dir"]).resolve())
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class LoadedDocuments:
    """Everything parsed and cross-validated, ready to wire a Host."""

    roster: dict
    sim_config: devicesim.SimConfig
    sim_devices: list
    descriptors: list
    runtime_registry: Any
    ruleset: mapping.RuleSet
    scenario_model: Model
    engine: scenario.ScenarioEngine


def load_documents(roster_path, rules_path, scenario_path, metamodel_path) -> LoadedDocuments:
    """Parse and validate the four startup documents.

    Raises ConfigError with exit category 1 for unreadable files and 2 for
    any parse or validation problem, carrying located diagnostics.
    """
    texts = {}
    for name, p in (("roster", roster_path), ("rules", rules_path),
                    ("scenario", scenario_path), ("runtime metamodel", metamodel_path)):
        try:
            texts[name] = Path(p).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {name}: {exc}", exit_code=EXIT_IO) from None

    def invalid(diag: Diagnostic) -> ConfigError:
        return ConfigError(str(diag), diagnostics=[diag])

    try:
        roster = json.loads(texts["roster"])
    except json.JSONDecodeError as exc:
        raise invalid(Diagnostic("roster", f"not valid JSON: {exc.msg}",
                                 line=exc.lineno, col=exc.colno)) from None
    try:
        sim_config, sim_devices = devicesim.load_roster(roster)
        descriptors = descriptors_from_roster(roster)
    except (ValueError, DescriptorInvalid) as exc:
        raise invalid(Diagnostic("roster", str(exc))) from None

    try:
        runtime_registry = parse_metamodel_text(texts["runtime metamodel"])
    except MetamodelTextError as exc:
        raise invalid(Diagnostic("metamodel", str(exc), line=exc.line)) from None

    try:
        scenario_model, engine = scenario.load_scenario(texts["scenario"])
    except XmlMalformed as exc:
        raise invalid(Diagnostic("scenario", exc.message, line=exc.line, col=exc.col)) from None
    except scenario.ScenarioParseError as exc:
        raise ConfigError(str(exc), diagnostics=[exc.diagnostic]) from None
    except ValidationFailed as exc:
        raise ConfigError(str(exc), diagnostics=exc.diagnostics) from None

    try:
        ruleset = mapping.parse_rules(texts["rules"])
    except XmlMalformed as exc:
        raise invalid(Diagnostic("mapping", exc.message, line=exc.line, col=exc.col)) from None
    except mapping.MappingParseError as exc:
        raise ConfigError(str(exc), diagnostics=[exc.diagnostic]) from None
    problems = mapping.validate_rules(ruleset, runtime_registry, scenario_model.registry)
    if problems:
        raise ConfigError(
            f"mapping rules failed validation ({len(problems)} problem(s))",
            diagnostics=problems,
        )
    return LoadedDocuments(
        roster=roster,
        sim_config=sim_config,
        sim_devices=sim_devices,
        descriptors=descriptors,
        runtime_registry=runtime_registry,
        ruleset=ruleset,
        scenario_model=scenario_model,
        engine=engine,
    )


class Host:
    """Owns the models and the tick loop; one instance per process."""

    def __init__(self, config: HostConfig):
        self.config = config
        docs = load_documents(
            config.roster, config.rules, config.scenario, config.runtime_metamodel
        )
        self.sim_hours_per_tick = (
            config.sim_hours_per_tick
            if config.sim_hours_per_tick is not None
            else docs.sim_config.sim_hours_per_tick
        )
        self.fleet: DeviceFleet | None = None
        if config.embed_simulator:
            self.fleet = DeviceFleet(docs.sim_devices, docs.sim_config)
            self.wire = InProcessWire(self.fleet)
        else:
            self.wire = HttpWire(config.sim_url)
        self.runtime_model = Model(docs.runtime_registry, tag=RUNTIME)
        self.scenario_model = docs.scenario_model
        self.engine = docs.engine
        self.connector = Connector(self.runtime_model, self.wire)
        self.sync = Synchronizer(
            self.runtime_model, self.scenario_model, docs.ruleset, writer=self.connector
        )

        self.tick_count = 0
        self.time_hours = 0.0
        self.host_diagnostics: list[Diagnostic] = []
        self._control: queue.Queue = queue.Queue()
        self._runtime_intake: list = []
        self._scenario_intake: list = []
        self._pending_journal: list[dict] = []
        self._seen_notifications = 0
        self._seq = itertools.count(1)
        self._journal: deque = deque(maxlen=JOURNAL_SIZE)
        self._journal_lock = threading.Lock()
        self._snapshot_lock = threading.Lock()
        self._snapshot: dict = {}
        self._tick_mutex = threading.Lock()
        self._rules_lock = threading.Lock()
        self._rules_text = docs.ruleset.text
        self._next_rules_version = docs.ruleset.version
        self._stop = threading.Event()

        self.runtime_model.subscribe(self._on_runtime_event)
        self.scenario_model.subscribe(self._on_scenario_event)

        for desc in docs.descriptors:
            self.connector.register_device(desc)
        self.connector.poll_due(0)
        self.sync.activate()
        self._runtime_intake.clear()  # startup state is already projected
        self._scenario_intake.clear()
        self._flush_journal()
        self._publish()

    # -- event intake ------------------------------------------------------

    def _on_runtime_event(self, event) -> None:
        self._runtime_intake.append(event)
        self._pending_journal.append(
            {"type": "change", "tick": self.tick_count, **event.to_json()}
        )

    def _on_scenario_event(self, event) -> None:
        self._scenario_intake.append(event)
        self._pending_journal.append(
            {"type": "change", "tick": self.tick_count, **event.to_json()}
        )

    # -- control messages --------------------------------------------------

    def enqueue(self, message: tuple) -> None:
        self._control.put(message)

    def allocate_rules_version(self, text: str) -> tuple[bool, int]:
        """Reserve the next rules version for ``text``.

        Returns (changed, version); identical text short-circuits without
        allocating so a repeated upload is a no-op.
        """
        with self._rules_lock:
            if text == self._rules_text:
                return False, self._next_rules_version
            self._next_rules_version += 1
            self._rules_text = text
            return True, self._next_rules_version

    def _drain_control(self) -> None:
        while True:
            try:
                message = self._control.get_nowait()
            except queue.Empty:
                return
            kind = message[0]
            try:
                if kind == "plant_name":
                    self.engine.set_plant_name(message[1])
                elif kind == "actuator":
                    _, element_id, attr, value = message
                    self.scenario_model.set_attribute(
                        element_id, attr, value, origin="console"
                    )
                elif kind == "rules":
                    self.sync.reload_rules(message[1])
                else:
                    raise ValueError(f"unknown control message {kind!r}")
            except (ModelError, ValidationFailed, ValueError) as exc:
                self.host_diagnostics.append(
                    Diagnostic("host", f"control message {kind!r} failed: {exc}")
                )

    # -- tick loop ---------------------------------------------------------

    def tick(self) -> None:
        """Run the five phases once. Safe to call from any single caller."""
        with self._tick_mutex:
            self.tick_count += 1
            self._drain_control()
            self._step_simulator()
            self.connector.poll_due(self.tick_count)
            runtime_events = self._runtime_intake
            self._runtime_intake = []
            self.sync.sync_runtime_to_scenario(runtime_events)
            self.engine.step(self.time_hours)
            scenario_events = self._scenario_intake
            self._scenario_intake = []
            self.sync.sync_scenario_to_runtime(scenario_events)
            self._flush_journal()
            self._publish()

    def _step_simulator(self) -> None:
        dt = self.sim_hours_per_tick
        if self.fleet is not None:
            self.fleet.step(dt)
            self.time_hours = self.fleet.time_hours
            return
        status, payload = self.wire.request("POST", "/sim/step", {"dt_hours": dt})
        if status == 200:
            self.time_hours = float(payload.get("time_hours", self.time_hours + dt))
        else:
            self.time_hours += dt
            self.host_diagnostics.append(
                Diagnostic("host", f"simulator step failed with status {status}")
            )

    def run_forever(self) -> None:
        period = self.config.tick_ms / 1000.0
        next_at = time.monotonic() + period
        while not self._stop.is_set():
            self.tick()
            delay = next_at - time.monotonic()
            next_at += period
            if delay > 0:
                self._stop.wait(delay)

    def stop(self) -> None:
        self._stop.set()

    # -- published state ---------------------------------------------------

    def _flush_journal(self) -> None:
        new_notes = self.engine.notifications[self._seen_notifications:]
        self._seen_notifications = len(self.engine.notifications)
        for note in new_notes:
            self._pending_journal.append(
                {"type": "notification", "tick": self.tick_count, **note.to_json()}
            )
        if not self._pending_journal:
            return
        with self._journal_lock:
            for entry in self._pending_journal:
                entry["seq"] = next(self._seq)
                self._journal.append(entry)
        self._pending_journal = []

    def journal_since(self, since: int, limit: int | None = None) -> list[dict]:
        with self._journal_lock:
            out = [e for e in self._journal if e["seq"] > since]
        return out[:limit] if limit is not None else out

    def diagnostics(self) -> list[Diagnostic]:
        return [
            *self.host_diagnostics,
            *self.sync.diagnostics,
            *self.engine.diagnostics,
        ]

    def _publish(self) -> None:
        online = {
            eid: bool(elem.attrs.get("online", False))
            for eid, elem in sorted(self.runtime_model.elements.items())
            if "online" in elem.attrs
        }
        snapshot = {
            "tick": self.tick_count,
            "time_hours": self.time_hours,
            "rules_version": self.sync.ruleset.version,
            "test_mode": self.config.test_mode,
            "scenario": self.scenario_model.state(),
            "runtime": self.runtime_model.state(),
            "online": online,
            "notifications": [n.to_json() for n in self.engine.notifications],
            "diagnostics": [d.to_json() for d in self.diagnostics()[-200:]],
            "machine_states": self.engine.machine_states(),
            "rule_branches": self.engine.rule_branches(),
        }
        with self._snapshot_lock:
            self._snapshot = snapshot

    def snapshot(self) -> dict:
        with self._snapshot_lock:
            return self._snapshot
