"""Device connector: keeps the runtime model in step with device truth.

One direction is polling: each registered device is GET-polled on its own
interval and every differing attribute lands in the runtime model as an
``external`` change. The other direction is ``push_write``, which PUTs an
actuator attribute and folds the acknowledged value back into the model as a
``synchronizer`` change so the synchronizer never re-propagates its own
writes. Device health is folded into the ``online`` attribute rather than
surfaced as poll errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from .devicesim import DEVICE_ATTRS, DeviceOffline, UnknownDevice
from .metamodel import ChangeEvent, Model, ReadOnlyAttribute

ROOT_ID = "os"

_TYPE_NAMES = {int: "Int", float: "Float", bool: "Bool", str: "String"}


class DescriptorInvalid(ValueError):
    pass


class DuplicateDevice(ValueError):
    pass


@dataclass(frozen=True)
class DeviceDescriptor:
    """Capability sheet for one device: what we may read, what we may write,
    and how eagerly to poll."""

    dev_id: str
    device_type: str
    base_url: str = ""
    readable: Mapping[str, str] = field(default_factory=dict)
    writable: Mapping[str, str] = field(default_factory=dict)
    poll_interval_ticks: int = 1
    offline_after: int = 3

    def __post_init__(self):
        if not self.dev_id:
            raise DescriptorInvalid("descriptor needs a dev_id")
        schema = DEVICE_ATTRS.get(self.device_type)
        if schema is None:
            raise DescriptorInvalid(
                f"{self.dev_id}: unknown device type {self.device_type!r}"
            )
        if self.poll_interval_ticks < 1:
            raise DescriptorInvalid(f"{self.dev_id}: poll interval must be >= 1 tick")
        if self.offline_after < 1:
            raise DescriptorInvalid(f"{self.dev_id}: offline_after must be >= 1")
        for attr, type_name in self.readable.items():
            if attr not in schema:
                raise DescriptorInvalid(
                    f"{self.dev_id}: {self.device_type} has no attribute {attr!r}"
                )
            if _TYPE_NAMES[schema[attr][0]] != type_name:
                raise DescriptorInvalid(
                    f"{self.dev_id}.{attr}: wire type is {_TYPE_NAMES[schema[attr][0]]},"
                    f" descriptor says {type_name}"
                )
        for attr, type_name in self.writable.items():
            if attr not in schema or not schema[attr][1]:
                raise DescriptorInvalid(
                    f"{self.dev_id}: attribute {attr!r} is not writable on the wire"
                )
            if _TYPE_NAMES[schema[attr][0]] != type_name:
                raise DescriptorInvalid(
                    f"{self.dev_id}.{attr}: wire type is {_TYPE_NAMES[schema[attr][0]]},"
                    f" descriptor says {type_name}"
                )


def descriptor_for(dev_id: str, device_type: str, **overrides: Any) -> DeviceDescriptor:
    """Descriptor exposing the full wire schema of a device type."""
    schema = DEVICE_ATTRS.get(device_type)
    if schema is None:
        raise DescriptorInvalid(f"{dev_id}: unknown device type {device_type!r}")
    readable = {name: _TYPE_NAMES[t] for name, (t, _) in schema.items()}
    writable = {name: _TYPE_NAMES[t] for name, (t, w) in schema.items() if w}
    return DeviceDescriptor(
        dev_id=dev_id,
        device_type=device_type,
        readable=readable,
        writable=writable,
        **overrides,
    )


def descriptors_from_roster(data: dict, base_url: str = "") -> list[DeviceDescriptor]:
    """Derive one descriptor per roster device entry.

    The roster is shared with the simulator; entries may carry per-device
    poll tuning, which defaults to poll-every-tick and offline after three
    straight failures.
    """
    out = []
    for entry in data.get("devices", []):
        out.append(
            descriptor_for(
                entry["dev_id"],
                entry["device_type"],
                base_url=entry.get("base_url", base_url),
                poll_interval_ticks=entry.get("poll_interval_ticks", 1),
                offline_after=entry.get("offline_after", 3),
            )
        )
    return out


class Connector:
    """Owns the device side of the runtime model.

    All mutations funnel through the owning thread of the host loop; this
    class itself is not locked.
    """

    def __init__(self, model: Model, wire):
        self.model = model
        self.wire = wire
        self.descriptors: dict[str, DeviceDescriptor] = {}
        self._failures: dict[str, int] = {}
        self._next_poll: dict[str, int] = {}
        # every PUT attempted, for echo-suppression accounting
        self.write_log: list[tuple[str, str, Any]] = []
        if model.root_id is None:
            model.instantiate("SmartHomeOS", ROOT_ID, root=True)

    # -- registration -----------------------------------------------------

    def register_device(self, desc: DeviceDescriptor):
        if desc.dev_id in self.descriptors:
            raise DuplicateDevice(f"device {desc.dev_id!r} is already registered")
        class_name = "Socket" if desc.device_type == "SmartPlug" else "Device"
        elem = self.model.instantiate(
            class_name,
            desc.dev_id,
            initial={
                "dev_id": desc.dev_id,
                "device_type": desc.device_type,
                "online": False,
            },
        )
        self.model.add_reference(self.model.root_id, "devices", desc.dev_id)
        self.descriptors[desc.dev_id] = desc
        self._failures[desc.dev_id] = 0
        self._next_poll[desc.dev_id] = 0
        return elem

    # -- polling ----------------------------------------------------------

    def poll_once(self, dev_id: str) -> list[ChangeEvent]:
        desc = self._descriptor(dev_id)
        try:
            status, payload = self.wire.request("GET", f"/devices/{dev_id}/state")
        except Exception:
            status, payload = 0, {}
        if status != 200:
            return self._poll_failed(desc)
        self._failures[dev_id] = 0
        events = []
        ev = self.model.set_attribute(dev_id, "online", True, origin="external")
        if ev is not None:
            events.append(ev)
        attrs = payload.get("attrs", {})
        for name in sorted(desc.readable):
            if name not in attrs:
                continue
            ev = self.model.set_attribute(dev_id, name, attrs[name], origin="external")
            if ev is not None:
                events.append(ev)
        return events

    def _poll_failed(self, desc: DeviceDescriptor) -> list[ChangeEvent]:
        self._failures[desc.dev_id] += 1
        if self._failures[desc.dev_id] == desc.offline_after:
            ev = self.model.set_attribute(desc.dev_id, "online", False, origin="external")
            if ev is not None:
                return [ev]
        return []

    def poll_due(self, tick: int) -> list[ChangeEvent]:
        """Poll every device whose interval has elapsed by ``tick``."""
        events = []
        for dev_id in sorted(self.descriptors):
            if tick >= self._next_poll[dev_id]:
                events.extend(self.poll_once(dev_id))
                self._next_poll[dev_id] = tick + self.descriptors[dev_id].poll_interval_ticks
        return events

    # -- writes -----------------------------------------------------------

    def push_write(self, dev_id: str, attr: str, value: Any) -> dict:
        desc = self._descriptor(dev_id)
        if attr not in desc.writable:
            raise ReadOnlyAttribute(f"{dev_id}.{attr} is not writable per its descriptor")
        if not self.model.element(dev_id).attrs.get("online"):
            raise DeviceOffline(f"device {dev_id!r} is offline; write rejected")
        self.write_log.append((dev_id, attr, value))
        status, payload = self.wire.request(
            "PUT", f"/devices/{dev_id}/state", {"attrs": {attr: value}}
        )
        if status == 503:
            raise DeviceOffline(payload.get("error", f"device {dev_id!r} is offline"))
        if status != 200:
            raise ReadOnlyAttribute(payload.get("error", f"write to {dev_id}.{attr} refused"))
        # Ack only covers attrs we own; side effects (species lookup and the
        # like) are real external changes and arrive with the next poll.
        acked = payload.get("attrs", {})
        for name in sorted(desc.writable):
            if name in acked:
                self.model.set_attribute(dev_id, name, acked[name], origin="synchronizer")
        return payload

    def _descriptor(self, dev_id: str) -> DeviceDescriptor:
        try:
            return self.descriptors[dev_id]
        except KeyError:
            raise UnknownDevice(f"device {dev_id!r} is not registered") from None
