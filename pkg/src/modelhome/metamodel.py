"""MOF-lite typing and instance kernel.

Both live models (device runtime model and scenario model) are instances of
this kernel: a registry of flat classes (no inheritance), elements with typed
attribute values and reference links, and change events as the only currency
of observation. The kernel checks types, not semantics: value ranges, units
and actuation policy belong to the simulator and the scenario engine.

Float comparison is bit-exact here; tolerance-based comparison is a test
concern, never a kernel one.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

ATTR_TYPES = ("Int", "Float", "Bool", "String", "Enum")
MULTIPLICITIES = ("0..1", "1", "0..*")
ORIGINS = ("external", "synchronizer", "scenarioEngine", "console")

RUNTIME = "runtime"
SCENARIO = "scenario"


class ModelError(Exception):
    pass


class DuplicateClass(ModelError):
    pass


class DuplicateMember(ModelError):
    pass


class UnknownTargetClass(ModelError):
    pass


class UnknownClass(ModelError):
    pass


class DuplicateId(ModelError):
    pass


class TypeMismatch(ModelError):
    pass


class UnknownElement(ModelError):
    pass


class UnknownAttribute(ModelError):
    pass


class ReadOnlyAttribute(ModelError):
    pass


class MultiplicityViolation(ModelError):
    pass


class MetamodelMismatch(ModelError):
    pass


@dataclass(frozen=True)
class AttrDef:
    name: str
    type: str
    writable: bool = True
    enum_values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.type not in ATTR_TYPES:
            raise ValueError(f"unknown attribute type {self.type!r}")
        if self.type == "Enum" and not self.enum_values:
            raise ValueError(f"enum attribute {self.name!r} needs at least one value")
        if self.type != "Enum" and self.enum_values:
            raise ValueError(f"attribute {self.name!r} is not an Enum but has enum values")

    def default(self) -> Any:
        if self.type == "Int":
            return 0
        if self.type == "Float":
            return 0.0
        if self.type == "Bool":
            return False
        if self.type == "String":
            return ""
        return self.enum_values[0]

    def check(self, value: Any) -> Any:
        """Type-check ``value`` and return its canonical form (Int widens to Float)."""
        if self.type == "Int":
            if type(value) is int:
                return value
        elif self.type == "Float":
            if type(value) is float:
                return value
            if type(value) is int:
                return float(value)
        elif self.type == "Bool":
            if type(value) is bool:
                return value
        elif self.type == "String":
            if type(value) is str:
                return value
        elif self.type == "Enum":
            if type(value) is str and value in self.enum_values:
                return value
            if type(value) is str:
                raise TypeMismatch(
                    f"{value!r} is not one of {list(self.enum_values)} for enum attribute {self.name!r}"
                )
        raise TypeMismatch(f"attribute {self.name!r} expects {self.type}, got {value!r}")


@dataclass(frozen=True)
class RefDef:
    name: str
    target_class: str
    multiplicity: str = "0..*"

    def __post_init__(self):
        if self.multiplicity not in MULTIPLICITIES:
            raise ValueError(f"unknown multiplicity {self.multiplicity!r}")

    @property
    def upper(self) -> int | None:
        return None if self.multiplicity == "0..*" else 1

    @property
    def lower(self) -> int:
        return 1 if self.multiplicity == "1" else 0


@dataclass(frozen=True)
class MetaClass:
    name: str
    attributes: tuple[AttrDef, ...] = ()
    references: tuple[RefDef, ...] = ()

    def __post_init__(self):
        seen: set[str] = set()
        for member in (*self.attributes, *self.references):
            if member.name in seen:
                raise DuplicateMember(f"class {self.name!r} declares {member.name!r} twice")
            seen.add(member.name)

    def attr(self, name: str) -> AttrDef | None:
        for a in self.attributes:
            if a.name == name:
                return a
        return None

    def ref(self, name: str) -> RefDef | None:
        for r in self.references:
            if r.name == name:
                return r
        return None


class Registry:
    """Named metaclasses; the shared type space of one model (or of a model pair)."""

    def __init__(self):
        self.classes: dict[str, MetaClass] = {}

    def define_class(self, mc: MetaClass) -> MetaClass:
        if mc.name in self.classes:
            raise DuplicateClass(f"class {mc.name!r} is already registered")
        known = set(self.classes) | {mc.name}
        for ref in mc.references:
            if ref.target_class not in known:
                raise UnknownTargetClass(
                    f"class {mc.name!r} references unknown class {ref.target_class!r}"
                )
        self.classes[mc.name] = mc
        return mc

    def define_all(self, mcs: Iterable[MetaClass]) -> None:
        """Register a batch with order-insensitive target resolution."""
        batch = list(mcs)
        names = [m.name for m in batch]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise DuplicateClass(f"duplicate class names in batch: {sorted(dup)}")
        known = set(self.classes) | set(names)
        for mc in batch:
            if mc.name in self.classes:
                raise DuplicateClass(f"class {mc.name!r} is already registered")
            for ref in mc.references:
                if ref.target_class not in known:
                    raise UnknownTargetClass(
                        f"class {mc.name!r} references unknown class {ref.target_class!r}"
                    )
        for mc in batch:
            self.classes[mc.name] = mc

    def get(self, name: str) -> MetaClass:
        try:
            return self.classes[name]
        except KeyError:
            raise UnknownClass(f"unknown class {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self.classes

    def __eq__(self, other) -> bool:
        return isinstance(other, Registry) and self.classes == other.classes

    def __repr__(self) -> str:
        return f"Registry({sorted(self.classes)})"


@dataclass
class ChangeEvent:
    """The unit of propagation between models.

    kind 'attrChanged' is also used for reference-link changes (attr_name is
    then the reference name and old/new are id tuples); the created event's
    new_value carries the full initial state so replay from empty is exact.
    """

    model_tag: str
    element_id: str
    kind: str  # created | deleted | attrChanged
    origin: str
    attr_name: str | None = None
    old_value: Any = None
    new_value: Any = None

    def to_json(self) -> dict:
        return {
            "model": self.model_tag,
            "element_id": self.element_id,
            "kind": self.kind,
            "origin": self.origin,
            "attr": self.attr_name,
            "old": self.old_value,
            "new": self.new_value,
        }


def same_value(a: Any, b: Any) -> bool:
    """Kernel value equality: bit-exact for floats, plain == elsewhere."""
    if type(a) is not type(b):
        return False
    if type(a) is float:
        return struct.pack(">d", a) == struct.pack(">d", b)
    return a == b


@dataclass
class ModelElement:
    id: str
    class_name: str
    attrs: dict[str, Any] = field(default_factory=dict)
    refs: dict[str, list[str]] = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {
            "class": self.class_name,
            "attrs": dict(self.attrs),
            "refs": {k: list(v) for k, v in self.refs.items()},
        }


class Model:
    """One live model: elements owned by a single logical writer task.

    Readers take snapshots; listeners observe every emitted ChangeEvent.
    delete_element cascades: the deleted id is silently removed from every
    reference list, which keeps the no-dangling-ids invariant without extra
    events (replaying a deleted event cascades identically).
    """

    def __init__(self, registry: Registry, tag: str = RUNTIME):
        self.registry = registry
        self.tag = tag
        self.elements: dict[str, ModelElement] = {}
        self.root_id: str | None = None
        self._listeners: list[Callable[[ChangeEvent], None]] = []

    # -- observation ------------------------------------------------------

    def subscribe(self, listener: Callable[[ChangeEvent], None]) -> None:
        self._listeners.append(listener)

    def unsubscribe(self, listener: Callable[[ChangeEvent], None]) -> None:
        self._listeners.remove(listener)

    def _emit(self, event: ChangeEvent) -> ChangeEvent:
        for cb in self._listeners:
            cb(event)
        return event

    def element(self, element_id: str) -> ModelElement:
        try:
            return self.elements[element_id]
        except KeyError:
            raise UnknownElement(f"unknown element {element_id!r}") from None

    def has(self, element_id: str) -> bool:
        return element_id in self.elements

    def elements_of(self, class_name: str) -> list[ModelElement]:
        return sorted(
            (e for e in self.elements.values() if e.class_name == class_name),
            key=lambda e: e.id,
        )

    # -- mutation ---------------------------------------------------------

    def instantiate(
        self,
        class_name: str,
        element_id: str,
        initial: Mapping[str, Any] | None = None,
        origin: str = "external",
        root: bool = False,
    ) -> ModelElement:
        mc = self.registry.get(class_name)
        if element_id in self.elements:
            raise DuplicateId(f"element id {element_id!r} is already in use")
        attrs: dict[str, Any] = {}
        initial = dict(initial or {})
        for ad in mc.attributes:
            if ad.name in initial:
                attrs[ad.name] = ad.check(initial.pop(ad.name))
            else:
                attrs[ad.name] = ad.default()
        if initial:
            raise UnknownAttribute(
                f"class {class_name!r} has no attribute(s) {sorted(initial)}"
            )
        elem = ModelElement(element_id, class_name, attrs, {r.name: [] for r in mc.references})
        self.elements[element_id] = elem
        if root:
            self.root_id = element_id
        self._emit(
            ChangeEvent(
                self.tag,
                element_id,
                "created",
                origin,
                new_value={"class": class_name, "attrs": dict(attrs), "root": root},
            )
        )
        return elem

    def set_attribute(
        self, element_id: str, attr_name: str, value: Any, origin: str = "external"
    ) -> ChangeEvent | None:
        elem = self.element(element_id)
        mc = self.registry.get(elem.class_name)
        ad = mc.attr(attr_name)
        if ad is None:
            raise UnknownAttribute(f"class {elem.class_name!r} has no attribute {attr_name!r}")
        value = ad.check(value)
        if not ad.writable and origin != "external":
            raise ReadOnlyAttribute(
                f"attribute {attr_name!r} of {elem.class_name!r} is read-only (origin {origin!r})"
            )
        old = elem.attrs[attr_name]
        if same_value(old, value):
            return None
        elem.attrs[attr_name] = value
        return self._emit(
            ChangeEvent(
                self.tag, element_id, "attrChanged", origin,
                attr_name=attr_name, old_value=old, new_value=value,
            )
        )

    def set_reference(
        self, element_id: str, ref_name: str, target_ids: Iterable[str], origin: str = "external"
    ) -> ChangeEvent | None:
        elem = self.element(element_id)
        mc = self.registry.get(elem.class_name)
        rd = mc.ref(ref_name)
        if rd is None:
            raise UnknownAttribute(f"class {elem.class_name!r} has no reference {ref_name!r}")
        ids = list(target_ids)
        if len(set(ids)) != len(ids):
            raise MultiplicityViolation(f"reference {ref_name!r} lists a target twice")
        if rd.upper is not None and len(ids) > rd.upper:
            raise MultiplicityViolation(
                f"reference {ref_name!r} allows at most {rd.upper} target(s), got {len(ids)}"
            )
        for tid in ids:
            if tid not in self.elements:
                raise UnknownElement(f"reference {ref_name!r} targets unknown element {tid!r}")
        old = elem.refs[ref_name]
        if old == ids:
            return None
        elem.refs[ref_name] = ids
        return self._emit(
            ChangeEvent(
                self.tag, element_id, "attrChanged", origin,
                attr_name=ref_name, old_value=tuple(old), new_value=tuple(ids),
            )
        )

    def add_reference(self, element_id: str, ref_name: str, target_id: str,
                      origin: str = "external") -> ChangeEvent | None:
        current = self.element(element_id).refs.get(ref_name)
        if current is None:
            raise UnknownAttribute(f"no reference {ref_name!r} on {element_id!r}")
        if target_id in current:
            return None
        return self.set_reference(element_id, ref_name, [*current, target_id], origin)

    def delete_element(self, element_id: str, origin: str = "external") -> ChangeEvent:
        elem = self.element(element_id)
        if element_id == self.root_id:
            raise ModelError("cannot delete the root element")
        snapshot = elem.snapshot()
        del self.elements[element_id]
        for other in self.elements.values():
            for name, ids in other.refs.items():
                if element_id in ids:
                    other.refs[name] = [i for i in ids if i != element_id]
        return self._emit(
            ChangeEvent(self.tag, element_id, "deleted", origin, old_value=snapshot)
        )

    # -- snapshots and equality ------------------------------------------

    def snapshot(self) -> "Model":
        clone = Model(self.registry, self.tag)
        clone.root_id = self.root_id
        clone.elements = {
            eid: ModelElement(e.id, e.class_name, dict(e.attrs), {k: list(v) for k, v in e.refs.items()})
            for eid, e in self.elements.items()
        }
        return clone

    def state(self) -> dict:
        return {
            "tag": self.tag,
            "root": self.root_id,
            "elements": {eid: self.elements[eid].snapshot() for eid in sorted(self.elements)},
        }

    @classmethod
    def from_state(cls, registry: Registry, data: Mapping[str, Any]) -> "Model":
        model = cls(registry, data.get("tag", RUNTIME))
        for eid, payload in data["elements"].items():
            model.instantiate(payload["class"], eid, payload["attrs"], root=(eid == data.get("root")))
        for eid, payload in data["elements"].items():
            for ref_name, ids in payload.get("refs", {}).items():
                if ids:
                    model.set_reference(eid, ref_name, ids)
        return model

    def state_equal(self, other: "Model") -> bool:
        if self.root_id != other.root_id or set(self.elements) != set(other.elements):
            return False
        for eid, elem in self.elements.items():
            o = other.elements[eid]
            if elem.class_name != o.class_name or elem.refs != o.refs:
                return False
            if set(elem.attrs) != set(o.attrs):
                return False
            if not all(same_value(v, o.attrs[k]) for k, v in elem.attrs.items()):
                return False
        return True

    def check_invariants(self) -> list[str]:
        """Structural audit used by property tests; empty list means healthy."""
        problems = []
        if self.root_id is not None and self.root_id not in self.elements:
            problems.append(f"root {self.root_id!r} does not exist")
        for elem in self.elements.values():
            mc = self.registry.get(elem.class_name)
            for ad in mc.attributes:
                try:
                    ad.check(elem.attrs[ad.name])
                except (KeyError, TypeMismatch) as exc:
                    problems.append(f"{elem.id}.{ad.name}: {exc}")
            for rd in mc.references:
                ids = elem.refs.get(rd.name, [])
                if rd.upper is not None and len(ids) > rd.upper:
                    problems.append(f"{elem.id}.{rd.name}: too many targets")
                for tid in ids:
                    if tid not in self.elements:
                        problems.append(f"{elem.id}.{rd.name}: dangling id {tid!r}")
        return problems


def diff(a: Model, b: Model, origin: str = "synchronizer") -> list[ChangeEvent]:
    """Minimal event list transforming a's state into b's.

    Deterministic order: deletions, then creations, then member changes, each
    sorted by element id (changes also by member name). Reference diffs for
    surviving elements are computed net of delete cascades so replay through
    apply() stays minimal.
    """
    if a.registry != b.registry:
        raise MetamodelMismatch("models use different metamodel registries")
    if a.root_id != b.root_id:
        raise MetamodelMismatch(f"root ids differ: {a.root_id!r} vs {b.root_id!r}")

    deleted = sorted(set(a.elements) - set(b.elements))
    created = sorted(set(b.elements) - set(a.elements))
    common = sorted(set(a.elements) & set(b.elements))
    # A class change is a replacement, not an attribute diff.
    for eid in list(common):
        if a.elements[eid].class_name != b.elements[eid].class_name:
            deleted.append(eid)
            created.append(eid)
            common.remove(eid)
    deleted.sort()
    created.sort()

    events: list[ChangeEvent] = []
    for eid in deleted:
        events.append(ChangeEvent(a.tag, eid, "deleted", origin, old_value=a.elements[eid].snapshot()))
    for eid in created:
        target = b.elements[eid]
        events.append(
            ChangeEvent(
                a.tag, eid, "created", origin,
                new_value={"class": target.class_name, "attrs": dict(target.attrs), "root": False},
            )
        )
    gone = set(deleted) - set(created)

    def ref_events(eid: str, before: dict[str, list[str]], after: dict[str, list[str]]):
        for name in sorted(after):
            pre = [i for i in before.get(name, []) if i not in gone]
            post = after[name]
            if pre != post:
                events.append(
                    ChangeEvent(
                        a.tag, eid, "attrChanged", origin,
                        attr_name=name, old_value=tuple(pre), new_value=tuple(post),
                    )
                )

    for eid in common:
        ae, be = a.elements[eid], b.elements[eid]
        for name in sorted(ae.attrs):
            if not same_value(ae.attrs[name], be.attrs[name]):
                events.append(
                    ChangeEvent(
                        a.tag, eid, "attrChanged", origin,
                        attr_name=name, old_value=ae.attrs[name], new_value=be.attrs[name],
                    )
                )
        ref_events(eid, ae.refs, be.refs)
    for eid in created:
        ref_events(eid, {}, b.elements[eid].refs)
    return events


def apply_events(model: Model, events: Iterable[ChangeEvent]) -> Model:
    """Replay events onto ``model`` (mutating it). Inverse of observation."""
    for evt in events:
        if evt.kind == "created":
            payload = evt.new_value
            model.instantiate(
                payload["class"], evt.element_id, payload["attrs"],
                origin=evt.origin, root=payload.get("root", False),
            )
        elif evt.kind == "deleted":
            model.delete_element(evt.element_id, origin=evt.origin)
        elif evt.kind == "attrChanged":
            mc = model.registry.get(model.element(evt.element_id).class_name)
            if mc.ref(evt.attr_name) is not None:
                model.set_reference(evt.element_id, evt.attr_name, list(evt.new_value), origin=evt.origin)
            else:
                model.set_attribute(evt.element_id, evt.attr_name, evt.new_value, origin=evt.origin)
        else:
            raise ModelError(f"unknown event kind {evt.kind!r}")
    return model
