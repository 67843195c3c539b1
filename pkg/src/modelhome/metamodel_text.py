"""Plain-text metamodel definition format.

One class per ``class Name`` header, followed by indented member lines::

    # comment
    class Device
      attr dev_id: String : readonly
      attr mode: Enum(eco, boost)
      ref parts -> Part [0..*]

Attributes default to writable; references default to multiplicity 0..*.
Classes may appear in any order (targets are resolved over the whole file).
parse -> serialize -> parse is the identity on the registry.
"""

from __future__ import annotations

import re

from .metamodel import ATTR_TYPES, AttrDef, MetaClass, RefDef, Registry

_CLASS_RE = re.compile(r"^class\s+([A-Za-z_][A-Za-z0-9_]*)\s*$")
_ATTR_RE = re.compile(
    r"^attr\s+([A-Za-z_][A-Za-z0-9_]*)\s*:\s*"
    r"([A-Za-z]+)\s*(?:\(([^)]*)\))?\s*(?::\s*readonly\s*)?$"
)
_REF_RE = re.compile(
    r"^ref\s+([A-Za-z_][A-Za-z0-9_]*)\s*->\s*([A-Za-z_][A-Za-z0-9_]*)"
    r"\s*(?:\[\s*([^\]]+?)\s*\])?\s*$"
)


class MetamodelTextError(Exception):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


def parse_metamodel_text(text: str) -> Registry:
    classes: list[MetaClass] = []
    name: str | None = None
    attrs: list[AttrDef] = []
    refs: list[RefDef] = []

    def flush():
        if name is not None:
            classes.append(MetaClass(name, tuple(attrs), tuple(refs)))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _CLASS_RE.match(line)
        if m:
            flush()
            name, attrs, refs = m.group(1), [], []
            continue
        if name is None:
            raise MetamodelTextError(f"expected 'class', got {line!r}", lineno)
        m = _ATTR_RE.match(line)
        if m:
            attr_name, attr_type, enum_body = m.group(1), m.group(2), m.group(3)
            if attr_type not in ATTR_TYPES:
                raise MetamodelTextError(f"unknown attribute type {attr_type!r}", lineno)
            values = ()
            if enum_body is not None:
                if attr_type != "Enum":
                    raise MetamodelTextError("only Enum attributes take a value list", lineno)
                values = tuple(v.strip() for v in enum_body.split(",") if v.strip())
                if not values:
                    raise MetamodelTextError("empty enum value list", lineno)
            writable = not line.rstrip().endswith("readonly")
            try:
                attrs.append(AttrDef(attr_name, attr_type, writable, values))
            except ValueError as exc:
                raise MetamodelTextError(str(exc), lineno) from None
            continue
        m = _REF_RE.match(line)
        if m:
            ref_name, target, mult = m.group(1), m.group(2), m.group(3) or "0..*"
            try:
                refs.append(RefDef(ref_name, target, mult))
            except ValueError as exc:
                raise MetamodelTextError(str(exc), lineno) from None
            continue
        raise MetamodelTextError(f"cannot parse {line!r}", lineno)
    flush()

    registry = Registry()
    registry.define_all(classes)
    return registry


def serialize_metamodel(registry: Registry) -> str:
    lines: list[str] = []
    for name in registry.classes:
        mc = registry.classes[name]
        lines.append(f"class {mc.name}")
        for a in mc.attributes:
            type_part = a.type if a.type != "Enum" else f"Enum({', '.join(a.enum_values)})"
            suffix = "" if a.writable else " : readonly"
            lines.append(f"  attr {a.name}: {type_part}{suffix}")
        for r in mc.references:
            lines.append(f"  ref {r.name} -> {r.target_class} [{r.multiplicity}]")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
