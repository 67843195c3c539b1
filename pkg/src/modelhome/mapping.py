"""Mapping-rule document: parse and static validation.

The document is XML (tag vocabulary frozen in docs/formats.md)::

    <mappings>
      <map id="lamp" source="Socket" where="source.dev_id = 'mi-plug-01'"
           target="Lamp" direction="bidirectional">
        <attr target="on" expr="source.power"/>
        <writeback source="power" target="on"/>
      </map>
    </mappings>

``source`` is a runtime-model class, ``target`` a scenario-model class.
``where`` filters source elements (Bool expression over ``source``).
``attr`` entries push values toward the scenario; ``writeback`` entries are
identity attribute pairs that carry scenario writes back to the device and
are only legal on bidirectional rules.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import exprs
from .errors import Diagnostic
from .metamodel import Registry
from .xmldoc import XmlMalformed, XmlNode, parse_xml

DIRECTIONS = ("toScenario", "bidirectional")

DOC = "mapping"


class MappingParseError(Exception):
    """Structural parse failure; carries a located diagnostic."""

    def __init__(self, diagnostic: Diagnostic):
        self.diagnostic = diagnostic
        super().__init__(str(diagnostic))


@dataclass(frozen=True)
class AttrMap:
    target_attr: str
    expr: exprs.Expr
    expr_text: str
    line: int = 0


@dataclass(frozen=True)
class WritebackPair:
    source_attr: str
    target_attr: str
    line: int = 0


@dataclass(frozen=True)
class MappingRule:
    rule_id: str
    source_class: str
    predicate: exprs.Expr | None
    predicate_text: str | None
    target_class: str
    direction: str
    attr_maps: tuple[AttrMap, ...]
    writebacks: tuple[WritebackPair, ...]
    line: int = 0

    def reads(self) -> set[str]:
        """Source attributes whose change can affect this rule."""
        out: set[str] = set()
        if self.predicate is not None:
            out |= exprs.referenced_attrs(self.predicate, "source")
        for am in self.attr_maps:
            out |= exprs.referenced_attrs(am.expr, "source")
        return out


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[MappingRule, ...]
    version: int = 0
    text: str = ""

    def with_version(self, version: int) -> "RuleSet":
        return replace(self, version=version)


def _require(node: XmlNode, attr: str) -> str:
    if attr not in node.attrs:
        raise MappingParseError(
            Diagnostic(DOC, f"<{node.tag}> is missing required attribute {attr!r}",
                       line=node.line, col=node.col)
        )
    return node.attrs[attr]


def _parse_expr_attr(node: XmlNode, attr: str, text: str) -> exprs.Expr:
    try:
        return exprs.parse_expr(text)
    except exprs.ExprSyntaxError as exc:
        raise MappingParseError(
            Diagnostic(DOC, f"bad expression in {attr!r}: {exc}", line=node.line, col=node.col)
        ) from None


def parse_rules(text: str) -> RuleSet:
    """Parse a mapping document. Pure; raises MappingParseError or XmlMalformed."""
    root = parse_xml(text)
    if root.tag != "mappings":
        raise MappingParseError(
            Diagnostic(DOC, f"expected root <mappings>, got <{root.tag}>",
                       line=root.line, col=root.col)
        )
    rules: list[MappingRule] = []
    for node in root.children:
        if node.tag != "map":
            raise MappingParseError(
                Diagnostic(DOC, f"unknown element <{node.tag}> under <mappings>",
                           line=node.line, col=node.col)
            )
        rule_id = _require(node, "id")
        source = _require(node, "source")
        target = _require(node, "target")
        direction = node.attrs.get("direction", "toScenario")
        where_text = node.attrs.get("where")
        predicate = _parse_expr_attr(node, "where", where_text) if where_text else None
        attr_maps: list[AttrMap] = []
        writebacks: list[WritebackPair] = []
        for child in node.children:
            if child.tag == "attr":
                expr_text = _require(child, "expr")
                attr_maps.append(
                    AttrMap(_require(child, "target"),
                            _parse_expr_attr(child, "expr", expr_text),
                            expr_text, line=child.line)
                )
            elif child.tag == "writeback":
                writebacks.append(
                    WritebackPair(_require(child, "source"), _require(child, "target"),
                                  line=child.line)
                )
            else:
                raise MappingParseError(
                    Diagnostic(DOC, f"unknown element <{child.tag}> under <map>",
                               line=child.line, col=child.col, rule_id=rule_id)
                )
        rules.append(
            MappingRule(rule_id, source, predicate, where_text, target, direction,
                        tuple(attr_maps), tuple(writebacks), line=node.line)
        )
    return RuleSet(tuple(rules), version=0, text=text)


def validate_rules(
    ruleset: RuleSet, runtime_registry: Registry, scenario_registry: Registry
) -> list[Diagnostic]:
    """Type-check every rule against both metamodels. Empty result == activatable."""
    out: list[Diagnostic] = []
    seen_ids: set[str] = set()

    def bad(rule: MappingRule, message: str, line: int | None = None):
        out.append(Diagnostic(DOC, message, line=line or rule.line, rule_id=rule.rule_id))

    for rule in ruleset.rules:
        if rule.rule_id in seen_ids:
            bad(rule, f"duplicate rule id {rule.rule_id!r}")
        seen_ids.add(rule.rule_id)
        if "@" in rule.rule_id:
            bad(rule, "rule ids may not contain '@' (reserved for derived element ids)")
        if rule.direction not in DIRECTIONS:
            bad(rule, f"direction must be one of {DIRECTIONS}, got {rule.direction!r}")
        if not runtime_registry.has(rule.source_class):
            bad(rule, f"unknown runtime class {rule.source_class!r}")
            continue
        if not scenario_registry.has(rule.target_class):
            bad(rule, f"unknown scenario class {rule.target_class!r}")
            continue
        source_mc = runtime_registry.get(rule.source_class)
        target_mc = scenario_registry.get(rule.target_class)
        schema = {"source": source_mc}

        if rule.predicate is not None:
            t, problems = exprs.infer_type(rule.predicate, schema)
            for p in problems:
                bad(rule, f"selector: {p}")
            if t is not None and t != exprs.BOOL_T:
                bad(rule, f"selector must be Bool, got {t}")

        seen_targets: set[str] = set()
        for am in rule.attr_maps:
            if am.target_attr in seen_targets:
                bad(rule, f"attribute {am.target_attr!r} is mapped twice", line=am.line)
            seen_targets.add(am.target_attr)
            ad = target_mc.attr(am.target_attr)
            if ad is None:
                bad(rule, f"class {rule.target_class!r} has no attribute {am.target_attr!r}",
                    line=am.line)
                continue
            t, problems = exprs.infer_type(am.expr, schema)
            for p in problems:
                bad(rule, f"expression for {am.target_attr!r}: {p}", line=am.line)
            if t is not None and not _assignable(t, ad.type):
                bad(rule, f"expression for {am.target_attr!r} has type {t}, attribute is {ad.type}",
                    line=am.line)

        if rule.writebacks and rule.direction != "bidirectional":
            bad(rule, "writeback pairs require direction='bidirectional'")
        for wb in rule.writebacks:
            src_ad = source_mc.attr(wb.source_attr)
            tgt_ad = target_mc.attr(wb.target_attr)
            if src_ad is None:
                bad(rule, f"writeback source {wb.source_attr!r} not on {rule.source_class!r}",
                    line=wb.line)
                continue
            if tgt_ad is None:
                bad(rule, f"writeback target {wb.target_attr!r} not on {rule.target_class!r}",
                    line=wb.line)
                continue
            if not src_ad.writable:
                bad(rule, f"writeback source {wb.source_attr!r} is read-only on the device",
                    line=wb.line)
            src_t = "String" if src_ad.type == "Enum" else src_ad.type
            tgt_t = "String" if tgt_ad.type == "Enum" else tgt_ad.type
            if not (_assignable(tgt_t, src_t) and _assignable(src_t, tgt_t)):
                bad(rule, f"writeback pair types differ: {src_ad.type} vs {tgt_ad.type}",
                    line=wb.line)
    return out


def _assignable(value_type: str, attr_type: str) -> bool:
    if attr_type == "Enum":
        attr_type = "String"
    if value_type == attr_type:
        return True
    return value_type == exprs.INT_T and attr_type == exprs.FLOAT_T
