"""Scenario model document and the behavior engine that runs over it.

A scenario document declares the scenario metamodel (classes with typed
attributes and an optional cardinality cap), any virtual instances, and the
behavior: threshold rules and state machines. Both behavior styles share the
same expression language as the mapping rules; names inside expressions refer
to `<bind>` entries, resolved against live model elements each step.

Rules are edge-acting: each step the rule's branch (condition value, or a
hysteresis state) is recomputed, and the branch's actions run only when the
branch changed, including the very first evaluation. That yields exactly one
assignment or notification per crossing, leaves room for manual actuator
overrides between crossings, and assignments still pass through the model's
no-op suppression so a redundant write emits nothing. State-machine
transition actions fire with their transition.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Iterable

from . import exprs
from .errors import Diagnostic, ValidationFailed
from .metamodel import (
    AttrDef,
    ChangeEvent,
    MetaClass,
    Model,
    ModelError,
    Registry,
    SCENARIO,
    UnknownElement,
)
from .xmldoc import XmlNode, parse_xml

DOC = "scenario"

SEVERITIES = ("info", "warning")

CARDINALITIES = ("1", "0..*")

_TEMPLATE_RE = re.compile(r"\{([^{}]+)\}")


class ScenarioParseError(Exception):
    """Structural parse failure; carries a located diagnostic."""

    def __init__(self, diagnostic: Diagnostic):
        self.diagnostic = diagnostic
        super().__init__(str(diagnostic))


class CardinalityViolation(ValidationFailed):
    """More instances declared than a class's cardinality allows."""


# -- document shape --------------------------------------------------------


@dataclass(frozen=True)
class ClassDecl:
    name: str
    cardinality: str
    attrs: tuple[AttrDef, ...]
    line: int = 0


@dataclass(frozen=True)
class InstanceDecl:
    element_id: str
    class_name: str
    sets: tuple[tuple[str, exprs.Expr, str], ...]  # (attr, expr, text)
    line: int = 0


@dataclass(frozen=True)
class SetAction:
    target_obj: str
    target_attr: str
    expr: exprs.Expr
    expr_text: str
    line: int = 0


@dataclass(frozen=True)
class NotifyAction:
    severity: str
    template: str
    line: int = 0


@dataclass(frozen=True)
class Hysteresis:
    """Two-threshold band around a metric expression.

    The side is inferred at evaluation time: off above on means the rule
    activates on a downward crossing of `on` (the planting case), off below
    on means the opposite.
    """

    metric: exprs.Expr
    on: exprs.Expr
    off: exprs.Expr | None
    band: exprs.Expr | None
    metric_text: str = ""
    line: int = 0


@dataclass(frozen=True)
class ActionRule:
    rule_id: str
    binds: tuple[tuple[str, str], ...]  # (bind name, class name)
    condition: exprs.Expr | None
    condition_text: str | None
    hysteresis: Hysteresis | None
    then_actions: tuple
    else_actions: tuple
    line: int = 0

    def is_notification_rule(self) -> bool:
        acts = (*self.then_actions, *self.else_actions)
        return bool(acts) and all(isinstance(a, NotifyAction) for a in acts)


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    guard: exprs.Expr
    guard_text: str
    actions: tuple
    line: int = 0


@dataclass(frozen=True)
class StateMachineDef:
    machine_id: str
    binds: tuple[tuple[str, str], ...]
    states: tuple[str, ...]
    initial: str
    transitions: tuple[Transition, ...]
    line: int = 0


@dataclass(frozen=True)
class ScenarioDoc:
    classes: tuple[ClassDecl, ...]
    instances: tuple[InstanceDecl, ...]
    rules: tuple[ActionRule, ...]
    machines: tuple[StateMachineDef, ...]
    text: str = ""

    def registry(self) -> Registry:
        reg = Registry()
        for decl in self.classes:
            reg.define_class(MetaClass(decl.name, attributes=decl.attrs))
        return reg


@dataclass
class Notification:
    seq: int
    time_hours: float
    severity: str
    message: str

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "time_hours": self.time_hours,
            "severity": self.severity,
            "message": self.message,
        }


# -- parsing ---------------------------------------------------------------


def _fail(node: XmlNode, message: str):
    raise ScenarioParseError(Diagnostic(DOC, message, line=node.line, col=node.col))


def _require(node: XmlNode, attr: str) -> str:
    if attr not in node.attrs:
        _fail(node, f"<{node.tag}> is missing required attribute {attr!r}")
    return node.attrs[attr]


def _expr(node: XmlNode, attr: str) -> tuple[exprs.Expr, str]:
    text = _require(node, attr)
    try:
        return exprs.parse_expr(text), text
    except exprs.ExprSyntaxError as exc:
        _fail(node, f"bad expression in {attr!r}: {exc}")


def _parse_class(node: XmlNode) -> ClassDecl:
    name = _require(node, "name")
    cardinality = node.attrs.get("cardinality", "0..*")
    if cardinality not in CARDINALITIES:
        _fail(node, f"cardinality must be one of {list(CARDINALITIES)}, got {cardinality!r}")
    attrs = []
    for child in node.children:
        if child.tag != "attr":
            _fail(child, f"unknown element <{child.tag}> under <class>")
        attr_name = _require(child, "name")
        attr_type = _require(child, "type")
        values = tuple(
            v.strip() for v in child.attrs.get("values", "").split(",") if v.strip()
        )
        try:
            attrs.append(AttrDef(attr_name, attr_type, enum_values=values))
        except ValueError as exc:
            _fail(child, str(exc))
    return ClassDecl(name, cardinality, tuple(attrs), line=node.line)


def _parse_instance(node: XmlNode) -> InstanceDecl:
    element_id = _require(node, "id")
    class_name = _require(node, "class")
    sets = []
    for child in node.children:
        if child.tag != "set":
            _fail(child, f"unknown element <{child.tag}> under <instance>")
        attr = _require(child, "attr")
        expr, text = _expr(child, "expr")
        sets.append((attr, expr, text))
    return InstanceDecl(element_id, class_name, tuple(sets), line=node.line)


def _parse_binds(node: XmlNode) -> tuple[tuple[str, str], ...]:
    binds = []
    for child in node.children:
        if child.tag == "bind":
            binds.append((_require(child, "name"), _require(child, "class")))
    return tuple(binds)


def _parse_actions(node: XmlNode) -> tuple:
    actions = []
    for child in node.children:
        if child.tag == "set":
            target = _require(child, "target")
            if target.count(".") != 1:
                _fail(child, f"set target must be name.attr, got {target!r}")
            obj, attr = target.split(".")
            expr, text = _expr(child, "expr")
            actions.append(SetAction(obj, attr, expr, text, line=child.line))
        elif child.tag == "notify":
            severity = child.attrs.get("severity", "info")
            if severity not in SEVERITIES:
                _fail(child, f"severity must be one of {list(SEVERITIES)}, got {severity!r}")
            actions.append(NotifyAction(severity, _require(child, "message"), line=child.line))
        else:
            _fail(child, f"unknown action <{child.tag}>")
    return tuple(actions)


def _parse_rule(node: XmlNode) -> ActionRule:
    rule_id = _require(node, "id")
    binds = _parse_binds(node)
    condition = condition_text = hysteresis = None
    then_actions: tuple = ()
    else_actions: tuple = ()
    for child in node.children:
        if child.tag == "bind":
            continue
        if child.tag == "when":
            if condition is not None or hysteresis is not None:
                _fail(child, "rule already has a condition")
            condition, condition_text = _expr(child, "expr")
        elif child.tag == "hysteresis":
            if condition is not None or hysteresis is not None:
                _fail(child, "rule already has a condition")
            metric, metric_text = _expr(child, "metric")
            on, _ = _expr(child, "on")
            off = band = None
            if "off" in child.attrs and "band" in child.attrs:
                _fail(child, "<hysteresis> takes either 'off' or 'band', not both")
            if "off" in child.attrs:
                off, _ = _expr(child, "off")
            elif "band" in child.attrs:
                band, _ = _expr(child, "band")
            else:
                _fail(child, "<hysteresis> needs an 'off' or 'band' attribute")
            hysteresis = Hysteresis(metric, on, off, band, metric_text, line=child.line)
        elif child.tag == "then":
            then_actions = _parse_actions(child)
        elif child.tag == "else":
            else_actions = _parse_actions(child)
        else:
            _fail(child, f"unknown element <{child.tag}> under <rule>")
    if condition is None and hysteresis is None:
        _fail(node, f"rule {rule_id!r} needs a <when> or <hysteresis> condition")
    return ActionRule(
        rule_id, binds, condition, condition_text, hysteresis,
        then_actions, else_actions, line=node.line,
    )


def _parse_machine(node: XmlNode) -> StateMachineDef:
    machine_id = _require(node, "id")
    binds = _parse_binds(node)
    states: list[str] = []
    initial = None
    transitions = []
    for child in node.children:
        if child.tag == "bind":
            continue
        if child.tag == "state":
            name = _require(child, "name")
            if name in states:
                _fail(child, f"state {name!r} declared twice")
            states.append(name)
            if child.attrs.get("initial") == "true":
                if initial is not None:
                    _fail(child, "more than one initial state")
                initial = name
        elif child.tag == "transition":
            guard, guard_text = _expr(child, "guard")
            transitions.append(Transition(
                _require(child, "from"), _require(child, "to"),
                guard, guard_text, _parse_actions(child), line=child.line,
            ))
        else:
            _fail(child, f"unknown element <{child.tag}> under <stateMachine>")
    if initial is None:
        _fail(node, f"state machine {machine_id!r} has no initial state")
    return StateMachineDef(
        machine_id, binds, tuple(states), initial, tuple(transitions), line=node.line
    )


def parse_scenario(text: str) -> ScenarioDoc:
    """Parse a scenario document. Pure; structural problems raise."""
    root = parse_xml(text)
    if root.tag != "scenario":
        _fail(root, f"expected root <scenario>, got <{root.tag}>")
    classes, instances, rules, machines = [], [], [], []
    for node in root.children:
        if node.tag == "class":
            classes.append(_parse_class(node))
        elif node.tag == "instance":
            instances.append(_parse_instance(node))
        elif node.tag == "rule":
            rules.append(_parse_rule(node))
        elif node.tag == "stateMachine":
            machines.append(_parse_machine(node))
        else:
            _fail(node, f"unknown element <{node.tag}> under <scenario>")
    return ScenarioDoc(tuple(classes), tuple(instances), tuple(rules), tuple(machines), text)


# -- validation ------------------------------------------------------------


def _assignable(value_type: str, attr: AttrDef) -> bool:
    target = "String" if attr.type == "Enum" else attr.type
    if value_type == target:
        return True
    return value_type == "Int" and target == "Float"


def _check_actions(
    actions: Iterable, schema: dict[str, MetaClass], where: str, out: list[Diagnostic]
) -> None:
    for action in actions:
        if isinstance(action, NotifyAction):
            for raw in _TEMPLATE_RE.findall(action.template):
                try:
                    expr = exprs.parse_expr(raw)
                except exprs.ExprSyntaxError as exc:
                    out.append(Diagnostic(
                        DOC, f"{where}: bad placeholder {{{raw}}}: {exc}", line=action.line
                    ))
                    continue
                _, problems = exprs.infer_type(expr, schema)
                for p in problems:
                    out.append(Diagnostic(
                        DOC, f"{where}: placeholder {{{raw}}}: {p}", line=action.line
                    ))
            continue
        mc = schema.get(action.target_obj)
        if mc is None:
            out.append(Diagnostic(
                DOC, f"{where}: set target {action.target_obj!r} is not bound",
                line=action.line,
            ))
            continue
        ad = mc.attr(action.target_attr)
        if ad is None:
            out.append(Diagnostic(
                DOC,
                f"{where}: class {mc.name!r} has no attribute {action.target_attr!r}",
                line=action.line,
            ))
            continue
        t, problems = exprs.infer_type(action.expr, schema)
        for p in problems:
            out.append(Diagnostic(DOC, f"{where}: {p}", line=action.line))
        if t is not None and not _assignable(t, ad):
            out.append(Diagnostic(
                DOC,
                f"{where}: cannot assign {t} to "
                f"{action.target_obj}.{action.target_attr} ({ad.type})",
                line=action.line,
            ))


def _check_bool(
    expr: exprs.Expr, schema: dict[str, MetaClass], where: str, line: int,
    out: list[Diagnostic],
) -> None:
    t, problems = exprs.infer_type(expr, schema)
    for p in problems:
        out.append(Diagnostic(DOC, f"{where}: {p}", line=line))
    if t is not None and t != "Bool":
        out.append(Diagnostic(DOC, f"{where}: condition must be Bool, got {t}", line=line))


def _check_numeric(
    expr: exprs.Expr, schema: dict[str, MetaClass], where: str, line: int,
    out: list[Diagnostic],
) -> None:
    t, problems = exprs.infer_type(expr, schema)
    for p in problems:
        out.append(Diagnostic(DOC, f"{where}: {p}", line=line))
    if t is not None and t not in ("Int", "Float"):
        out.append(Diagnostic(DOC, f"{where}: expected a number, got {t}", line=line))


def _bind_schema(
    binds, registry: Registry, where: str, line: int, out: list[Diagnostic]
) -> dict[str, MetaClass] | None:
    schema: dict[str, MetaClass] = {}
    for name, class_name in binds:
        if name in schema:
            out.append(Diagnostic(DOC, f"{where}: bind name {name!r} reused", line=line))
            return None
        if not registry.has(class_name):
            out.append(Diagnostic(
                DOC, f"{where}: bind {name!r} names unknown class {class_name!r}", line=line
            ))
            return None
        schema[name] = registry.get(class_name)
    return schema


def validate_scenario(doc: ScenarioDoc) -> list[Diagnostic]:
    """Static checks; an empty result means the document is loadable."""
    out: list[Diagnostic] = []
    registry = Registry()
    for decl in doc.classes:
        if registry.has(decl.name):
            out.append(Diagnostic(DOC, f"class {decl.name!r} declared twice", line=decl.line))
            continue
        try:
            registry.define_class(MetaClass(decl.name, attributes=decl.attrs))
        except ModelError as exc:
            out.append(Diagnostic(DOC, str(exc), line=decl.line))
    if out:
        return out

    counts: dict[str, int] = {}
    seen_ids: set[str] = set()
    for inst in doc.instances:
        if "@" in inst.element_id:
            out.append(Diagnostic(
                DOC, f"instance id {inst.element_id!r} may not contain '@'"
                " (reserved for rule-derived elements)", line=inst.line,
            ))
        if inst.element_id in seen_ids:
            out.append(Diagnostic(
                DOC, f"instance id {inst.element_id!r} declared twice", line=inst.line
            ))
        seen_ids.add(inst.element_id)
        if not registry.has(inst.class_name):
            out.append(Diagnostic(
                DOC, f"instance {inst.element_id!r} names unknown class"
                f" {inst.class_name!r}", line=inst.line,
            ))
            continue
        counts[inst.class_name] = counts.get(inst.class_name, 0) + 1
        mc = registry.get(inst.class_name)
        for attr, expr, text in inst.sets:
            ad = mc.attr(attr)
            if ad is None:
                out.append(Diagnostic(
                    DOC, f"instance {inst.element_id!r}: class {mc.name!r}"
                    f" has no attribute {attr!r}", line=inst.line,
                ))
                continue
            t, problems = exprs.infer_type(expr, {})
            for p in problems:
                out.append(Diagnostic(
                    DOC, f"instance {inst.element_id!r}.{attr}: {p}", line=inst.line
                ))
            if t is not None and not _assignable(t, ad):
                out.append(Diagnostic(
                    DOC, f"instance {inst.element_id!r}: cannot assign {t} to"
                    f" {attr} ({ad.type})", line=inst.line,
                ))
    for decl in doc.classes:
        if decl.cardinality == "1" and counts.get(decl.name, 0) > 1:
            out.append(Diagnostic(
                DOC,
                f"class {decl.name!r} allows one instance,"
                f" {counts[decl.name]} declared",
                line=decl.line,
            ))

    behavior_ids: set[str] = set()
    for rule in doc.rules:
        where = f"rule {rule.rule_id!r}"
        if rule.rule_id in behavior_ids:
            out.append(Diagnostic(DOC, f"{where}: id reused", line=rule.line))
        behavior_ids.add(rule.rule_id)
        schema = _bind_schema(rule.binds, registry, where, rule.line, out)
        if schema is None:
            continue
        if rule.condition is not None:
            _check_bool(rule.condition, schema, where, rule.line, out)
        if rule.hysteresis is not None:
            hz = rule.hysteresis
            _check_numeric(hz.metric, schema, f"{where} metric", hz.line, out)
            _check_numeric(hz.on, schema, f"{where} on-threshold", hz.line, out)
            if hz.off is not None:
                _check_numeric(hz.off, schema, f"{where} off-threshold", hz.line, out)
            if hz.band is not None:
                _check_numeric(hz.band, schema, f"{where} band", hz.line, out)
        _check_actions(rule.then_actions, schema, where, out)
        _check_actions(rule.else_actions, schema, where, out)

    for machine in doc.machines:
        where = f"state machine {machine.machine_id!r}"
        if machine.machine_id in behavior_ids:
            out.append(Diagnostic(DOC, f"{where}: id reused", line=machine.line))
        behavior_ids.add(machine.machine_id)
        schema = _bind_schema(machine.binds, registry, where, machine.line, out)
        if schema is None:
            continue
        for tr in machine.transitions:
            if tr.src not in machine.states or tr.dst not in machine.states:
                out.append(Diagnostic(
                    DOC, f"{where}: transition references unknown state"
                    f" ({tr.src!r} -> {tr.dst!r})", line=tr.line,
                ))
            _check_bool(tr.guard, schema, f"{where} guard", tr.line, out)
            _check_actions(tr.actions, schema, where, out)
    return out


def load_scenario(text: str) -> tuple[Model, "ScenarioEngine"]:
    """Parse, validate, and build the scenario model plus its engine."""
    doc = parse_scenario(text)
    problems = validate_scenario(doc)
    if problems:
        if any("allows one instance" in p.message for p in problems):
            raise CardinalityViolation(problems)
        raise ValidationFailed(problems)
    model = Model(doc.registry(), tag=SCENARIO)
    for inst in doc.instances:
        values = {attr: exprs.eval_expr(expr, {}) for attr, expr, _ in inst.sets}
        model.instantiate(inst.class_name, inst.element_id, initial=values)
    return model, ScenarioEngine(model, doc)


# -- behavior engine -------------------------------------------------------


class ScenarioEngine:
    """Steps the declared behavior over the scenario model.

    State machines run first, then rules, both in declaration order. A rule
    instance is one assignment of bound names to live elements (cartesian
    product in id order); each keeps its own branch memory and machine state.
    """

    def __init__(self, model: Model, doc: ScenarioDoc):
        self.model = model
        self.doc = doc
        self.notifications: list[Notification] = []
        self.diagnostics: list[Diagnostic] = []
        self._branch: dict[tuple, bool] = {}
        self._machine_state: dict[tuple, str] = {}

    # -- introspection ----------------------------------------------------

    def machine_states(self) -> dict[str, str]:
        return {"/".join((mid, *key)): state
                for (mid, key), state in sorted(self._machine_state.items())}

    def rule_branches(self) -> dict[str, bool]:
        return {"/".join((rid, *key)): branch
                for (rid, key), branch in sorted(self._branch.items())}

    # -- console entry points ---------------------------------------------

    def set_plant_name(self, name: str) -> ChangeEvent | None:
        recognizers = self.model.elements_of("Recognizer")
        if not recognizers:
            raise UnknownElement("no Recognizer element in the scenario")
        return self.model.set_attribute(
            recognizers[0].id, "plantName", name, origin="console"
        )

    # -- stepping ---------------------------------------------------------

    def step(self, sim_time_hours: float) -> list[ChangeEvent]:
        """One behavior pass; returns the scenario events it caused."""
        out: list[ChangeEvent] = []
        self.model.subscribe(out.append)
        try:
            for machine in self.doc.machines:
                self._step_machine(machine, sim_time_hours)
            for rule in self.doc.rules:
                self._step_rule(rule, sim_time_hours)
        finally:
            self.model.unsubscribe(out.append)
        return out

    def _instances(self, binds) -> list[tuple[dict, tuple[str, ...]]]:
        pools = []
        for name, class_name in binds:
            pool = self.model.elements_of(class_name)
            if not pool:
                return []
            pools.append([(name, e) for e in pool])
        out = []
        for combo in itertools.product(*pools):
            ctx = {name: elem for name, elem in combo}
            out.append((ctx, tuple(elem.id for _, elem in combo)))
        return out

    def _step_rule(self, rule: ActionRule, t: float) -> None:
        for ctx, key in self._instances(rule.binds):
            mem_key = (rule.rule_id, key)
            prev = self._branch.get(mem_key)
            try:
                branch = self._decide_branch(rule, ctx, prev)
            except exprs.ExprError as exc:
                self._fault(rule.rule_id, key, str(exc))
                continue
            self._branch[mem_key] = branch
            if branch == prev:
                continue
            for action in rule.then_actions if branch else rule.else_actions:
                self._run_action(action, ctx, t, rule.rule_id, key)

    def _decide_branch(self, rule: ActionRule, ctx: dict, prev: bool | None) -> bool:
        if rule.condition is not None:
            return bool(exprs.eval_expr(rule.condition, ctx))
        hz = rule.hysteresis
        metric = exprs.eval_expr(hz.metric, ctx)
        on = exprs.eval_expr(hz.on, ctx)
        if hz.off is not None:
            off = exprs.eval_expr(hz.off, ctx)
        else:
            off = on + exprs.eval_expr(hz.band, ctx)
        if on == off:
            raise exprs.EvalError(
                f"hysteresis thresholds coincide at {on!r} ({hz.metric_text})"
            )
        if off > on:  # activate on a downward crossing of `on`
            if not prev:
                return metric < on
            return metric <= off
        # mirrored: activate on an upward crossing
        if not prev:
            return metric > on
        return metric >= off

    def _step_machine(self, machine: StateMachineDef, t: float) -> None:
        for ctx, key in self._instances(machine.binds):
            mem_key = (machine.machine_id, key)
            state = self._machine_state.setdefault(mem_key, machine.initial)
            for tr in machine.transitions:
                if tr.src != state:
                    continue
                try:
                    fired = bool(exprs.eval_expr(tr.guard, ctx))
                except exprs.ExprError as exc:
                    self._fault(machine.machine_id, key, f"guard failed: {exc}")
                    continue
                if not fired:
                    continue
                for action in tr.actions:
                    self._run_action(action, ctx, t, machine.machine_id, key)
                self._machine_state[mem_key] = tr.dst
                break  # one transition per machine instance per step

    def _run_action(self, action, ctx: dict, t: float, owner: str, key: tuple) -> None:
        if isinstance(action, NotifyAction):
            try:
                message = self._render(action.template, ctx)
            except exprs.ExprError as exc:
                self._fault(owner, key, f"notification template failed: {exc}")
                return
            self.notifications.append(Notification(
                len(self.notifications), t, action.severity, message
            ))
            return
        try:
            value = exprs.eval_expr(action.expr, ctx)
            self.model.set_attribute(
                ctx[action.target_obj].id, action.target_attr, value,
                origin="scenarioEngine",
            )
        except (exprs.ExprError, ModelError) as exc:
            self._fault(owner, key, str(exc))

    def _render(self, template: str, ctx: dict) -> str:
        def sub(match: re.Match) -> str:
            value = exprs.eval_expr(exprs.parse_expr(match.group(1)), ctx)
            if isinstance(value, bool):
                return "true" if value else "false"
            if isinstance(value, float):
                return f"{value:g}"
            return str(value)

        return _TEMPLATE_RE.sub(sub, template)

    def _fault(self, owner: str, key: tuple, message: str) -> None:
        self.diagnostics.append(Diagnostic(
            DOC, message, rule_id=owner, element_id="/".join(key) or None
        ))
