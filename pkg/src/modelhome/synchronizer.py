"""Bidirectional model synchronization driven by mapping rules.

The synchronizer watches both models. Runtime changes are pushed into the
scenario model by evaluating mapping rules: a runtime element that matches a
rule's selector gets a scenario counterpart with the deterministic id
``ruleId@runtimeId`` and a Binding recording the pair. Scenario changes made
by the behavior engine or the console travel the other way through writeback
pairs and end as device writes.

Everything the synchronizer itself writes carries origin ``synchronizer``,
and it ignores events with that origin on intake, so its own mutations can
never circle back as fresh work (echo suppression).

Rules are hot-swappable: ``reload_rules`` validates the candidate set, and on
success atomically replaces the active set and rebuilds all bindings through
a full resync. On validation failure the active set stays untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable

from .devicesim import SimError
from .errors import Diagnostic, ValidationFailed
from .exprs import ExprError, eval_expr, referenced_attrs
from .mapping import MappingRule, RuleSet, validate_rules
from .metamodel import (
    ChangeEvent,
    Model,
    ModelError,
    ModelElement,
    RUNTIME,
    SCENARIO,
    apply_events,
    diff,
)

ORIGIN = "synchronizer"

# Scenario-side origins that may trigger writebacks.
WRITE_ORIGINS = ("scenarioEngine", "console")


@dataclass(frozen=True)
class Binding:
    """One materialized mapping relationship."""

    rule_id: str
    runtime_element_id: str
    scenario_element_id: str


def scenario_id(rule_id: str, runtime_id: str) -> str:
    return f"{rule_id}@{runtime_id}"


class Synchronizer:
    """Owns the rule-derived portion of the scenario model.

    Single logical task: the host tick loop is the only caller, so no
    locking happens here.
    """

    def __init__(self, runtime: Model, scenario: Model, ruleset: RuleSet, writer=None):
        if runtime.tag != RUNTIME or scenario.tag != SCENARIO:
            raise ModelError("synchronizer needs a runtime and a scenario model, in that order")
        self.runtime = runtime
        self.scenario = scenario
        self.writer = writer  # exposes push_write(dev_id, attr, value)
        self.ruleset = ruleset
        self.bindings: dict[tuple[str, str], Binding] = {}
        self._by_scenario: dict[str, Binding] = {}
        self.diagnostics: list[Diagnostic] = []
        self.suppressed_events = 0

    # -- lifecycle --------------------------------------------------------

    def activate(self) -> None:
        """Establish the baseline projection; call once after wiring."""
        self.full_resync()

    def validate(self) -> list[Diagnostic]:
        return validate_rules(self.ruleset, self.runtime.registry, self.scenario.registry)

    def rule(self, rule_id: str) -> MappingRule | None:
        for r in self.ruleset.rules:
            if r.rule_id == rule_id:
                return r
        return None

    # -- runtime -> scenario ----------------------------------------------

    def sync_runtime_to_scenario(self, events: Iterable[ChangeEvent]) -> list[ChangeEvent]:
        """Propagate a batch of runtime changes; returns scenario mutations."""
        changed: dict[str, set[str] | None] = {}  # None means "all attrs"
        deleted: list[str] = []
        for ev in events:
            if ev.model_tag != RUNTIME:
                continue
            if ev.origin == ORIGIN:
                self.suppressed_events += 1
                continue
            if ev.kind == "created":
                changed[ev.element_id] = None
            elif ev.kind == "deleted":
                changed.pop(ev.element_id, None)
                deleted.append(ev.element_id)
            elif ev.kind == "attrChanged" and ev.attr_name is not None:
                seen = changed.setdefault(ev.element_id, set())
                if seen is not None:
                    seen.add(ev.attr_name)

        out: list[ChangeEvent] = []
        self.scenario.subscribe(out.append)
        try:
            for elem_id in deleted:
                for rule in self.ruleset.rules:
                    self._drop_binding(rule.rule_id, elem_id)
            for rule in self.ruleset.rules:
                for elem_id, attrs in sorted(changed.items()):
                    elem = self.runtime.elements.get(elem_id)
                    if elem is None or elem.class_name != rule.source_class:
                        continue
                    if attrs is not None and not (attrs & rule.reads()):
                        continue
                    self._apply_rule(rule, elem, attrs)
        finally:
            self.scenario.unsubscribe(out.append)
        return out

    def _apply_rule(
        self,
        rule: MappingRule,
        elem: ModelElement,
        changed_attrs: set[str] | None,
    ) -> None:
        ctx = {"source": elem, "self": elem}
        try:
            matched = rule.predicate is None or bool(eval_expr(rule.predicate, ctx))
        except ExprError as exc:
            self._fault(rule.rule_id, elem.id, f"predicate failed: {exc}")
            return
        bound = self.bindings.get((rule.rule_id, elem.id))
        if bound is not None and not self.scenario.has(bound.scenario_element_id):
            # counterpart vanished out from under us; rebuild from scratch
            self._forget(bound)
            bound = None
        if not matched:
            if bound is not None:
                self._drop_binding(rule.rule_id, elem.id)
            return

        if bound is None:
            try:
                values = self._evaluate_maps(rule, ctx, rule.attr_maps)
            except (ExprError, ModelError) as exc:
                self._fault(rule.rule_id, elem.id, str(exc))
                return
            sid = scenario_id(rule.rule_id, elem.id)
            if self.scenario.has(sid):
                existing = self.scenario.element(sid)
                if existing.class_name != rule.target_class:
                    self._fault(
                        rule.rule_id, elem.id,
                        f"id {sid!r} is taken by a {existing.class_name}; rule skipped",
                    )
                    return
                for name in sorted(values):
                    self.scenario.set_attribute(sid, name, values[name], origin=ORIGIN)
            else:
                self.scenario.instantiate(rule.target_class, sid, initial=values, origin=ORIGIN)
            self._remember(Binding(rule.rule_id, elem.id, sid))
            return

        # already bound: refresh only the maps that read a changed attr
        maps = rule.attr_maps if changed_attrs is None else tuple(
            am for am in rule.attr_maps
            if referenced_attrs(am.expr, "source") & changed_attrs
        )
        if not maps:
            return
        try:
            values = self._evaluate_maps(rule, ctx, maps)
        except (ExprError, ModelError) as exc:
            self._fault(rule.rule_id, elem.id, str(exc))
            return
        for name in sorted(values):
            self.scenario.set_attribute(
                bound.scenario_element_id, name, values[name], origin=ORIGIN
            )

    def _evaluate_maps(self, rule: MappingRule, ctx, maps) -> dict[str, Any]:
        mc = self.scenario.registry.get(rule.target_class)
        values: dict[str, Any] = {}
        for am in maps:
            values[am.target_attr] = mc.attr(am.target_attr).check(eval_expr(am.expr, ctx))
        return values

    def _drop_binding(self, rule_id: str, runtime_id: str) -> None:
        bound = self.bindings.get((rule_id, runtime_id))
        if bound is None:
            return
        if self.scenario.has(bound.scenario_element_id):
            self.scenario.delete_element(bound.scenario_element_id, origin=ORIGIN)
        self._forget(bound)

    # -- scenario -> runtime ----------------------------------------------

    def sync_scenario_to_runtime(self, events: Iterable[ChangeEvent]) -> int:
        """Carry scenario writes back to devices. Returns the write count."""
        writes = 0
        for ev in events:
            if ev.model_tag != SCENARIO or ev.kind != "attrChanged":
                continue
            if ev.origin == ORIGIN:
                self.suppressed_events += 1
                continue
            if ev.origin not in WRITE_ORIGINS:
                continue
            bound = self._by_scenario.get(ev.element_id)
            if bound is None:
                continue
            rule = self.rule(bound.rule_id)
            if rule is None or rule.direction != "bidirectional":
                continue
            for wb in rule.writebacks:
                if wb.target_attr != ev.attr_name:
                    continue
                runtime_elem = self.runtime.elements.get(bound.runtime_element_id)
                if runtime_elem is None:
                    continue
                dev_id = runtime_elem.attrs.get("dev_id") or bound.runtime_element_id
                try:
                    self.writer.push_write(dev_id, wb.source_attr, ev.new_value)
                    writes += 1
                except (SimError, ModelError) as exc:
                    self._fault(bound.rule_id, ev.element_id, f"writeback failed: {exc}")
        return writes

    # -- rule reload -------------------------------------------------------

    def reload_rules(self, ruleset: RuleSet) -> int:
        """Swap the active rules; all-or-nothing. Returns the new version."""
        problems = validate_rules(ruleset, self.runtime.registry, self.scenario.registry)
        if problems:
            raise ValidationFailed(problems)
        if ruleset.version <= self.ruleset.version:
            ruleset = ruleset.with_version(self.ruleset.version + 1)
        self.ruleset = ruleset
        self.full_resync()
        return self.ruleset.version

    # -- resync ------------------------------------------------------------

    def full_resync(self) -> list[ChangeEvent]:
        """Force the rule-derived scenario portion to match the projection."""
        projection, bindings = self._project()
        target = Model(self.scenario.registry, tag=SCENARIO)
        target.root_id = self.scenario.root_id
        derived = {b.scenario_element_id for b in self.bindings.values()}
        for elem in self.scenario.elements.values():
            if elem.id in derived or elem.id in projection:
                continue
            target.instantiate(
                elem.class_name, elem.id, initial=dict(elem.attrs),
                root=(elem.id == self.scenario.root_id),
            )
        for sid in sorted(projection):
            class_name, attrs = projection[sid]
            target.instantiate(class_name, sid, initial=attrs)
        for elem in self.scenario.elements.values():
            if not target.has(elem.id):
                continue
            for name, ids in elem.refs.items():
                target.set_reference(elem.id, name, [i for i in ids if target.has(i)])

        events = diff(self.scenario, target, origin=ORIGIN)
        apply_events(self.scenario, events)
        self.bindings = bindings
        self._by_scenario = {
            b.scenario_element_id: b for b in bindings.values()
        }
        return events

    def _project(self) -> tuple[dict[str, tuple[str, dict]], dict[tuple[str, str], Binding]]:
        """Evaluate every rule against the whole runtime model.

        Pairs that fault keep their current scenario element (if bound) so a
        bad rule degrades to staleness instead of deletion.
        """
        projection: dict[str, tuple[str, dict]] = {}
        bindings: dict[tuple[str, str], Binding] = {}
        for rule in self.ruleset.rules:
            for elem in self.runtime.elements_of(rule.source_class):
                ctx = {"source": elem, "self": elem}
                try:
                    if rule.predicate is not None and not bool(eval_expr(rule.predicate, ctx)):
                        continue
                    values = self._evaluate_maps(rule, ctx, rule.attr_maps)
                except (ExprError, ModelError) as exc:
                    self._fault(rule.rule_id, elem.id, str(exc))
                    old = self.bindings.get((rule.rule_id, elem.id))
                    if old is not None and self.scenario.has(old.scenario_element_id):
                        kept = self.scenario.element(old.scenario_element_id)
                        projection[old.scenario_element_id] = (
                            kept.class_name, dict(kept.attrs)
                        )
                        bindings[(rule.rule_id, elem.id)] = old
                    continue
                sid = scenario_id(rule.rule_id, elem.id)
                projection[sid] = (rule.target_class, values)
                bindings[(rule.rule_id, elem.id)] = Binding(rule.rule_id, elem.id, sid)
        return projection, bindings

    # -- bookkeeping -------------------------------------------------------

    def _remember(self, binding: Binding) -> None:
        self.bindings[(binding.rule_id, binding.runtime_element_id)] = binding
        self._by_scenario[binding.scenario_element_id] = binding

    def _forget(self, binding: Binding) -> None:
        self.bindings.pop((binding.rule_id, binding.runtime_element_id), None)
        self._by_scenario.pop(binding.scenario_element_id, None)

    def _fault(self, rule_id: str, element_id: str, message: str) -> None:
        self.diagnostics.append(
            Diagnostic("sync", message, rule_id=rule_id, element_id=element_id)
        )
