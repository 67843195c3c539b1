"""Shared diagnostic record used by every validating parser and the sync engine."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Diagnostic:
    """One located problem report. ``where`` names the document or subsystem."""

    where: str
    message: str
    line: int | None = None
    col: int | None = None
    rule_id: str | None = None
    element_id: str | None = None

    def location(self) -> str:
        parts = [self.where]
        if self.line is not None:
            parts.append(f"line {self.line}" + (f", col {self.col}" if self.col is not None else ""))
        if self.rule_id is not None:
            parts.append(f"rule '{self.rule_id}'")
        if self.element_id is not None:
            parts.append(f"element '{self.element_id}'")
        return ": ".join(parts)

    def __str__(self) -> str:
        return f"{self.location()}: {self.message}"

    def to_json(self) -> dict:
        return {
            "where": self.where,
            "message": self.message,
            "line": self.line,
            "col": self.col,
            "rule_id": self.rule_id,
            "element_id": self.element_id,
        }


class ValidationFailed(Exception):
    """Raised when a document fails validation; carries the diagnostics."""

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        head = "; ".join(str(d) for d in self.diagnostics[:3])
        more = f" (+{len(self.diagnostics) - 3} more)" if len(self.diagnostics) > 3 else ""
        super().__init__(head + more)
