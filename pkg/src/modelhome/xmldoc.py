"""Minimal XML loader that keeps line/column positions on every element.

Built straight on expat so parse diagnostics can point at the offending
spot; the rule and scenario documents are small enough that a lightweight
node tree beats ElementTree's position-free one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.parsers import expat


class XmlMalformed(Exception):
    def __init__(self, message: str, line: int, col: int):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}")


@dataclass
class XmlNode:
    tag: str
    attrs: dict[str, str]
    line: int
    col: int
    children: list["XmlNode"] = field(default_factory=list)
    text: str = ""

    def child_tags(self) -> set[str]:
        return {c.tag for c in self.children}

    def find_all(self, tag: str) -> list["XmlNode"]:
        return [c for c in self.children if c.tag == tag]

    def find(self, tag: str) -> "XmlNode | None":
        for c in self.children:
            if c.tag == tag:
                return c
        return None


def parse_xml(text: str) -> XmlNode:
    parser = expat.ParserCreate()
    root: list[XmlNode] = []
    stack: list[XmlNode] = []

    def start(tag, attrs):
        node = XmlNode(tag, dict(attrs), parser.CurrentLineNumber, parser.CurrentColumnNumber + 1)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    def chars(data):
        if stack:
            stack[-1].text += data

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise XmlMalformed(
            expat.errors.messages[exc.code], exc.lineno, exc.offset + 1
        ) from None
    if not root:
        raise XmlMalformed("document has no root element", 1, 1)
    return root[0]
