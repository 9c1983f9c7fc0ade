"""Text formats for :class:`~structsg.hsa.MergeTree`.

Both formats are lossless.  Similarity and score values are written as exact
rationals (``"1/3"``, ``"0"``) when they are ``Fraction`` and as Python float
reprs (``"0.3333333333333333"``) otherwise; the parser tells them apart by
the presence of a decimal point or exponent.

nested-json::

    {"format": "structsg-hierarchy", "version": 1, "num_leaves": 4,
     "roots": [{"step": 0, "similarity": "1/3", "score": "1/6",
                "children": [{"leaf": 0}, {"leaf": 1}]}, ...]}

newick: one tree per line, each ending in ``;``.  Leaves are bare class ids;
an internal node is ``(left,right)'step|similarity|score'``.
"""

from __future__ import annotations

import json
import re
from fractions import Fraction

from .errors import InputError
from .hsa import MergeStep, MergeTree, Number

FORMATS = ("nested-json", "newick")

_RATIONAL = re.compile(r"^-?\d+(/\d+)?$")


def format_number(x: Number) -> str:
    if isinstance(x, Fraction):
        return str(x)
    return repr(float(x))


def parse_number(text: str) -> Number:
    if _RATIONAL.match(text):
        return Fraction(text)
    try:
        return float(text)
    except ValueError:
        raise InputError(f"bad numeric label {text!r}") from None


def _node_json(tree: MergeTree, node: int, names):
    ch = tree.children(node)
    if ch is None:
        out = {"leaf": node}
        if names is not None:
            out["name"] = names[node]
        return out
    m = tree.merges[node - tree.num_leaves]
    return {
        "step": m.step,
        "similarity": format_number(m.similarity),
        "score": format_number(m.score),
        "children": [_node_json(tree, c, names) for c in ch],
    }


def to_nested_json(tree: MergeTree, names=None) -> str:
    doc = {
        "format": "structsg-hierarchy",
        "version": 1,
        "num_leaves": tree.num_leaves,
        "roots": [_node_json(tree, r, names) for r in tree.roots()],
    }
    return json.dumps(doc, indent=2) + "\n"


def from_nested_json(text: str) -> MergeTree:
    try:
        doc = json.loads(text)
        n = int(doc["num_leaves"])
        roots = doc["roots"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed hierarchy JSON ({exc})") from None
    steps: dict[int, MergeStep] = {}

    def walk(node) -> int:
        if "leaf" in node:
            return int(node["leaf"])
        left, right = (walk(c) for c in node["children"])
        step = int(node["step"])
        steps[step] = MergeStep(step, left, right, parse_number(node["similarity"]),
                                parse_number(node["score"]))
        return n + step

    try:
        for r in roots:
            walk(r)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed hierarchy node ({exc})") from None
    return _finish(n, steps)


def _finish(n: int, steps: dict[int, MergeStep]) -> MergeTree:
    if sorted(steps) != list(range(len(steps))):
        raise InputError("merge steps are not contiguous from 0")
    return MergeTree(n, [steps[i] for i in range(len(steps))])


def _newick_node(tree: MergeTree, node: int) -> str:
    ch = tree.children(node)
    if ch is None:
        return str(node)
    m = tree.merges[node - tree.num_leaves]
    label = f"{m.step}|{format_number(m.similarity)}|{format_number(m.score)}"
    return f"({_newick_node(tree, ch[0])},{_newick_node(tree, ch[1])})'{label}'"


def to_newick(tree: MergeTree) -> str:
    return "".join(_newick_node(tree, r) + ";\n" for r in tree.roots())


class _NewickParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.leaves: list[int] = []
        self.pending: list[tuple[int, int, int, Number, Number]] = []

    def error(self, msg):
        raise InputError(f"newick parse error at offset {self.pos}: {msg}")

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected {ch!r}")
        self.pos += 1

    def node(self):
        """Return ('leaf', id) or ('step', step)."""
        if self.peek() == "(":
            self.pos += 1
            left = self.node()
            self.expect(",")
            right = self.node()
            self.expect(")")
            self.expect("'")
            end = self.text.find("'", self.pos)
            if end < 0:
                self.error("unterminated label")
            parts = self.text[self.pos:end].split("|")
            self.pos = end + 1
            if len(parts) != 3:
                self.error("internal label needs step|similarity|score")
            step = int(parts[0])
            self.pending.append((step, left, right, parse_number(parts[1]), parse_number(parts[2])))
            return ("step", step)
        m = re.compile(r"\d+").match(self.text, self.pos)
        if not m:
            self.error("expected leaf id or '('")
        self.pos = m.end()
        leaf = int(m.group())
        self.leaves.append(leaf)
        return ("leaf", leaf)

    def parse(self) -> MergeTree:
        while True:
            while self.peek() in ("\n", " ", "\r", "\t"):
                self.pos += 1
            if not self.peek():
                break
            self.node()
            self.expect(";")
        n = len(self.leaves)
        if sorted(self.leaves) != list(range(n)):
            raise InputError("newick leaves must be exactly 0..N-1")

        def resolve(ref):
            kind, v = ref
            return v if kind == "leaf" else n + v

        steps = {s: MergeStep(s, resolve(l), resolve(r), sim, sc)
                 for s, l, r, sim, sc in self.pending}
        return _finish(n, steps)


def from_newick(text: str) -> MergeTree:
    return _NewickParser(text).parse()


def export_hierarchy(tree: MergeTree, format: str = "nested-json", names=None) -> str:
    if format == "nested-json":
        return to_nested_json(tree, names)
    if format == "newick":
        return to_newick(tree)
    raise InputError(f"unknown hierarchy format {format!r}; choose from {FORMATS}")


def parse_hierarchy(text: str, format: str = "nested-json") -> MergeTree:
    if format == "nested-json":
        return from_nested_json(text)
    if format == "newick":
        return from_newick(text)
    raise InputError(f"unknown hierarchy format {format!r}; choose from {FORMATS}")
