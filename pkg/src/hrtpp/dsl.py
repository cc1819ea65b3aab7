"""Text syntax for temporal logic rules.

Grammar::

    rule := expr '->' atom
    expr := term (REL term)*          # one precedence level, left-associative
    term := atom | '(' expr ')'
    REL  := 'and' | 'before' | 'after' | 'equal'

Atoms are predicate names from a name table; names may contain spaces and are
matched longest-first. ``B after A`` is read as ``A before B``.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

from .core import (DEFAULT_MAX_PREDICATES, Body, InvalidRuleError, Pred, Relation,
                   RelationKind, Rule, canonicalize_rule, validate_rule)

KEYWORDS = ("and", "before", "after", "equal")
_WEIGHT_RE = re.compile(r"weight\s*=\s*([^\s#]+)")


class RuleSyntaxError(ValueError):
    """Parse failure; ``offset`` is the byte offset into the source line."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.offset = offset
        self.source = source
        super().__init__(f"{message} (at offset {offset})")


class AmbiguousRuleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class _Token:
    kind: str  # 'name', 'rel', 'lpar', 'rpar', 'arrow', 'end'
    text: str
    offset: int
    value: object = None


def _byte_offset(source: str, char_index: int) -> int:
    return len(source[:char_index].encode("utf-8"))


def _at_boundary(source: str, end: int) -> bool:
    return end >= len(source) or source[end].isspace() or source[end] in "()-"


def check_name_table(names: Iterable[str]) -> None:
    for name in names:
        if not name or name != name.strip():
            raise ValueError(f"invalid predicate name {name!r}")
        if any(c in name for c in "()#") or "->" in name:
            raise ValueError(f"predicate name {name!r} contains reserved characters")
        if any(w in KEYWORDS for w in name.split()):
            raise ValueError(f"predicate name {name!r} contains a reserved relation keyword")


def _tokenize(source: str, names: list[tuple[str, int]]) -> list[_Token]:
    tokens = []
    i, n = 0, len(source)
    while i < n:
        c = source[i]
        if c.isspace():
            i += 1
            continue
        off = _byte_offset(source, i)
        if c == "(":
            tokens.append(_Token("lpar", c, off))
            i += 1
            continue
        if c == ")":
            tokens.append(_Token("rpar", c, off))
            i += 1
            continue
        if source.startswith("->", i):
            tokens.append(_Token("arrow", "->", off))
            i += 2
            continue
        kw = next((k for k in KEYWORDS if source.startswith(k, i) and _at_boundary(source, i + len(k))), None)
        if kw is not None:
            tokens.append(_Token("rel", kw, off, kw))
            i += len(kw)
            continue
        for name, type_id in names:
            if source.startswith(name, i) and _at_boundary(source, i + len(name)):
                tokens.append(_Token("name", name, off, type_id))
                i += len(name)
                break
        else:
            m = re.match(r"[^\s()]+", source[i:])
            raise RuleSyntaxError(f"unknown predicate name starting with {m.group(0)!r}", off, source)
    tokens.append(_Token("end", "", _byte_offset(source, n)))
    return tokens


class _Parser:
    def __init__(self, source: str, tokens: list[_Token]):
        self.source = source
        self.tokens = tokens
        self.pos = 0
        self.relations_seen: list[list[str]] = []

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            want = {"name": "predicate name", "rpar": "')'", "arrow": "'->'", "end": "end of rule"}.get(kind, kind)
            got = repr(tok.text) if tok.text else "end of input"
            raise RuleSyntaxError(f"expected {want}, got {got}", tok.offset, self.source)
        self.pos += 1
        return tok

    def expr(self) -> Body:
        node = self.term()
        rels = []
        while self.peek().kind == "rel":
            rel = self.take("rel").value
            rels.append(rel)
            right = self.term()
            if rel == "after":
                node = Relation(RelationKind.BEFORE, right, node)
            else:
                node = Relation(RelationKind(rel), node, right)
        self.relations_seen.append(rels)
        return node

    def term(self) -> Body:
        tok = self.peek()
        if tok.kind == "lpar":
            self.take("lpar")
            node = self.expr()
            self.take("rpar")
            return node
        return Pred(self.take("name").value)


def _sorted_names(name_table: Mapping[str, int]) -> list[tuple[str, int]]:
    check_name_table(name_table)
    return sorted(name_table.items(), key=lambda kv: (-len(kv[0]), kv[0]))


def parse_rule(source: str, name_table: Mapping[str, int],
               max_predicates: int = DEFAULT_MAX_PREDICATES) -> Rule:
    """Parse one rule line into its canonical :class:`Rule`."""
    tokens = _tokenize(source, _sorted_names(name_table))
    p = _Parser(source, tokens)
    body = p.expr()
    arrow = p.take("arrow")
    target = p.take("name").value
    p.take("end")
    if any(len(set(rels)) > 1 for rels in p.relations_seen):
        warnings.warn(f"mixed relations without parentheses are read left-associatively: {source!r}",
                      AmbiguousRuleWarning, stacklevel=2)
    rule = Rule(body, target)
    for tok in tokens:
        if tok is arrow:
            break
        if tok.kind == "name" and tok.value == target:
            raise RuleSyntaxError(f"target {tok.text!r} may not appear in the rule body", tok.offset, source)
    try:
        validate_rule(rule, max_predicates=max_predicates)
    except InvalidRuleError as exc:
        raise RuleSyntaxError(str(exc), arrow.offset, source) from None
    return canonicalize_rule(rule)


def _print_body(body: Body, names: Mapping[int, str]) -> str:
    if isinstance(body, Pred):
        try:
            return names[body.event_type]
        except KeyError:
            raise KeyError(f"no name for event type {body.event_type}") from None
    left = _print_body(body.left, names)
    right = _print_body(body.right, names)
    if isinstance(body.right, Relation):
        right = f"({right})"
    # a same-kind left chain reads back left-associatively without warnings
    if isinstance(body.left, Relation) and body.left.kind != body.kind:
        left = f"({left})"
    return f"{left} {body.kind.value} {right}"


def print_rule(rule: Rule, names: Mapping[int, str]) -> str:
    rule = canonicalize_rule(rule)
    if rule.target not in names:
        raise KeyError(f"no name for event type {rule.target}")
    return f"{_print_body(rule.body, names)} -> {names[rule.target]}"


def default_names(num_types: int) -> list[str]:
    return [f"X{k}" for k in range(1, num_types + 1)]


def name_table(names: list[str]) -> dict[str, int]:
    """Names list (index 0 is type 1) to a name -> type-id map."""
    if len(set(names)) != len(names):
        raise ValueError("duplicate predicate names")
    return {name: k for k, name in enumerate(names, start=1)}


def id_table(names: list[str]) -> dict[int, str]:
    return {k: name for k, name in enumerate(names, start=1)}


def split_comment(line: str) -> tuple[str, float | None]:
    """Strip a trailing ``#`` comment, returning the rule text and any ``weight=``."""
    text, _, comment = line.partition("#")
    weight = None
    m = _WEIGHT_RE.search(comment)
    if m:
        try:
            weight = float(m.group(1))
        except ValueError:
            raise RuleSyntaxError(f"bad weight {m.group(1)!r}", _byte_offset(line, line.index("#")), line) from None
    return text.strip(), weight


def parse_rules_text(text: str, name_table: Mapping[str, int],
                     max_predicates: int = DEFAULT_MAX_PREDICATES) -> list[tuple[Rule, float | None]]:
    """Parse a rules file: one rule per line, blank lines and ``#`` comments allowed.

    Errors are re-raised with the 1-based line number prefixed.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        try:
            body, weight = split_comment(line)
            if not body:
                continue
            out.append((parse_rule(body, name_table, max_predicates), weight))
        except RuleSyntaxError as exc:
            raise RuleSyntaxError(f"line {lineno}: {exc.args[0].rsplit(' (at offset', 1)[0]}",
                                  exc.offset, line) from None
    return out


def format_rules_text(rules: Iterable[Rule], names: Mapping[int, str],
                      weights: Iterable[float] | None = None) -> str:
    rules = list(rules)
    weights = list(weights) if weights is not None else [None] * len(rules)
    lines = []
    for rule, w in zip(rules, weights):
        text = print_rule(rule, names)
        lines.append(text if w is None else f"{text}  # weight={w!r}")
    return "".join(line + "\n" for line in lines)
