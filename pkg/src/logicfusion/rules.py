"""Rule DSL: parsing, validation and serialization of first-order clauses.

A ruleset file is line oriented::

    # comment
    seg_B(X) & prev(X,Z) => seg_O(Z)
    entity_person(X) & rel_live_in(X,Z) => entity_location(Z) @ 0.9

``&`` is conjunction, ``|`` disjunction, ``!`` negation.  ``|`` binds tighter
than ``&``, so a body is a conjunction of disjunctive groups:
``a(X) & b(X) | c(X) => h(X)`` reads ``a(X) & (b(X) | c(X)) => h(X)``.
The head is a single positive atom.  An optional ``@ w`` gives the initial
rule confidence, a number strictly between 0 and 1.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

__all__ = [
    "Atom",
    "DEFAULT_WEIGHT_RAW",
    "Literal",
    "PredicateSchema",
    "Rule",
    "RuleSyntaxError",
    "Term",
    "load_schema",
    "parse_schema",
    "parse_ruleset",
    "serialize",
    "validate",
]

DEFAULT_WEIGHT_RAW = 2.0

SEGMENTATION = "segmentation"
ENTITY = "entity-type"
RELATION = "relation"
AUXILIARY = "auxiliary"
CATEGORIES = (SEGMENTATION, ENTITY, RELATION, AUXILIARY)

# Built-in structural predicate: prev(X, Z) holds iff token Z immediately precedes X.
PREV = "prev"

_VARIABLE = re.compile(r"[A-Z][A-Za-z0-9_]*\Z")
_CONSTANT = re.compile(r"[a-z][A-Za-z0-9_]*\Z")


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Term:
    name: str

    @property
    def is_variable(self) -> bool:
        return self.name[:1].isupper()

    @property
    def kind(self) -> str:
        return "variable" if self.is_variable else "constant"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[Term, ...]

    @property
    def arity(self) -> int:
        return len(self.args)

    def variables(self) -> list[str]:
        return [t.name for t in self.args if t.is_variable]

    def __str__(self) -> str:
        return f"{self.predicate}({','.join(t.name for t in self.args)})"


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False

    def __str__(self) -> str:
        return ("!" if self.negated else "") + str(self.atom)


@dataclass(eq=False)
class Rule:
    """``body => head`` with a learnable raw confidence ``weight_raw``.

    ``body`` is a tuple of disjunctive groups; a group of one literal is a
    plain conjunct.  The effective weight is ``sigmoid(weight_raw)``.
    """

    body: tuple[tuple[Literal, ...], ...]
    head: Atom
    id: int = 0
    weight_raw: Tensor = field(default_factory=lambda: Tensor(DEFAULT_WEIGHT_RAW, requires_grad=True))

    def __post_init__(self):
        if self.weight_raw.name is None:
            self.weight_raw.name = f"rule.{self.id}.weight_raw"

    @property
    def weight(self) -> float:
        return float(1.0 / (1.0 + math.exp(-self.weight_raw.item())))

    @property
    def literals(self) -> list[Literal]:
        return [lit for group in self.body for lit in group]

    def body_variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for lit in self.literals:
            for v in lit.atom.variables():
                seen.setdefault(v)
        return list(seen)

    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.body_variables())
        for v in self.head.variables():
            seen.setdefault(v)
        return list(seen)

    def structure(self) -> tuple:
        """Hashable form used for structural equality (ignores the weight)."""
        return (self.id, self.body, self.head)

    def same_structure(self, other: "Rule") -> bool:
        return self.structure() == other.structure()

    def __str__(self) -> str:
        body = " & ".join(" | ".join(str(lit) for lit in group) for group in self.body)
        return f"{body} => {self.head}"


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


@dataclass
class PredicateSchema:
    """Declared predicates: name -> (arity, category)."""

    predicates: dict[str, tuple[int, str]] = field(default_factory=dict)
    # predicate name -> label it reads (entity type, relation, or B/I/O)
    labels: dict[str, str] = field(default_factory=dict)

    def declare(self, name: str, arity: int, category: str, label: str | None = None) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown predicate category {category!r}")
        self.predicates[name] = (arity, category)
        if label is not None:
            self.labels[name] = label

    def category(self, name: str) -> str:
        return self.predicates[name][1]

    def __contains__(self, name: str) -> bool:
        return name in self.predicates

    @classmethod
    def from_labels(cls, entity_types, relations) -> "PredicateSchema":
        """Standard schema: seg_B/I/O, entity_<type>, rel_<relation>, prev."""
        schema = cls()
        for tag in "BIO":
            schema.declare(f"seg_{tag}", 1, SEGMENTATION, tag)
        for etype in entity_types:
            schema.declare(f"entity_{etype}", 1, ENTITY, etype)
        for rel in relations:
            schema.declare(f"rel_{rel}", 2, RELATION, rel)
        schema.declare(PREV, 2, AUXILIARY)
        return schema

    def entity_types(self) -> list[str]:
        return [self.labels.get(n, n.removeprefix("entity_")) for n, (_, c) in self.predicates.items() if c == ENTITY]

    def relations(self) -> list[str]:
        return [self.labels.get(n, n.removeprefix("rel_")) for n, (_, c) in self.predicates.items() if c == RELATION]

    def label_of(self, name: str) -> str:
        if name in self.labels:
            return self.labels[name]
        cat = self.category(name)
        prefix = {SEGMENTATION: "seg_", ENTITY: "entity_", RELATION: "rel_"}.get(cat, "")
        return name.removeprefix(prefix)

    def dumps(self) -> str:
        return "".join(f"{name}/{arity} {cat}\n" for name, (arity, cat) in self.predicates.items())


def load_schema(path: str | Path) -> PredicateSchema:
    """Read a schema file of ``name/arity category`` declarations."""
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def parse_schema(text: str) -> PredicateSchema:
    schema = PredicateSchema()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"([A-Za-z][A-Za-z0-9_]*)\s*/\s*(\d+)\s+(\S+)", line)
        if not m:
            raise RuleSyntaxError(f"bad predicate declaration {raw.strip()!r}", lineno, 1)
        name, arity, category = m.group(1), int(m.group(2)), m.group(3)
        if category not in CATEGORIES:
            raise RuleSyntaxError(f"unknown category {category!r}", lineno, m.start(3) + 1)
        schema.declare(name, arity, category)
    return schema


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t]+)
    |(?P<arrow>=>)
    |(?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
    |(?P<name>[A-Za-z][A-Za-z0-9_]*)
    |(?P<punct>[()&|!,@])
    """,
    re.VERBOSE,
)


def _tokenize(line: str, lineno: int) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            tokens.append((value if kind == "punct" else kind, value, pos + 1))
        pos = m.end()
    return tokens


class _LineParser:
    def __init__(self, line: str, lineno: int):
        self.tokens = _tokenize(line, lineno)
        self.pos = 0
        self.lineno = lineno
        self.end_col = len(line) + 1

    def error(self, message: str):
        col = self.tokens[self.pos][2] if self.pos < len(self.tokens) else self.end_col
        raise RuleSyntaxError(message, self.lineno, col)

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def expect(self, kind: str, what: str) -> str:
        if self.peek() != kind:
            found = self.tokens[self.pos][1] if self.pos < len(self.tokens) else "end of line"
            self.error(f"expected {what}, found {found!r}")
        value = self.tokens[self.pos][1]
        self.pos += 1
        return value

    def literal(self) -> Literal:
        negated = False
        if self.peek() == "!":
            self.pos += 1
            negated = True
        return Literal(self.atom(), negated)

    def atom(self) -> Atom:
        name = self.expect("name", "predicate name")
        self.expect("(", "'('")
        args = [self.term()]
        while self.peek() == ",":
            self.pos += 1
            args.append(self.term())
        self.expect(")", "')'")
        return Atom(name, tuple(args))

    def term(self) -> Term:
        name = self.expect("name", "variable or constant")
        return Term(name)

    def rule(self, rule_id: int) -> Rule:
        groups: list[list[Literal]] = [[self.literal()]]
        while self.peek() in ("&", "|"):
            op = self.peek()
            self.pos += 1
            lit = self.literal()
            if op == "|":
                groups[-1].append(lit)
            else:
                groups.append([lit])
        self.expect("arrow", "'=>'")
        if self.peek() == "!":
            self.error("rule head cannot be negated")
        head = self.atom()
        weight_raw = DEFAULT_WEIGHT_RAW
        if self.peek() == "@":
            self.pos += 1
            col = self.tokens[self.pos][2] if self.pos < len(self.tokens) else self.end_col
            value = float(self.expect("number", "rule weight"))
            if not 0.0 < value < 1.0:
                raise RuleSyntaxError(f"rule weight must lie strictly in (0, 1), got {value}", self.lineno, col)
            weight_raw = math.log(value) - math.log1p(-value)
        if self.pos != len(self.tokens):
            self.error("trailing input after rule")
        return Rule(
            body=tuple(tuple(g) for g in groups),
            head=head,
            id=rule_id,
            weight_raw=Tensor(weight_raw, requires_grad=True),
        )


def parse_ruleset(text: str | bytes) -> list[Rule]:
    """Parse a ruleset; ids are assigned in file order starting at 0.

    Raises :class:`RuleSyntaxError` with a 1-based line and column on any
    malformed input.  Unknown predicates are left for :func:`validate`.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            prefix = text[: exc.start]
            line = prefix.count(b"\n") + 1
            col = exc.start - (prefix.rfind(b"\n") + 1) + 1
            raise RuleSyntaxError("invalid UTF-8", line, col) from None
    rules: list[Rule] = []
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.rstrip("\r")
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        rules.append(_LineParser(line, lineno).rule(len(rules)))
    return rules


# ---------------------------------------------------------------------------
# validation / serialization
# ---------------------------------------------------------------------------

_EXPECTED_ARITY = {SEGMENTATION: 1, ENTITY: 1, RELATION: 2, AUXILIARY: None}


def _atom_errors(rule: Rule, atom: Atom, schema: PredicateSchema, where: str) -> list[str]:
    errors = []
    prefix = f"rule {rule.id}"
    for t in atom.args:
        if not (_VARIABLE.match(t.name) or _CONSTANT.match(t.name)):
            errors.append(f"{prefix}: bad term {t.name!r} in {where} atom {atom}")
    if atom.predicate in schema:
        arity, category = schema.predicates[atom.predicate]
    elif atom.predicate == PREV:
        arity, category = 2, AUXILIARY  # built in
    else:
        errors.append(f"{prefix}: undeclared predicate {atom.predicate!r}")
        return errors
    if atom.arity != arity:
        errors.append(
            f"{prefix}: arity mismatch for {atom.predicate!r}: declared {arity}, used with {atom.arity}"
        )
    expected = _EXPECTED_ARITY[category]
    if expected is not None and arity != expected:
        errors.append(f"{prefix}: {category} predicate {atom.predicate!r} must have arity {expected}")
    return errors


def validate(rules: list[Rule], schema: PredicateSchema) -> list[str]:
    """Return every violation found (an empty list means the rules are valid)."""
    errors: list[str] = []
    for rule in rules:
        for lit in rule.literals:
            errors.extend(_atom_errors(rule, lit.atom, schema, "body"))
        errors.extend(_atom_errors(rule, rule.head, schema, "head"))
        if rule.head.predicate == PREV or (
            rule.head.predicate in schema and schema.category(rule.head.predicate) == AUXILIARY
        ):
            errors.append(f"rule {rule.id}: auxiliary predicate {rule.head.predicate!r} cannot be a head")
        body_vars = set(rule.body_variables())
        for v in rule.head.variables():
            if v not in body_vars:
                errors.append(f"rule {rule.id}: unbound head variable {v}")
    return errors


def _format_weight(beta: float) -> str:
    # keep the value parseable once the sigmoid saturates
    return f"{min(max(beta, 1e-12), 1.0 - 1e-12):.12g}"


def serialize(rules: list[Rule], include_weights: bool = False) -> str:
    """Inverse of :func:`parse_ruleset` (one rule per line)."""
    lines = []
    for rule in rules:
        line = str(rule)
        if include_weights:
            line += f" @ {_format_weight(rule.weight)}"
        lines.append(line + "\n")
    return "".join(lines)


def rule_weights(rules: list[Rule]) -> np.ndarray:
    return np.array([r.weight for r in rules])
