"""Classes, normal rules and the textual rule language.

A rules document holds one rule per line::

    # comments start with '#'
    class: Extra            # declare a class that no rule mentions
    A1, A2 -> A             # definite rule
    A, !A1 -> A2            # '!' negates a body atom
    -> A                    # fact

Hierarchies use a separate format, one ``CHILD < PARENT`` pair per line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

_FORBIDDEN = re.compile(r"\s|,|!|#|->")
_CLASS_DECL = re.compile(r"^class\s*:")


class RuleSyntaxError(ValueError):
    """A malformed rules or hierarchy document."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class HierarchyCycleError(ValueError):
    pass


def check_class_name(name: str) -> None:
    if not name or _FORBIDDEN.search(name):
        raise ValueError(f"invalid class identifier {name!r}")


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        index = {}
        for i, name in enumerate(names):
            check_class_name(name)
            if name in index:
                raise ValueError(f"duplicate class {name!r}")
            index[name] = i
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i: int) -> str:
        return self.names[i]

    def __contains__(self, name: object) -> bool:
        return name in self.index


@dataclass(frozen=True)
class Rule:
    """``body_pos, !body_neg -> head`` over class indices."""

    head: int
    body_pos: frozenset[int] = frozenset()
    body_neg: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "body_pos", frozenset(self.body_pos))
        object.__setattr__(self, "body_neg", frozenset(self.body_neg))

    @property
    def is_fact(self) -> bool:
        return not self.body_pos and not self.body_neg

    @property
    def is_definite(self) -> bool:
        return not self.body_neg

    @property
    def body(self) -> frozenset[tuple[int, bool]]:
        """Body as a set of ``(class, positive)`` literals."""
        return frozenset([(b, True) for b in self.body_pos] + [(b, False) for b in self.body_neg])

    def sort_key(self) -> tuple:
        return (self.head, sorted(self.body_pos), sorted(self.body_neg))

    def format(self, classes: ClassTable) -> str:
        lits = [classes[b] for b in sorted(self.body_pos)]
        lits += ["!" + classes[b] for b in sorted(self.body_neg)]
        body = ", ".join(lits)
        return f"{body} -> {classes[self.head]}" if body else f"-> {classes[self.head]}"


@dataclass(frozen=True)
class RuleSet:
    classes: ClassTable
    rules: tuple[Rule, ...] = ()

    def __post_init__(self):
        rules = tuple(self.rules)
        object.__setattr__(self, "rules", rules)
        n = len(self.classes)
        seen = set()
        for r in rules:
            for c in (r.head, *r.body_pos, *r.body_neg):
                if not 0 <= c < n:
                    raise ValueError(f"rule references unknown class index {c}")
            if r in seen:
                raise ValueError(f"duplicate rule {r.format(self.classes)!r}")
            seen.add(r)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def is_definite(self) -> bool:
        return all(r.is_definite for r in self.rules)

    def is_hierarchy(self) -> bool:
        """Every rule is ``B -> A`` with a single positive body atom."""
        return all(len(r.body_pos) == 1 and not r.body_neg for r in self.rules)

    def rules_with_head(self, head: int) -> list[Rule]:
        return [r for r in self.rules if r.head == head]

    def with_facts(self, heads: Iterable[int]) -> "RuleSet":
        """Add ``-> A`` for every given class not already a fact."""
        extra = [Rule(a) for a in sorted(set(heads)) if Rule(a) not in set(self.rules)]
        return RuleSet(self.classes, self.rules + tuple(extra))

    def format_rule(self, r: Rule) -> str:
        return r.format(self.classes)


def _split_body(body: str, lineno: int, offset: int) -> list[tuple[str, bool, int]]:
    out = []
    pos = 0
    for part in body.split(","):
        col = offset + pos + (len(part) - len(part.lstrip())) + 1
        pos += len(part) + 1
        lit = part.strip()
        if not lit:
            raise RuleSyntaxError("empty literal in rule body", lineno, col)
        positive = True
        if lit.startswith("!"):
            positive = False
            lit = lit[1:].strip()
        if not lit or _FORBIDDEN.search(lit):
            raise RuleSyntaxError(f"invalid class identifier {lit!r}", lineno, col)
        out.append((lit, positive, col))
    return out


def parse_rules(text: str) -> RuleSet:
    """Parse a rules document into a :class:`RuleSet`.

    Classes are indexed in order of first appearance (``class:`` lines count
    as appearances) and rules keep their file order.
    """
    names: list[str] = []
    index: dict[str, int] = {}

    def intern(name: str) -> int:
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    parsed: list[tuple[Rule, int]] = []
    seen: dict[Rule, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        stripped = line.strip()
        lead = len(line) - len(line.lstrip())
        if _CLASS_DECL.match(stripped):
            decl = stripped.split(":", 1)[1]
            offset = lead + stripped.index(":") + 1
            for name, positive, col in _split_body(decl, lineno, offset):
                if not positive:
                    raise RuleSyntaxError("class declarations cannot be negated", lineno, col)
                intern(name)
            continue
        if line.count("->") != 1:
            col = line.find("->", line.find("->") + 2) + 1 if "->" in line else lead + 1
            raise RuleSyntaxError("expected exactly one '->'", lineno, max(col, 1))
        arrow = line.index("->")
        body_text, head_text = line[:arrow], line[arrow + 2 :]
        head = head_text.strip()
        head_col = arrow + 3 + (len(head_text) - len(head_text.lstrip()))
        if not head:
            raise RuleSyntaxError("missing rule head", lineno, head_col)
        if head.startswith("!"):
            raise RuleSyntaxError("rule head cannot be negated", lineno, head_col)
        if _FORBIDDEN.search(head):
            raise RuleSyntaxError(f"invalid class identifier {head!r}", lineno, head_col)
        lits = _split_body(body_text, lineno, 0) if body_text.strip() else []
        pos: list[int] = []
        neg: list[int] = []
        for name, positive, col in lits:
            idx = intern(name)
            if idx in pos or idx in neg:
                what = "both positive and negative" if (idx in pos) != positive else "repeated"
                raise RuleSyntaxError(f"atom {name!r} is {what} in one body", lineno, col)
            (pos if positive else neg).append(idx)
        rule = Rule(intern(head), frozenset(pos), frozenset(neg))
        if rule in seen:
            raise RuleSyntaxError(f"duplicate rule (first on line {seen[rule]})", lineno, lead + 1)
        seen[rule] = lineno
        parsed.append((rule, lineno))
    return RuleSet(ClassTable(tuple(names)), tuple(r for r, _ in parsed))


def serialize_rules(rs: RuleSet) -> str:
    lines = [f"class: {name}" for name in rs.classes]
    lines += [rs.format_rule(r) for r in rs.rules]
    return "\n".join(lines) + ("\n" if lines else "")


def hierarchy_to_rules(edges: Sequence[tuple[str, str]], classes: Sequence[str] = ()) -> RuleSet:
    """One ``child -> parent`` rule per subclass edge; rejects cycles."""
    names = list(dict.fromkeys([*classes, *(n for e in edges for n in e)]))
    table = ClassTable(tuple(names))
    succ: dict[int, list[int]] = {i: [] for i in range(len(names))}
    rules = []
    for child, parent in edges:
        c, p = table.index[child], table.index[parent]
        succ[c].append(p)
        rules.append(Rule(p, frozenset([c])))
    cycle = _find_cycle(succ)
    if cycle:
        raise HierarchyCycleError("hierarchy cycle: " + " < ".join(names[i] for i in cycle))
    return RuleSet(table, tuple(rules))


def _find_cycle(succ: dict[int, list[int]]) -> list[int] | None:
    color = dict.fromkeys(succ, 0)
    for root in succ:
        if color[root]:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                color[node] = 2
            elif color[nxt] == 1:
                return path[path.index(nxt) :] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(succ[nxt])))
    return None


def parse_hierarchy(text: str) -> list[tuple[str, str]]:
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if line.count("<") != 1:
            raise RuleSyntaxError("expected 'CHILD < PARENT'", lineno)
        child, parent = (s.strip() for s in line.split("<"))
        for name, col in ((child, 1), (parent, line.index("<") + 2)):
            if not name or _FORBIDDEN.search(name):
                raise RuleSyntaxError(f"invalid class identifier {name!r}", lineno, col)
        edges.append((child, parent))
    return edges
