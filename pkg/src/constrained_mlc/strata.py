"""Dependency graphs, stratification and per-stratum rule closure."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .rules import Rule, RuleSet

DEFAULT_CLOSURE_CAP = 10**6


class NotStratifiedError(ValueError):
    """Raised when the rules have a dependency cycle through negation."""

    def __init__(self, cycle: list[int], names: list[str] | None = None):
        self.cycle = cycle
        shown = [names[c] for c in cycle] if names else [str(c) for c in cycle]
        super().__init__("rules are not stratified; cycle through negation: " + " -> ".join(shown))


class ClosureCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class DependencyGraph:
    nodes: tuple[int, ...]
    pos_edges: frozenset[tuple[int, int]]
    neg_edges: frozenset[tuple[int, int]]

    def successors(self) -> dict[int, list[int]]:
        succ: dict[int, set[int]] = {n: set() for n in self.nodes}
        for u, v in self.pos_edges | self.neg_edges:
            succ[u].add(v)
        return {n: sorted(s) for n, s in succ.items()}


@dataclass(frozen=True)
class StratificationCheck:
    ok: bool
    cycle: tuple[int, ...] | None = None

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class Stratification:
    """Class-to-stratum map plus the rules of every stratum.

    ``class_stratum`` is 1-based. ``strata_rules[i]`` holds indices into
    ``ruleset.rules`` for stratum ``i + 1``; ``closed_strata`` is filled in by
    :func:`close_all`.
    """

    ruleset: RuleSet
    class_stratum: tuple[int, ...]
    strata_rules: tuple[tuple[int, ...], ...]
    closed_strata: tuple[tuple[Rule, ...], ...] | None = None

    @property
    def num_strata(self) -> int:
        return len(self.strata_rules)

    def classes_in(self, i: int) -> list[int]:
        return [c for c, s in enumerate(self.class_stratum) if s == i]

    def stratum_rules(self, i: int) -> list[Rule]:
        return [self.ruleset.rules[j] for j in self.strata_rules[i - 1]]


def build_dependency_graph(rs: RuleSet) -> DependencyGraph:
    pos, neg = set(), set()
    for r in rs.rules:
        pos.update((b, r.head) for b in r.body_pos)
        neg.update((b, r.head) for b in r.body_neg)
    return DependencyGraph(tuple(range(rs.num_classes)), frozenset(pos), frozenset(neg))


def strongly_connected_components(nodes: tuple[int, ...], succ: dict[int, list[int]]) -> list[list[int]]:
    """Iterative Tarjan, visiting roots and successors in ascending order.

    Components come out in reverse topological order of the condensation.
    """
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in sorted(nodes):
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            node, pos = work.pop()
            if pos == 0:
                index[node] = low[node] = counter
                counter += 1
                stack.append(node)
                on_stack.add(node)
            children = succ[node]
            recursed = False
            while pos < len(children):
                child = children[pos]
                pos += 1
                if child not in index:
                    work.append((node, pos))
                    work.append((child, 0))
                    recursed = True
                    break
                if child in on_stack:
                    low[node] = min(low[node], index[child])
            if recursed:
                continue
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                comps.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
    return comps


def _component_of(comps: list[list[int]]) -> dict[int, int]:
    return {n: ci for ci, comp in enumerate(comps) for n in comp}


def _path_within(succ: dict[int, list[int]], start: int, goal: int, allowed: set[int]) -> list[int]:
    prev = {start: start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in succ[node]:
            if nxt in allowed and nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def check_stratified(g: DependencyGraph) -> StratificationCheck:
    """OK, or a cycle ``[u, v, ..., u]`` whose first edge ``u -> v`` is negative."""
    succ = g.successors()
    comps = strongly_connected_components(g.nodes, succ)
    comp_of = _component_of(comps)
    for u, v in sorted(g.neg_edges):
        if comp_of[u] == comp_of[v]:
            allowed = set(comps[comp_of[u]])
            back = _path_within(succ, v, u, allowed) if u != v else [u]
            return StratificationCheck(False, tuple([u] + back))
    return StratificationCheck(True)


def comp_strata(rs: RuleSet) -> Stratification:
    """Fewest-strata stratification from the condensation of the dependency graph.

    A class gets stratum 1 + the largest number of negative edges on any path
    reaching its component.
    """
    g = build_dependency_graph(rs)
    check = check_stratified(g)
    if not check:
        raise NotStratifiedError(list(check.cycle), list(rs.classes.names))
    succ = g.successors()
    comps = strongly_connected_components(g.nodes, succ)
    comp_of = _component_of(comps)
    weight: dict[tuple[int, int], int] = {}
    for (u, v), w in [(e, 0) for e in g.pos_edges] + [(e, 1) for e in g.neg_edges]:
        cu, cv = comp_of[u], comp_of[v]
        if cu != cv:
            weight[(cu, cv)] = max(weight.get((cu, cv), 0), w)
    preds: dict[int, list[tuple[int, int]]] = {c: [] for c in range(len(comps))}
    for (cu, cv), w in weight.items():
        preds[cv].append((cu, w))
    level = [0] * len(comps)
    # Tarjan emits sinks first, so walk backwards for topological order.
    for c in reversed(range(len(comps))):
        level[c] = max((level[p] + w for p, w in preds[c]), default=0)
    class_stratum = tuple(level[comp_of[n]] + 1 for n in g.nodes)
    s = max(class_stratum, default=1)
    strata = [[] for _ in range(s)]
    for j, r in enumerate(rs.rules):
        strata[class_stratum[r.head] - 1].append(j)
    return Stratification(rs, class_stratum, tuple(tuple(x) for x in strata))


def close_stratum(strat: Stratification, i: int, cap: int = DEFAULT_CLOSURE_CAP) -> tuple[Rule, ...]:
    """Closed rule list for stratum ``i`` (1-based).

    Positive body atoms defined in the same stratum are repeatedly replaced by
    the bodies of their defining rules, so one pass over the result gives the
    same values as iterating the stratum to a fixed point. Original rules come
    first, then generated ones in generation order.
    """
    base = strat.stratum_rules(i)
    here = {c for c, s in enumerate(strat.class_stratum) if s == i}
    by_head: dict[int, list[Rule]] = {}
    for r in base:
        by_head.setdefault(r.head, []).append(r)
    seen: set[Rule] = set()
    out: list[Rule] = []
    queue: deque[Rule] = deque()

    def admit(r: Rule) -> None:
        if r in seen:
            return
        seen.add(r)
        queue.append(r)
        if r.head not in r.body_pos:
            out.append(r)
            if len(out) > cap:
                raise ClosureCapError(f"closure of stratum {i} exceeds {cap} rules")

    for r in base:
        admit(r)
    while queue:
        r = queue.popleft()
        if r.head in r.body_pos:
            continue
        for a in sorted(r.body_pos & here):
            rest = r.body_pos - {a}
            for sub in by_head.get(a, ()):
                admit(Rule(r.head, rest | sub.body_pos, r.body_neg | sub.body_neg))

    def subsumed(r: Rule) -> bool:
        for q in by_head.get(r.head, ()):
            if q.body_pos <= r.body_pos and q.body_neg <= r.body_neg and q != r:
                return True
        return False

    return tuple(r for r in out if not subsumed(r))


def close_all(strat: Stratification, cap: int = DEFAULT_CLOSURE_CAP) -> Stratification:
    closed = tuple(close_stratum(strat, i, cap) for i in range(1, strat.num_strata + 1))
    return Stratification(strat.ruleset, strat.class_stratum, strat.strata_rules, closed)


def violates_stratification(rs: RuleSet, class_stratum: tuple[int, ...]) -> list[Rule]:
    """Rules breaking the class-level stratification conditions."""
    bad = []
    for r in rs.rules:
        s = class_stratum[r.head]
        if any(class_stratum[b] > s for b in r.body_pos) or any(class_stratum[b] >= s for b in r.body_neg):
            bad.append(r)
    return bad
