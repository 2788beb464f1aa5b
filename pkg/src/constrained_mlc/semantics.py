"""Brute-force logic oracles: violations, supportedness, minimality, stable models.

Everything here works rule by rule on plain Python sets and scalars, without
the compiled circuit, so it can serve as ground truth for it.
"""

from __future__ import annotations

from itertools import combinations
from typing import Iterable

import numpy as np

from .rules import Rule, RuleSet
from .strata import NotStratifiedError, check_stratified, build_dependency_graph

ClassSet = frozenset


def as_class_set(x) -> frozenset[int]:
    """Accept an iterable of class indices or a 0/1 numpy vector."""
    if isinstance(x, np.ndarray):
        return frozenset(int(i) for i in np.flatnonzero(x))
    return frozenset(int(i) for i in x)


def body_holds(r: Rule, m: frozenset[int]) -> bool:
    return r.body_pos <= m and not (r.body_neg & m)


def check_logical_violation(rs: RuleSet, predicted) -> list[Rule]:
    m = as_class_set(predicted)
    return [r for r in rs.rules if body_holds(r, m) and r.head not in m]


def is_coherent(rs: RuleSet, predicted) -> bool:
    return not check_logical_violation(rs, predicted)


def rule_body_value(r: Rule, scores) -> float:
    vals = [float(scores[b]) for b in sorted(r.body_pos)] + [1.0 - float(scores[b]) for b in sorted(r.body_neg)]
    return min(vals, default=1.0)


def check_constraint_violation(rs: RuleSet, scores) -> list[Rule]:
    """Rules whose body value strictly exceeds the head's score."""
    s = np.asarray(scores, dtype=np.float64)
    return [r for r in rs.rules if rule_body_value(r, s) > s[r.head]]


def check_supported(rs: RuleSet, base, m) -> bool:
    base, m = as_class_set(base), as_class_set(m)
    for a in m - base:
        if not any(r.head == a and body_holds(r, m) for r in rs.rules):
            return False
    return True


def closure(rs: RuleSet, base) -> frozenset[int]:
    """Grow ``base`` by firing rules until nothing new fires."""
    m = set(as_class_set(base))
    changed = True
    while changed:
        changed = False
        for r in rs.rules:
            if r.head not in m and body_holds(r, frozenset(m)):
                m.add(r.head)
                changed = True
    return frozenset(m)


def least_model(rules: Iterable[Rule], base=()) -> frozenset[int]:
    """Smallest superset of ``base`` closed under definite rules."""
    rules = list(rules)
    m = set(as_class_set(base))
    changed = True
    while changed:
        changed = False
        for r in rules:
            if r.head not in m and r.body_pos <= m:
                m.add(r.head)
                changed = True
    return frozenset(m)


def reduct(rules: Iterable[Rule], m) -> list[Rule]:
    m = as_class_set(m)
    return [Rule(r.head, r.body_pos) for r in rules if not (r.body_neg & m)]


def is_stable_model(rs: RuleSet, m) -> bool:
    m = as_class_set(m)
    return least_model(reduct(rs.rules, m)) == m


def independent_levels(rs: RuleSet) -> list[int]:
    """Class levels by relaxation: a head sits at or above its positive body
    atoms and strictly above its negated ones. Raises if no levels exist."""
    n = rs.num_classes
    level = [1] * n
    for _ in range(n + 1):
        changed = False
        for r in rs.rules:
            need = max([level[b] for b in r.body_pos] + [level[b] + 1 for b in r.body_neg], default=1)
            if need > level[r.head]:
                level[r.head] = need
                changed = True
        if not changed:
            return level
    check = check_stratified(build_dependency_graph(rs))
    raise NotStratifiedError(list(check.cycle or []), list(rs.classes.names))


def stable_model(rs: RuleSet, facts=()) -> frozenset[int]:
    """Stable model of ``rs`` plus facts, built stratum by stratum from reducts."""
    level = independent_levels(rs)
    m = as_class_set(facts)
    for i in range(1, max(level, default=1) + 1):
        stratum = [r for r in rs.rules if level[r.head] == i]
        m = least_model(reduct(stratum, m), m)
    return m


def check_minimal(rs: RuleSet, base, m) -> bool:
    base, m = as_class_set(base), as_class_set(m)
    if len(rs.classes) > 20:
        raise ValueError("minimality check limited to 20 classes")
    if not base <= m:
        return False
    extra = sorted(m - base)
    for k in range(len(extra)):
        for sub in combinations(extra, k):
            if is_coherent(rs, base | frozenset(sub)):
                return False
    return True


def check_grounded(rs: RuleSet, base, m) -> bool:
    """True when every class of ``m`` outside ``base`` is derived from ``base``
    by a finite chain of rules whose negated atoms are all absent from ``m``.

    Plain supportedness only asks for one rule per class with its body true
    in ``m``, which admits circular support (``A -> B``, ``B -> A``).
    """
    base, m = as_class_set(base), as_class_set(m)
    return base <= m and least_model(reduct(rs.rules, m), base) == m


def sets_with_properties(rs: RuleSet, base, grounded: bool = False) -> list[frozenset[int]]:
    """All sets extending ``base`` that are coherent, supported and minimal.

    With ``grounded`` the support must also be grounded in ``base``.
    """
    base = as_class_set(base)
    rest = [c for c in range(rs.num_classes) if c not in base]
    found = []
    for k in range(len(rest) + 1):
        for sub in combinations(rest, k):
            m = base | frozenset(sub)
            if not (is_coherent(rs, m) and check_supported(rs, base, m)):
                continue
            if grounded and not check_grounded(rs, base, m):
                continue
            if check_minimal(rs, base, m):
                found.append(m)
    return found


def fixpoint_scores(rs: RuleSet, h) -> np.ndarray:
    """Least solution of ``m_A = max(h_A, body values of A's rules)``.

    Iterates each level to a fixed point over the original rules, lower
    levels first, starting from ``h``.
    """
    level = independent_levels(rs)
    m = np.array(h, dtype=np.float64)
    for i in range(1, max(level, default=1) + 1):
        stratum = [r for r in rs.rules if level[r.head] == i]
        changed = True
        while changed:
            changed = False
            for r in stratum:
                v = rule_body_value(r, m)
                if v > m[r.head]:
                    m[r.head] = v
                    changed = True
    return m


def scalar_targets(circuit, h, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class loss targets from the rule-by-rule definitions.

    Returns ``(plus, minus, selected)``: the value used when a class is
    labelled 1, when labelled 0, and the one its actual label selects.
    Lower-stratum body atoms read ``plus`` or ``minus`` depending on the
    polarity of the atom and of the rule being scored.
    """
    h = [float(v) for v in h]
    y = [int(v) for v in y]
    n = len(h)
    plus = list(h)
    minus = list(h)
    for i, st in enumerate(circuit.strata, start=1):
        here = {c for c in range(n) if circuit.class_stratum[c] == i}
        new_plus, new_minus = {}, {}
        for a in sorted({r.head for r in st.rules}):
            best_p, best_m = h[a], h[a]
            for r in (r for r in st.rules if r.head == a):
                tp, tm = [], []
                for b in sorted(r.body_pos):
                    vp = h[b] if b in here else plus[b]
                    vm = h[b] if b in here else minus[b]
                    tp.append(vp * y[b])
                    tm.append(vm * (1 - y[b]) + y[b])
                for b in sorted(r.body_neg):
                    tp.append((1.0 - minus[b]) * (1 - y[b]))
                    tm.append((1.0 - plus[b]) * y[b] + (1 - y[b]))
                best_p = max(best_p, min(tp, default=1.0))
                best_m = max(best_m, min(tm, default=1.0))
            new_plus[a], new_minus[a] = best_p, best_m
        for a in new_plus:
            plus[a], minus[a] = new_plus[a], new_minus[a]
    sel = [plus[a] if y[a] == 1 else minus[a] for a in range(n)]
    return np.array(plus), np.array(minus), np.array(sel)
