"""Shared generators for random rule sets and score batches."""

from __future__ import annotations

import numpy as np
import pytest

from constrained_mlc.rules import ClassTable, Rule, RuleSet, parse_rules

LCMC_TEXT = "class: A1, A2, A\nA1 -> A\nA2 -> A\nA, !A1 -> A2\n"
EXAMPLE6_TEXT = "A1 -> A\nA2 -> A\nA, !A1 -> A2\nA3 -> A4\n"


def random_stratified(rng: np.random.Generator, n_classes: int, n_rules: int, p_neg: float = 0.3) -> RuleSet:
    """Random program that is stratified by construction.

    Each class gets a hidden level; positive body atoms come from levels at
    or below the head's, negated atoms from strictly lower levels.
    """
    names = tuple(f"C{i}" for i in range(n_classes))
    level = rng.integers(0, 3, size=n_classes)
    rules: list[Rule] = []
    seen = set()
    for _ in range(4 * n_rules):
        if len(rules) == n_rules:
            break
        head = int(rng.integers(n_classes))
        same_or_lower = [c for c in range(n_classes) if level[c] <= level[head] and c != head]
        lower = [c for c in range(n_classes) if level[c] < level[head]]
        k = int(rng.integers(0, 4))
        pos, neg = set(), set()
        for _ in range(k):
            if lower and rng.random() < p_neg:
                neg.add(int(rng.choice(lower)))
            elif same_or_lower:
                pos.add(int(rng.choice(same_or_lower)))
        pos -= neg
        r = Rule(head, frozenset(pos), frozenset(neg))
        if r not in seen:
            seen.add(r)
            rules.append(r)
    return RuleSet(ClassTable(names), tuple(rules))


def random_hierarchy(rng: np.random.Generator, n_classes: int, p_edge: float = 0.35) -> RuleSet:
    """Random DAG: an edge child -> parent only from higher to lower index."""
    names = tuple(f"C{i}" for i in range(n_classes))
    rules = []
    for child in range(1, n_classes):
        for parent in range(child):
            if rng.random() < p_edge:
                rules.append(Rule(parent, frozenset([child])))
    order = rng.permutation(len(rules))
    return RuleSet(ClassTable(names), tuple(rules[i] for i in order))


def random_scores(rng: np.random.Generator, n: int, L: int, ties: bool = False) -> np.ndarray:
    if ties:
        return rng.integers(0, 5, size=(n, L)) / 4.0
    return rng.random((n, L))


@pytest.fixture
def lcmc_rules() -> RuleSet:
    return parse_rules(LCMC_TEXT)


@pytest.fixture
def example6_rules() -> RuleSet:
    return parse_rules(EXAMPLE6_TEXT)


# One summary line per acceptance criterion, built from the marked tests.
_ACCEPTANCE: dict[str, list[tuple[str, bool, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if hasattr(rep, "wasxfail"):
        detail = f"not attainable as stated: {rep.wasxfail}"
    _ACCEPTANCE.setdefault(mark.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0])):
        checks = _ACCEPTANCE[label]
        ok = all(passed for _, passed, _ in checks)
        details = " | ".join(d for _, _, d in checks if d)
        failed = [name for name, passed, _ in checks if not passed]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {sum(p for _, p, _ in checks)}/{len(checks)} checks"
        if details:
            line += f" | {details}"
        if failed:
            line += f" | failed: {', '.join(failed)}"
        terminalreporter.write_line(line)
