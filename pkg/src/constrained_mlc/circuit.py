"""Compiled constraint circuits: per-stratum incidence matrices and gather indices."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rules import ClassTable, Rule, RuleSet
from .strata import DEFAULT_CLOSURE_CAP, Stratification, close_all, comp_strata

CIRCUIT_FORMAT = "constrained-mlc-circuit"
CIRCUIT_VERSION = 1


@dataclass(frozen=True)
class Stratum:
    """One stratum of closed rules.

    ``bpos``/``bneg`` are rules x classes body indicators and ``heads`` is the
    classes x rules head incidence matrix. The integer arrays drive the
    evaluator:

    * ``body_idx[j]`` lists the arguments of rule ``j``'s min: positive atoms
      ``k`` (ascending), then negated atoms as ``L + k``, padded with ``2L``.
    * ``head_classes`` are the classes defined here, ascending.
    * ``slots[a]`` lists the rules for ``head_classes[a]`` sorted by their
      ``body_idx`` rows, padded with ``p`` (a constant-zero column). The
      order only decides ties in the max; for hierarchies it is ascending
      subclass index, the same as the descendant gather.
    """

    rules: tuple[Rule, ...]
    bpos: np.ndarray
    bneg: np.ndarray
    heads: np.ndarray
    body_idx: np.ndarray
    head_classes: np.ndarray
    slots: np.ndarray
    rule_head: np.ndarray

    @property
    def num_rules(self) -> int:
        return len(self.rules)


def _build_stratum(rules: tuple[Rule, ...], n: int) -> Stratum:
    p = len(rules)
    bpos = np.zeros((p, n), dtype=np.int8)
    bneg = np.zeros((p, n), dtype=np.int8)
    heads = np.zeros((n, p), dtype=np.int8)
    width = max([len(r.body_pos) + len(r.body_neg) for r in rules], default=0)
    body_idx = np.full((p, max(width, 1)), 2 * n, dtype=np.intp)
    for j, r in enumerate(rules):
        args = sorted(r.body_pos) + [n + b for b in sorted(r.body_neg)]
        body_idx[j, : len(args)] = args
        bpos[j, sorted(r.body_pos)] = 1
        bneg[j, sorted(r.body_neg)] = 1
        heads[r.head, j] = 1
    rule_head = np.array([r.head for r in rules], dtype=np.intp)
    head_classes = np.unique(rule_head)
    per_head = [sorted(np.flatnonzero(rule_head == a), key=lambda j: tuple(body_idx[j])) for a in head_classes]
    slots = np.full((len(head_classes), max([len(x) for x in per_head], default=1)), p, dtype=np.intp)
    for a, js in enumerate(per_head):
        slots[a, : len(js)] = js
    return Stratum(rules, bpos, bneg, heads, body_idx, head_classes, slots, rule_head)


def descendant_mask(rs: RuleSet) -> np.ndarray:
    """``M[i, j] = 1`` iff class j is class i or one of its (transitive) subclasses."""
    n = rs.num_classes
    m = np.eye(n, dtype=bool)
    for r in rs.rules:
        (child,) = r.body_pos
        m[r.head, child] = True
    # Warshall closure; hierarchies are small.
    for k in range(n):
        m |= m[:, [k]] & m[[k], :]
    return m.astype(np.int8)


@dataclass(frozen=True)
class ConstraintCircuit:
    classes: ClassTable
    class_stratum: tuple[int, ...]
    strata: tuple[Stratum, ...]
    source: RuleSet
    hmc_mask: np.ndarray | None = None
    _hmc_index: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_strata(self) -> int:
        return len(self.strata)

    @property
    def is_hmc(self) -> bool:
        return self.hmc_mask is not None

    @property
    def is_definite(self) -> bool:
        return self.source.is_definite()

    def closed_rules(self) -> list[tuple[Rule, ...]]:
        return [s.rules for s in self.strata]

    def hmc_index(self) -> np.ndarray:
        """Descendant gather table: row A is ``[A, other descendants ascending, A...]``."""
        if self.hmc_mask is None:
            raise ValueError("circuit was not compiled from a hierarchy")
        return self._hmc_index

    def describe(self) -> dict:
        names = self.classes.names
        return {
            "classes": list(names),
            "num_strata": self.num_strata,
            "strata": [
                {
                    "stratum": i + 1,
                    "classes": [names[c] for c, s in enumerate(self.class_stratum) if s == i + 1],
                    "closed_rules": len(st.rules),
                    "rules": [r.format(self.classes) for r in st.rules],
                    "bpos_shape": list(st.bpos.shape),
                    "heads_shape": list(st.heads.shape),
                }
                for i, st in enumerate(self.strata)
            ],
            "hmc": self.is_hmc,
        }


def _hmc_gather(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[0]
    lists = [[a] + [b for b in np.flatnonzero(mask[a]) if b != a] for a in range(n)]
    width = max([len(x) for x in lists], default=1)
    idx = np.empty((n, width), dtype=np.intp)
    for a, lst in enumerate(lists):
        idx[a] = lst + [a] * (width - len(lst))
    return idx


def from_stratification(strat: Stratification) -> ConstraintCircuit:
    rs = strat.ruleset
    if strat.closed_strata is None:
        raise ValueError("stratification has no closures")
    n = rs.num_classes
    strata = tuple(_build_stratum(rules, n) for rules in strat.closed_strata)
    mask = descendant_mask(rs) if rs.is_hierarchy() else None
    index = _hmc_gather(mask) if mask is not None else None
    return ConstraintCircuit(rs.classes, strat.class_stratum, strata, rs, mask, index)


def compile_rules(rs: RuleSet, cap: int = DEFAULT_CLOSURE_CAP) -> ConstraintCircuit:
    """Stratify, close every stratum and build the evaluation matrices."""
    return from_stratification(close_all(comp_strata(rs), cap))


def decompile(circuit: ConstraintCircuit) -> list[tuple[Rule, ...]]:
    """Rebuild each stratum's closed rules from its matrices alone."""
    out = []
    for st in circuit.strata:
        rules = []
        for j in range(st.bpos.shape[0]):
            (head,) = np.flatnonzero(st.heads[:, j])
            rules.append(
                Rule(int(head), frozenset(np.flatnonzero(st.bpos[j]).tolist()), frozenset(np.flatnonzero(st.bneg[j]).tolist()))
            )
        out.append(tuple(rules))
    return out


def _rule_json(r: Rule) -> list:
    return [r.head, sorted(r.body_pos), sorted(r.body_neg)]


def _rule_from_json(x: list) -> Rule:
    return Rule(int(x[0]), frozenset(x[1]), frozenset(x[2]))


def circuit_to_json(c: ConstraintCircuit) -> str:
    doc = {
        "format": CIRCUIT_FORMAT,
        "version": CIRCUIT_VERSION,
        "classes": list(c.classes.names),
        "rules": [_rule_json(r) for r in c.source.rules],
        "class_stratum": list(c.class_stratum),
        "strata": [[_rule_json(r) for r in st.rules] for st in c.strata],
        "hmc_mask": c.hmc_mask.tolist() if c.hmc_mask is not None else None,
    }
    return json.dumps(doc, indent=1)


def circuit_from_json(text: str) -> ConstraintCircuit:
    doc = json.loads(text)
    if doc.get("format") != CIRCUIT_FORMAT:
        raise ValueError("not a circuit file")
    if doc.get("version") != CIRCUIT_VERSION:
        raise ValueError(f"unsupported circuit version {doc.get('version')}")
    classes = ClassTable(tuple(doc["classes"]))
    rs = RuleSet(classes, tuple(_rule_from_json(x) for x in doc["rules"]))
    strata = tuple(_build_stratum(tuple(_rule_from_json(x) for x in rules), len(classes)) for rules in doc["strata"])
    mask = np.array(doc["hmc_mask"], dtype=np.int8) if doc["hmc_mask"] is not None else None
    index = _hmc_gather(mask) if mask is not None else None
    return ConstraintCircuit(classes, tuple(doc["class_stratum"]), strata, rs, mask, index)


def save_circuit(c: ConstraintCircuit, path: str | Path) -> None:
    Path(path).write_text(circuit_to_json(c), encoding="utf-8")


def load_circuit(path: str | Path) -> ConstraintCircuit:
    return circuit_from_json(Path(path).read_text(encoding="utf-8"))
