"""Forward evaluation of the constraint module and its reverse-mode derivative.

Scores are evaluated stratum by stratum. Inside a stratum every closed rule
takes the min of its body values (``1 - s`` for negated atoms) and each
defined class takes the max of its incoming score and its rule values. The
same pass, fed with label-masked body values, produces the loss targets.

Ties route gradient to the first argument in a fixed order: for a min,
positive atoms by class index, then negated atoms, never padding; for a max,
the class's own incoming score first, then its rules in closed-rule order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .circuit import ConstraintCircuit, Stratum, _hmc_gather

STANDARD_NEGATION = "standard"


class ThresholdWarning(UserWarning):
    pass


def check_negation(negation: str) -> None:
    if negation != STANDARD_NEGATION:
        raise NotImplementedError(f"only standard negation (1 - v) is supported, got {negation!r}")


def as_batch(values, width: int, name: str = "scores", check_range: bool = True) -> tuple[np.ndarray, bool]:
    """Return a 2-D float64 copy-free view and whether the input was a single row."""
    arr = np.asarray(values, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{name} must have {width} columns, got shape {np.shape(values)}")
    if check_range:
        if np.isnan(arr).any():
            raise ValueError(f"{name} contain NaN")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError(f"{name} must lie in [0, 1]")
    return arr, single


def as_labels(values, width: int) -> tuple[np.ndarray, bool]:
    arr, single = as_batch(values, width, "labels")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return arr, single


@dataclass
class EvalTrace:
    """Per-stratum rule values and outputs; ``outputs[0]`` is the input."""

    rule_values: list[np.ndarray]
    outputs: list[np.ndarray]


@dataclass
class _StratumTape:
    body_win: np.ndarray  # N x p, aug column that won each rule's min
    max_win: np.ndarray  # N x heads, 0 = incoming score, k > 0 = slot k-1
    head_y: np.ndarray | None  # N x p label of each rule's head (loss path)


def _body_args(st: Stratum, C: np.ndarray, y: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    n = C.shape[0]
    ones = np.ones((n, 1))
    if y is None:
        aug = np.concatenate([C, 1.0 - C, ones], axis=1)
        return aug[:, st.body_idx], None
    # Body values when the head is labelled 1 ("plus") or 0 ("minus").
    plus = np.concatenate([C * y, (1.0 - C) * (1.0 - y), ones], axis=1)
    minus = np.concatenate([C * (1.0 - y) + y, (1.0 - C) * y + (1.0 - y), ones], axis=1)
    head_y = y[:, st.rule_head]
    args = np.where(head_y[:, :, None] == 1.0, plus[:, st.body_idx], minus[:, st.body_idx])
    return args, head_y


def _stratum_forward(st: Stratum, C: np.ndarray, y: np.ndarray | None, record: bool):
    args, head_y = _body_args(st, C, y)
    n = C.shape[0]
    if record:
        w = args.argmin(axis=2)
        v = np.take_along_axis(args, w[:, :, None], axis=2)[:, :, 0]
    else:
        v = args.min(axis=2)
    padded = np.concatenate([v, np.zeros((n, 1))], axis=1)
    cand = np.concatenate([C[:, st.head_classes, None], padded[:, st.slots]], axis=2)
    out = C.copy()
    tape = None
    if record:
        mw = cand.argmax(axis=2)
        out[:, st.head_classes] = np.take_along_axis(cand, mw[:, :, None], axis=2)[:, :, 0]
        body_win = st.body_idx[np.arange(st.num_rules)[None, :], w]
        tape = _StratumTape(body_win, mw, head_y)
    else:
        out[:, st.head_classes] = cand.max(axis=2)
    return out, v, tape


def _stratum_backward(st: Stratum, tape: _StratumTape, g: np.ndarray, y: np.ndarray | None) -> np.ndarray:
    n, L = g.shape
    p = st.num_rules
    g_in = g.copy()
    gh = g[:, st.head_classes]
    g_in[:, st.head_classes] = np.where(tape.max_win == 0, gh, 0.0)
    gv = np.zeros((n, p + 1))
    rows = np.arange(n)[:, None]
    slot = np.maximum(tape.max_win - 1, 0)
    rule = st.slots[np.arange(len(st.head_classes))[None, :], slot]
    rule = np.where(tape.max_win > 0, rule, p)
    gv[np.broadcast_to(rows, rule.shape), rule] = np.where(tape.max_win > 0, gh, 0.0)
    gv = gv[:, :p]
    width = 2 * L + 1
    flat = (np.arange(n)[:, None] * width + tape.body_win).ravel()
    if y is None:
        gaug = np.bincount(flat, weights=gv.ravel(), minlength=n * width).reshape(n, width)
        return g_in + gaug[:, :L] - gaug[:, L : 2 * L]
    hy = tape.head_y
    gp = np.bincount(flat, weights=(gv * hy).ravel(), minlength=n * width).reshape(n, width)
    gm = np.bincount(flat, weights=(gv * (1.0 - hy)).ravel(), minlength=n * width).reshape(n, width)
    g_in += gp[:, :L] * y - gp[:, L : 2 * L] * (1.0 - y)
    g_in += gm[:, :L] * (1.0 - y) - gm[:, L : 2 * L] * y
    return g_in


class Evaluation:
    """A recorded pass through a circuit that can be differentiated.

    With ``labels`` given the pass computes the label-masked loss targets
    instead of the plain constraint-module output.
    """

    def __init__(self, circuit: ConstraintCircuit, h: np.ndarray, labels: np.ndarray | None = None):
        self.circuit = circuit
        self.labels = labels
        self.tapes: list[_StratumTape] = []
        self.rule_values: list[np.ndarray] = []
        self.outputs = [h]
        C = h
        for st in circuit.strata:
            if st.num_rules:
                C, v, tape = _stratum_forward(st, C, labels, True)
            else:
                v, tape = np.zeros((h.shape[0], 0)), None
            self.tapes.append(tape)
            self.rule_values.append(v)
            self.outputs.append(C)

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]

    def backward(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        for st, tape in zip(reversed(self.circuit.strata), reversed(self.tapes)):
            if tape is not None:
                g = _stratum_backward(st, tape, g, self.labels)
        return g


def _evaluate(circuit: ConstraintCircuit, h: np.ndarray, y: np.ndarray | None) -> np.ndarray:
    C = h
    for st in circuit.strata:
        if st.num_rules:
            C = _stratum_forward(st, C, y, False)[0]
    return C


def cm_forward(circuit: ConstraintCircuit, h, trace: bool = False, negation: str = STANDARD_NEGATION):
    """Coherent scores for one score vector or a batch of rows.

    With ``trace=True`` also returns an :class:`EvalTrace`.
    """
    check_negation(negation)
    arr, single = as_batch(h, circuit.num_classes)
    if trace:
        ev = Evaluation(circuit, arr)
        out = ev.output
        tr = EvalTrace([v[0] if single else v for v in ev.rule_values], [o[0] if single else o for o in ev.outputs])
        return (out[0] if single else out), tr
    out = _evaluate(circuit, arr, None)
    return out[0] if single else out


def cm_forward_dense(circuit: ConstraintCircuit, h) -> np.ndarray:
    """Literal matrix formulation (incidence-matrix products, min/max reductions).

    Slower than :func:`cm_forward`; kept as an independent cross-check.
    """
    arr, single = as_batch(h, circuit.num_classes)
    L = circuit.num_classes
    out = np.empty_like(arr)
    eye = np.eye(L)
    for row in range(arr.shape[0]):
        c = arr[row]
        for st in circuit.strata:
            p = st.num_rules
            if p == 0:
                continue
            bp, bn = st.bpos.astype(float), st.bneg.astype(float)
            J = np.ones((p, L))
            vpos = (bp * c[None, :] + (J - bp)).min(axis=1)
            vneg = (bn * (1.0 - c)[None, :] + (J - bn)).min(axis=1)
            v = np.minimum(vpos, vneg)
            IH = np.concatenate([eye, st.heads.astype(float)], axis=1)
            V = np.concatenate([c, v])
            c = (IH * V[None, :]).max(axis=1)
        out[row] = c
    return out[0] if single else out


def _mask_of(mask_or_circuit) -> np.ndarray:
    if isinstance(mask_or_circuit, ConstraintCircuit):
        if mask_or_circuit.hmc_mask is None:
            raise ValueError("circuit was not compiled from a hierarchy")
        return mask_or_circuit.hmc_mask
    m = np.asarray(mask_or_circuit)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("descendant mask must be square")
    return m


def hmc_gather_index(mask_or_circuit) -> np.ndarray:
    if isinstance(mask_or_circuit, ConstraintCircuit):
        return mask_or_circuit.hmc_index()
    return _hmc_gather(_mask_of(mask_or_circuit))


def cm_forward_hmc(mask, h) -> np.ndarray:
    """``CM_A = max`` of ``h_B`` over A and its descendants ``B``."""
    m = _mask_of(mask)
    arr, single = as_batch(h, m.shape[0])
    out = arr[:, hmc_gather_index(mask)].max(axis=2)
    return out[0] if single else out


def predict(scores, threshold: float = 0.5, circuit: ConstraintCircuit | None = None) -> np.ndarray:
    """Binary labels: 1 where the score is strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if circuit is not None and threshold != 0.5 and not circuit.is_definite:
        warnings.warn(
            "threshold differs from 0.5 with negated body atoms: coherence is not guaranteed",
            ThresholdWarning,
            stacklevel=2,
        )
    return (np.asarray(scores, dtype=np.float64) > threshold).astype(np.int8)


def delegation_rate(circuit: ConstraintCircuit, h, cls: int, rows=None) -> float:
    """Fraction of rows where class ``cls`` takes its output from a subclass.

    A row delegates when some proper descendant ``B`` has ``h_B > h_cls`` (so
    the module output equals that subclass score). ``rows`` optionally
    restricts the count to a boolean row mask.
    """
    mask = _mask_of(circuit)
    arr, _ = as_batch(h, mask.shape[0])
    sub = np.flatnonzero(mask[cls])
    sub = sub[sub != cls]
    if rows is not None:
        arr = arr[np.asarray(rows, dtype=bool)]
    if sub.size == 0 or arr.shape[0] == 0:
        return 0.0
    return float((arr[:, sub].max(axis=1) > arr[:, cls]).mean())


def body_value(rule, scores: np.ndarray) -> float:
    """Min over a rule body with ``1 - s`` for negated atoms (1 for facts)."""
    vals = [scores[b] for b in rule.body_pos] + [1.0 - scores[b] for b in rule.body_neg]
    return min(vals, default=1.0)


def argument_gaps(circuit: ConstraintCircuit, h, labels=None) -> np.ndarray:
    """Smallest distance between the winning argument and any rival, per row.

    Covers every min and max node of the pass (label-masked if ``labels`` is
    given). Pairs of arguments that are both constant in the input are
    skipped since their tie cannot affect a gradient. Rows with no competing
    arguments get ``inf``.
    """
    arr, _ = as_batch(h, circuit.num_classes)
    y = None if labels is None else as_labels(labels, circuit.num_classes)[0]
    n = arr.shape[0]
    best = np.full(n, np.inf)
    C = arr
    L = circuit.num_classes
    for st in circuit.strata:
        if not st.num_rules:
            continue
        args, head_y = _body_args(st, C, y)
        const = _const_args(st, y, head_y, L, n)
        best = np.minimum(best, _node_gap(args, const, np.argmin(args, axis=2)))
        out, v, _ = _stratum_forward(st, C, y, False)
        padded = np.concatenate([v, np.zeros((n, 1))], axis=1)
        cand = np.concatenate([C[:, st.head_classes, None], padded[:, st.slots]], axis=2)
        # A rule value counts as constant when every body argument is.
        rule_const = np.concatenate([const.all(axis=2), np.ones((n, 1), dtype=bool)], axis=1)
        cconst = np.concatenate([np.zeros((n, len(st.head_classes), 1), dtype=bool), rule_const[:, st.slots]], axis=2)
        pad = np.zeros(cand.shape[1:], dtype=bool)
        pad[:, 1:] = st.slots == st.num_rules
        cconst = cconst | pad[None]
        best = np.minimum(best, _node_gap(cand, cconst, np.argmax(cand, axis=2)))
        C = out
    return best


def _const_args(st: Stratum, y, head_y, L: int, n: int) -> np.ndarray:
    pad = st.body_idx == 2 * L
    if y is None:
        return np.broadcast_to(pad, (n,) + pad.shape)
    cls = np.where(st.body_idx < L, st.body_idx, st.body_idx - L)
    cls = np.where(pad, 0, cls)
    is_neg = (st.body_idx >= L) & ~pad
    yk = y[:, cls]
    hy = head_y[:, :, None] == 1.0
    # Derivative factor of each masked body term; zero means constant.
    factor = np.where(hy, np.where(is_neg, 1.0 - yk, yk), np.where(is_neg, yk, 1.0 - yk))
    return (factor == 0.0) | pad[None]


def _node_gap(vals: np.ndarray, const: np.ndarray, win: np.ndarray) -> np.ndarray:
    wv = np.take_along_axis(vals, win[..., None], axis=-1)
    wc = np.take_along_axis(const, win[..., None], axis=-1)
    d = np.abs(vals - wv)
    k = np.arange(vals.shape[-1])
    skip = (k == win[..., None]) | (const & wc)
    d = np.where(skip, np.inf, d)
    return d.reshape(vals.shape[0], -1).min(axis=1) if d.size else np.full(vals.shape[0], np.inf)
