"""Constraint loss (label-masked targets + cross-entropy) and plain BCE.

Losses are summed over classes and rows; gradients are with respect to the
raw scores ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import ConstraintCircuit
from .module import Evaluation, _evaluate, _mask_of, as_batch, as_labels, hmc_gather_index

EPS = 1e-12


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    targets: np.ndarray | None = None


def _bce_terms(t: np.ndarray, y: np.ndarray, eps: float) -> tuple[float, np.ndarray]:
    tc = np.clip(t, eps, 1.0 - eps)
    loss = -(y * np.log(tc) + (1.0 - y) * np.log(1.0 - tc)).sum()
    inside = (t >= eps) & (t <= 1.0 - eps)
    grad = np.where(inside, -y / tc + (1.0 - y) / (1.0 - tc), 0.0)
    return float(loss), grad


def _shape(arr: np.ndarray, single: bool) -> np.ndarray:
    return arr[0] if single else arr


def bce_loss(scores, y, eps: float = EPS) -> LossResult:
    """Binary cross-entropy of scores against labels, log arguments clamped."""
    s = np.asarray(scores, dtype=np.float64)
    width = s.shape[-1]
    t, single = as_batch(s, width)
    yy, _ = as_labels(y, width)
    loss, grad = _bce_terms(t, yy, eps)
    return LossResult(loss, _shape(grad, single))


def closs_targets(circuit: ConstraintCircuit, h, y) -> np.ndarray:
    """Label-masked module output the constraint loss is measured on.

    A class labelled 1 only gets support from rules whose body holds under
    the labels; a class labelled 0 is pushed up by rules whose body the
    labels falsify, so lowering its own score is what the loss rewards.
    """
    L = circuit.num_classes
    arr, single = as_batch(h, L)
    yy, _ = as_labels(y, L)
    return _shape(_evaluate(circuit, arr, yy), single)


def closs(circuit: ConstraintCircuit, h, y, eps: float = EPS) -> LossResult:
    L = circuit.num_classes
    arr, single = as_batch(h, L)
    yy, _ = as_labels(y, L)
    ev = Evaluation(circuit, arr, yy)
    loss, g = _bce_terms(ev.output, yy, eps)
    return LossResult(loss, _shape(ev.backward(g), single), _shape(ev.output, single))


def cm_bce(circuit: ConstraintCircuit, h, y, eps: float = EPS) -> LossResult:
    """BCE measured after the constraint module (no label masking)."""
    L = circuit.num_classes
    arr, single = as_batch(h, L)
    yy, _ = as_labels(y, L)
    ev = Evaluation(circuit, arr)
    loss, g = _bce_terms(ev.output, yy, eps)
    return LossResult(loss, _shape(ev.backward(g), single), _shape(ev.output, single))


def hmc_targets_and_grad_routes(index: np.ndarray, h: np.ndarray, y: np.ndarray):
    """Targets of the hierarchy fast path and the row-wise winning classes.

    Classes labelled 0 keep the module output ``max`` over descendants;
    classes labelled 1 take the max over descendants of ``h * y``.
    """
    n = h.shape[0]
    rows = np.arange(n)[:, None]
    cand = h[:, index]
    cw = cand.argmax(axis=2)
    cm = np.take_along_axis(cand, cw[:, :, None], axis=2)[:, :, 0]
    masked = (h * y)[:, index]
    mw = masked.argmax(axis=2)
    mx = np.take_along_axis(masked, mw[:, :, None], axis=2)[:, :, 0]
    t = (1.0 - y) * cm + y * mx
    cls = np.arange(index.shape[0])[None, :]
    return t, index[cls, cw], index[cls, mw], rows


def _scatter_rows(n: int, L: int, cols: np.ndarray, weights: np.ndarray) -> np.ndarray:
    flat = (np.arange(n)[:, None] * L + cols).ravel()
    return np.bincount(flat, weights=weights.ravel(), minlength=n * L).reshape(n, L)


def closs_hmc(mask, h, y, eps: float = EPS) -> LossResult:
    """Constraint loss for hierarchies using the descendant mask directly."""
    m = _mask_of(mask)
    L = m.shape[0]
    arr, single = as_batch(h, L)
    yy, _ = as_labels(y, L)
    t, cm_src, pos_src, _ = hmc_targets_and_grad_routes(hmc_gather_index(mask), arr, yy)
    loss, g = _bce_terms(t, yy, eps)
    n = arr.shape[0]
    gh = _scatter_rows(n, L, cm_src, g * (1.0 - yy))
    gh += _scatter_rows(n, L, pos_src, g * yy * np.take_along_axis(yy, pos_src, axis=1))
    return LossResult(loss, _shape(gh, single), _shape(t, single))


def cm_bce_hmc(mask, h, y, eps: float = EPS) -> LossResult:
    """BCE after the hierarchy fast path of the constraint module."""
    m = _mask_of(mask)
    L = m.shape[0]
    arr, single = as_batch(h, L)
    yy, _ = as_labels(y, L)
    index = hmc_gather_index(mask)
    cand = arr[:, index]
    w = cand.argmax(axis=2)
    t = np.take_along_axis(cand, w[:, :, None], axis=2)[:, :, 0]
    loss, g = _bce_terms(t, yy, eps)
    src = index[np.arange(L)[None, :], w]
    return LossResult(loss, _shape(_scatter_rows(arr.shape[0], L, src, g), single), _shape(t, single))
