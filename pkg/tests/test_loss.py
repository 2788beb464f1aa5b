import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_hierarchy, random_scores, random_stratified
from constrained_mlc.circuit import compile_rules
from constrained_mlc.loss import EPS, bce_loss, closs, closs_hmc, closs_targets, cm_bce, cm_bce_hmc
from constrained_mlc.module import argument_gaps, cm_forward
from constrained_mlc.rules import parse_rules
from constrained_mlc.semantics import closure, scalar_targets


def coherent_labels(rng, rs, n):
    """Label rows closed under the rules, grown from random seeds."""
    rows = []
    for _ in range(n):
        base = np.flatnonzero(rng.random(rs.num_classes) < 0.3)
        m = closure(rs, base)
        rows.append([1 if c in m else 0 for c in range(rs.num_classes)])
    return np.array(rows, dtype=float).reshape(n, rs.num_classes)


def test_section_targets(lcmc_rules):
    t = closs_targets(compile_rules(lcmc_rules), [0.2, 0.3, 0.6], [1, 0, 1])
    np.testing.assert_allclose(t, [0.2, 0.8, 0.6], rtol=0, atol=1e-12)


def test_example9_loss(lcmc_rules):
    res = closs(compile_rules(lcmc_rules), [0.2, 0.3, 0.6], [1, 0, 1])
    assert abs(res.loss - (-2 * math.log(0.2) - math.log(0.6))) <= 1e-12
    np.testing.assert_allclose(res.grad, [-2 / 0.2, 0.0, -1 / 0.6], rtol=0, atol=1e-12)


def test_example1_closs_gradients():
    c = compile_rules(parse_rules("A1 -> A"))
    for fn in (closs, lambda circ, h, y: closs_hmc(circ, h, y)):
        res = fn(c, [0.3, 0.1], [0, 1])
        assert abs(res.grad[0] - 1 / 0.7) <= 1e-12
        assert abs(res.grad[0] - 1.4286) <= 1e-4
        assert abs(res.grad[1] - (-10.0)) <= 1e-12


def test_example1_bce_after_module():
    c = compile_rules(parse_rules("A1 -> A"))
    for res in (cm_bce(c, [0.3, 0.1], [0, 1]), cm_bce_hmc(c, [0.3, 0.1], [0, 1])):
        assert abs(res.grad[0] - (1 / 0.7 - 1 / 0.3)) <= 1e-12
        assert round(res.grad[0], 1) == -1.9
        assert res.grad[1] == 0.0


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_example3_sign_flip_of_bce_after_module(n):
    # A is a subclass of every A_i, labelled 0 while all A_i are 1.
    rs = parse_rules("\n".join(f"A -> A{i}" for i in range(1, n + 1)))
    c = compile_rules(rs)
    a = rs.classes.index["A"]
    y = np.ones(n + 1)
    y[a] = 0
    flip = n / (n + 1)
    for h_a in (flip - 0.05, flip + 0.04 if flip < 0.95 else 0.99):
        h = np.full(n + 1, 0.01)
        h[a] = h_a
        g = cm_bce(c, h, y).grad[a]
        assert abs(g - (1 / (1 - h_a) - n / h_a)) <= 1e-9
        assert (g >= 0) == (h_a >= flip)
        assert closs(c, h, y).grad[a] >= 0


def test_all_zero_labels_reduce_to_bce_of_module_output():
    rng = np.random.default_rng(0)
    h = rng.random((20, 3))
    y = np.zeros((20, 3))
    hc = compile_rules(parse_rules("A1 -> A\nA2 -> A"))
    expected = bce_loss(cm_forward(hc, h), y).loss
    assert closs_hmc(hc, h, y).loss == pytest.approx(expected, abs=1e-12)
    assert closs(hc, h, y).loss == pytest.approx(expected, abs=1e-12)
    definite = compile_rules(parse_rules("A1, A2 -> A\nA -> A2"))
    assert closs(definite, h, y).loss == pytest.approx(bce_loss(cm_forward(definite, h), y).loss, abs=1e-12)


def test_all_zero_labels_unmask_negated_atoms(lcmc_rules):
    # With y = 0 every negated atom reads 1: "A, !A1 -> A2" gives h_A = 0.6 and
    # the closed rule "A1, !A1 -> A2" gives h_A1 = 0.9, while plain CM gives A2 only 0.2.
    c = compile_rules(lcmc_rules)
    h = [0.9, 0.2, 0.6]
    assert closs_targets(c, h, [0, 0, 0]).tolist() == [0.9, 0.9, 0.9]
    assert cm_forward(c, h).tolist()[1] == pytest.approx(0.2)


def test_perfect_predictions_near_zero_loss(lcmc_rules):
    c = compile_rules(lcmc_rules)
    y = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    res = closs(c, y, y)
    assert res.loss <= 9 * -math.log(1 - EPS)
    assert cm_bce(c, y, y).loss <= 9 * -math.log(1 - EPS)


def test_bce_clamp_zero_gradient_outside():
    res = bce_loss([0.0, 1.0, 0.5], [1, 0, 1])
    assert res.grad[0] == 0.0 and res.grad[1] == 0.0
    assert np.isfinite(res.loss) and res.loss == pytest.approx(2 * -math.log(EPS) - math.log(0.5))


def test_targets_match_scalar_recursion_exactly():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        rs = random_stratified(rng, int(rng.integers(1, 9)), int(rng.integers(0, 10)))
        c = compile_rules(rs)
        h = random_scores(rng, 1, rs.num_classes, ties=rng.random() < 0.3)[0]
        y = rng.integers(0, 2, rs.num_classes)
        _, _, selected = scalar_targets(c, h, y)
        assert np.array_equal(closs_targets(c, h, y), selected)


def test_targets_bracket_module_output():
    rng = np.random.default_rng(2)
    for _ in range(500):
        rs = random_stratified(rng, int(rng.integers(1, 9)), int(rng.integers(0, 10)))
        c = compile_rules(rs)
        h = rng.random(rs.num_classes)
        y = rng.integers(0, 2, rs.num_classes)
        plus, minus, _ = scalar_targets(c, h, y)
        cm = cm_forward(c, h)
        assert np.all(plus <= cm) and np.all(cm <= minus)


def test_hmc_fast_path_equals_general_path_on_coherent_labels():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        rs = random_hierarchy(rng, int(rng.integers(1, 9)))
        c = compile_rules(rs)
        h = random_scores(rng, 1, rs.num_classes, ties=rng.random() < 0.3)
        y = coherent_labels(rng, rs, 1)
        general, fast = closs(c, h, y), closs_hmc(c, h, y)
        assert abs(general.loss - fast.loss) <= 1e-12
        assert np.abs(general.targets - fast.targets).max() <= 1e-12
        assert np.abs(general.grad - fast.grad).max() <= 1e-12
        g2, f2 = cm_bce(c, h, y), cm_bce_hmc(c, h, y)
        assert abs(g2.loss - f2.loss) <= 1e-12
        assert np.abs(g2.grad - f2.grad).max() <= 1e-12


def _signs_ok(grad, y):
    return bool(np.all(np.where(y == 1, grad <= 0, grad >= 0)))


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_classes=st.integers(1, 8), n_rules=st.integers(0, 10))
def test_gradient_signs_follow_labels(seed, n_classes, n_rules):
    rng = np.random.default_rng(seed)
    rs = random_stratified(rng, n_classes, n_rules)
    c = compile_rules(rs)
    h = random_scores(rng, 4, n_classes, ties=seed % 3 == 0)
    y = rng.integers(0, 2, (4, n_classes)).astype(float)
    assert _signs_ok(closs(c, h, y).grad, y)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_classes=st.integers(1, 8))
def test_gradient_signs_follow_labels_hierarchy(seed, n_classes):
    rng = np.random.default_rng(seed)
    rs = random_hierarchy(rng, n_classes)
    c = compile_rules(rs)
    h = random_scores(rng, 4, n_classes, ties=seed % 3 == 0)
    y = coherent_labels(rng, rs, 4)
    assert _signs_ok(closs_hmc(c, h, y).grad, y)


def _finite_difference(fn, h, step=1e-6):
    g = np.zeros_like(h)
    for k in range(h.size):
        up, down = h.copy(), h.copy()
        up.flat[k] += step
        down.flat[k] -= step
        g.flat[k] = (fn(up) - fn(down)) / (2 * step)
    return g


def test_gradients_match_central_differences():
    rng = np.random.default_rng(4)
    done = 0
    while done < 200:
        rs = random_stratified(rng, int(rng.integers(1, 7)), int(rng.integers(0, 8)))
        c = compile_rules(rs)
        h = rng.uniform(0.02, 0.98, (1, rs.num_classes))
        y = rng.integers(0, 2, (1, rs.num_classes)).astype(float)
        # Stay clear of min/max ties so the loss is smooth around h.
        if argument_gaps(c, h, y)[0] < 1e-3 or argument_gaps(c, h)[0] < 1e-3:
            continue
        for fn in (closs, cm_bce):
            analytic = fn(c, h, y).grad
            numeric = _finite_difference(lambda x: fn(c, x, y).loss, h)
            scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
            assert np.abs(analytic - numeric).max() / scale <= 1e-4
        done += 1


def test_single_row_shapes(lcmc_rules):
    c = compile_rules(lcmc_rules)
    res = closs(c, [0.2, 0.3, 0.6], [1, 0, 1])
    assert res.grad.shape == (3,) and res.targets.shape == (3,)


def test_targets_equal_module_output_at_its_own_coherent_labels():
    rng = np.random.default_rng(5)
    for _ in range(500):
        rs = random_stratified(rng, int(rng.integers(1, 8)), int(rng.integers(0, 10)), p_neg=0.4)
        c = compile_rules(rs)
        h = rng.random(rs.num_classes)
        cm = cm_forward(c, h)
        y = (cm > 0.5).astype(int)
        np.testing.assert_allclose(closs_targets(c, h, y), cm, rtol=0, atol=1e-15)
