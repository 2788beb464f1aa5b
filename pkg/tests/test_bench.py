import json

import numpy as np
import pytest

from constrained_mlc.bench import (
    OUTER,
    Rect,
    RectangleWorld,
    decision_grid,
    gen_nine_rect,
    gen_rectangles,
    load_dataset,
    nine_rect_world,
    run_system,
    sweep_experiment,
    sweep_inner_rect,
    sweep_world,
)
from constrained_mlc.circuit import compile_rules
from constrained_mlc.metrics import mc_metrics
from constrained_mlc.module import delegation_rate
from constrained_mlc.nn import TrainConfig, forward
from constrained_mlc.rules import parse_rules
from constrained_mlc.semantics import check_logical_violation


def labels_coherent(rules, Y):
    return all(not check_logical_violation(rules, row) for row in Y)


@pytest.mark.parametrize("step", [1, 5, 9])
def test_sweep_worlds_are_coherent(step):
    for kind in ("hmc_sweep", "lcmc_sweep"):
        world = sweep_world(kind, step, seed=7, n=1500)
        data = gen_rectangles(world)
        assert labels_coherent(world.rules, data.Y)


def test_lcmc_world_membership():
    world = sweep_world("lcmc_sweep", 9, seed=0, n=2000)
    data = gen_rectangles(world)
    idx = world.rules.classes.index
    inner, outer = world.rects["R1"], world.rects["R2"]
    in1, in2 = inner.contains(data.X), outer.contains(data.X)
    assert np.array_equal(data.Y[:, idx["A1"]], in1)
    assert np.array_equal(data.Y[:, idx["A2"]], in2 & ~in1)
    assert np.array_equal(data.Y[:, idx["A"]], in1 | in2)


def test_points_outside_every_rectangle_have_no_labels():
    world = RectangleWorld({"R1": Rect(0.0, 0.0, 0.2, 0.2)}, {"A": "R1"}, n=10)
    assert world.labels(np.array([[0.5, 0.5], [0.1, 0.1]])).tolist() == [[0], [1]]
    data = gen_rectangles(sweep_world("hmc_sweep", 3, seed=1, n=1000))
    outside = ~(sweep_inner_rect(3).contains(data.X) | OUTER.contains(data.X))
    assert outside.any() and not data.Y[outside].any()


def test_sweep_geometry_moves_from_disjoint_to_nested():
    first, last = sweep_inner_rect(1), sweep_inner_rect(9)
    assert first.x1 <= OUTER.x0 and first.y1 <= OUTER.y0
    assert OUTER.x0 <= last.x0 and last.x1 <= OUTER.x1 and OUTER.y0 <= last.y0 and last.y1 <= OUTER.y1
    with pytest.raises(ValueError):
        sweep_inner_rect(0)


def test_nine_rect_labels():
    world = nine_rect_world(seed=3, n=3000)
    data, rules = gen_nine_rect(seed=3, n=3000)
    assert labels_coherent(rules, data.Y)
    idx = rules.classes.index
    in_r3 = world.rects["R3"].contains(data.X)
    assert in_r3.any() and np.all(data.Y[in_r3] == 1)
    labelled = data.Y.any(axis=1)
    assert np.all(data.Y[labelled, idx["A5"]] == 1)
    assert data.X.shape == (3000, 2) and data.Y.shape == (3000, 9)


def test_generators_are_seeded():
    a, _ = gen_nine_rect(seed=11, n=200)
    b, _ = gen_nine_rect(seed=11, n=200)
    c, _ = gen_nine_rect(seed=12, n=200)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.X, c.X)


def test_bad_membership_expression_rejected():
    with pytest.raises(ValueError):
        RectangleWorld({"R1": Rect(0, 0, 1, 1)}, {"A": "R1 |"})
    with pytest.raises((ValueError, KeyError)):
        RectangleWorld({"R1": Rect(0, 0, 1, 1)}, {"A": "R9"})


def test_delegation_follows_rectangle_overlap():
    rates = {}
    for step in (1, 9):
        world = sweep_world("hmc_sweep", step, seed=0, n=2000)
        data = gen_rectangles(world)
        circuit = compile_rules(world.rules)
        system = run_system("ccn_closs", data, circuit, 4, TrainConfig(epochs=3000), init_seed=1)
        X, Y = data.split("test")
        idx = circuit.classes.index
        rates[step] = delegation_rate(circuit, forward(system.model, X), idx["A"], rows=Y[:, idx["A1"]] == 1)
    assert rates[1] >= 0.9
    assert rates[9] <= 0.1


def test_lcmc_one_error_small_at_reduced_scale():
    # Reduced protocol (one run, 4000 epochs); full scale goes through the sweep command.
    world = sweep_world("lcmc_sweep", 9, seed=0, n=2000)
    data = gen_rectangles(world)
    circuit = compile_rules(world.rules)
    X, Y = data.split("test")
    for system in ("ccn_closs", "h_plus_postproc"):
        trained = run_system(system, data, circuit, 7, TrainConfig(epochs=4000), init_seed=1)
        assert mc_metrics(trained.infer(X), Y).one_error <= 0.01


def test_sweep_report_is_reproducible_and_parallel_safe():
    cfg = TrainConfig(epochs=30)
    args = dict(runs=2, config=cfg, n=300, hidden=3, step_list=[1, 9], seed=4)
    a = sweep_experiment("hmc_sweep", **args)
    b = sweep_experiment("hmc_sweep", **args, workers=2)
    assert a.runs_csv() == b.runs_csv()
    assert len(a.runs) == 2 * 2 * 3
    assert set(a.summary()) == {(s, m) for s in (1, 9) for m in ("ccn_closs", "f_plus_min", "g_plus_max")}
    header = a.summary_csv().splitlines()[0].split(",")
    assert header[:5] == ["step", "system", "n_runs", "au_prc_mean", "au_prc_std"]
    assert len(a.geometry) == 2
    with pytest.raises(ValueError):
        sweep_experiment("nine_rect", runs=1, config=cfg)


def test_decision_grid_csv():
    world = sweep_world("hmc_sweep", 9, seed=0, n=200)
    data = gen_rectangles(world)
    system = run_system("ccn_closs", data, compile_rules(world.rules), 3, TrainConfig(epochs=5), init_seed=0)
    lines = decision_grid(system, resolution=4).splitlines()
    assert len(lines) == 1 + 16
    assert lines[0].split(",") == ["x", "y", "A1", "A"]


def _write(tmp_path, text, schema):
    p = tmp_path / "d.csv"
    p.write_text(text)
    s = tmp_path / "s.json"
    s.write_text(json.dumps(schema))
    return p, s


def test_load_numeric_standardized(tmp_path):
    rows = ["a,b,L1,L2,split"] + [f"{i},{i * i % 7},{i % 2},{int(i > 3)},{'train' if i < 8 else 'test'}" for i in range(10)]
    p, s = _write(tmp_path, "\n".join(rows) + "\n", {"labels": ["L1", "L2"], "split": "split"})
    d = load_dataset(p, s)
    Xtr, Ytr = d.split("train")
    assert np.all(np.abs(Xtr.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(Xtr.std(axis=0) - 1) <= 1e-9)
    assert Ytr[:, 0].tolist() == [i % 2 for i in range(8)]
    raw = np.arange(10.0)
    expected = (raw - raw[:8].mean()) / raw[:8].std()
    np.testing.assert_allclose(d.X[:, 0], expected, rtol=0, atol=1e-12)


def test_load_imputes_missing_with_train_mean(tmp_path):
    text = "x,L,split\n1,0,train\n?,1,train\n3,0,train\n100,1,test\n,0,test\n"
    p, s = _write(tmp_path, text, {"labels": ["L"], "split": "split"})
    d = load_dataset(p, s)
    # Train values 1, 2 (imputed), 3: mean 2, std sqrt(2/3).
    sd = np.sqrt(2 / 3)
    np.testing.assert_allclose(d.X[:, 0], [-1 / sd, 0, 1 / sd, 98 / sd, 0], rtol=0, atol=1e-12)


def test_load_one_hot_categorical(tmp_path):
    text = "c,x,L\nred,1,1\nblue,2,0\ngreen,3,1\nred,4,0\nblue,5,1\n"
    p, s = _write(tmp_path, text, {"labels": ["L"], "categorical": ["c"]})
    d = load_dataset(p, s, splits=(0.8, 0.0, 0.2), seed=0)
    cat = [name for name in d.meta["features"] if name.startswith("c=")]
    assert len(cat) == 3 and d.X.shape[1] == 4


def test_load_errors(tmp_path):
    p, s = _write(tmp_path, "x,L\n1,2\n", {"labels": ["L"]})
    with pytest.raises(ValueError, match="non-binary"):
        load_dataset(p, s)
    p, s = _write(tmp_path, "x,L\n1,1\n", {"labels": ["M"]})
    with pytest.raises(ValueError, match="missing"):
        load_dataset(p, s)
    p, s = _write(tmp_path, "x,L\nabc,1\n1,0\n", {"labels": ["L"]})
    with pytest.raises(ValueError, match="categorical"):
        load_dataset(p, s, splits=(0.5, 0.0, 0.5))


def test_rules_match_bundled_programs():
    from constrained_mlc.bench import HMC_RULES, LCMC_RULES

    assert parse_rules(HMC_RULES).num_classes == 2
    assert parse_rules(LCMC_RULES).classes.names == ("A1", "A2", "A")
