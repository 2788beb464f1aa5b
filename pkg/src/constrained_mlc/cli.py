"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 semantic error (bad rules, data that
does not fit the rules, detected violations), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .circuit import compile_rules, load_circuit, save_circuit
from .metrics import UndefinedMetricError, mc_metrics
from .module import cm_forward, predict
from .nn import SYSTEMS, TrainConfig, TrainingDivergedError, config_dict, init_model, save_checkpoint, train
from .rules import HierarchyCycleError, RuleSet, RuleSyntaxError, parse_rules
from .semantics import check_constraint_violation
from .strata import ClosureCapError, NotStratifiedError

EXIT_OK, EXIT_USAGE, EXIT_SEMANTIC, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_rules(path: str) -> RuleSet:
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def _read_matrix(path: str, names: list[str]) -> tuple[np.ndarray, list[str]]:
    """Read the columns ``names`` (by header) from a CSV; return rows and the full header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    missing = [n for n in names if n not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    idx = [header.index(n) for n in names]
    try:
        data = np.array([[float(r[i]) for i in idx] for r in rows[1:]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: {exc}") from exc
    return data.reshape(len(rows) - 1, len(names)), header


def _write_matrix(fh, names: list[str], data: np.ndarray, extra: dict[str, list[str]] | None = None) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(names + list(extra or {}))
    cols = list((extra or {}).values())
    for i, row in enumerate(data):
        w.writerow([repr(float(v)) for v in row] + [c[i] for c in cols])


def _out(args, name: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_config(path: str | None) -> dict:
    """Training options from a JSON document or ``key = value`` lines."""
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        out[k] = v
    return out


def _violation_rows(rs: RuleSet, scores: np.ndarray) -> list[dict]:
    names = rs.classes.names
    rows = []
    for i, row in enumerate(scores):
        for r in check_constraint_violation(rs, row):
            involved = sorted({r.head} | r.body_pos | r.body_neg)
            rows.append({"row": i, "rule": r.format(rs.classes), "scores": {names[c]: float(row[c]) for c in involved}})
    return rows


# -- subcommands -------------------------------------------------------------


def cmd_compile(args) -> int:
    rs = _read_rules(args.rules)
    circuit = compile_rules(rs, args.cap)
    report = circuit.describe()
    report["strata_of_classes"] = dict(zip(circuit.classes.names, circuit.class_stratum))
    if args.format == "json":
        text = json.dumps(report, indent=2) + "\n"
    else:
        lines = [f"classes: {', '.join(report['classes'])}", f"strata: {report['num_strata']}", f"hierarchy: {report['hmc']}"]
        for st in report["strata"]:
            lines.append(
                f"stratum {st['stratum']}: classes [{', '.join(st['classes'])}] closed rules {st['closed_rules']}"
                f" body matrices {st['bpos_shape'][0]}x{st['bpos_shape'][1]}"
            )
            lines += [f"  {r}" for r in st["rules"]]
        text = "\n".join(lines) + "\n"
    _emit(text, args.report)
    if args.emit_circuit:
        save_circuit(circuit, args.emit_circuit)
    return EXIT_OK


def _coherent_scores(args):
    circuit = load_circuit(args.circuit)
    names = list(circuit.classes.names)
    h, _ = _read_matrix(args.scores, names)
    out = cm_forward(circuit, h) if len(h) else h
    return circuit, names, out


def _self_check(circuit, out) -> int:
    bad = _violation_rows(circuit.source, out)
    if bad:
        print(f"self-check failed: {len(bad)} violation(s), first: {bad[0]}", file=sys.stderr)
        return EXIT_SEMANTIC
    return EXIT_OK


def cmd_eval(args) -> int:
    circuit, names, out = _coherent_scores(args)
    buf = io.StringIO()
    _write_matrix(buf, names, out)
    _emit(buf.getvalue(), args.output)
    return _self_check(circuit, out)


def cmd_predict(args) -> int:
    circuit, names, out = _coherent_scores(args)
    labels = predict(out, args.threshold, circuit) if len(out) else np.zeros(out.shape, dtype=bool)
    sets = [";".join(n for n, on in zip(names, row) if on) for row in labels]
    buf = io.StringIO()
    _write_matrix(buf, names, out, {"labels": sets})
    _emit(buf.getvalue(), args.output)
    return _self_check(circuit, out)


def cmd_check(args) -> int:
    rs = _read_rules(args.rules)
    scores, _ = _read_matrix(args.predictions, list(rs.classes.names))
    bad = _violation_rows(rs, scores)
    _emit(json.dumps({"rows": len(scores), "violations": bad}, indent=2) + "\n", args.report)
    return EXIT_SEMANTIC if bad else EXIT_OK


def cmd_metrics(args) -> int:
    with open(args.scores, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    with open(args.labels, newline="", encoding="utf-8") as fh:
        lab_header = [h.strip() for h in next(csv.reader(fh), [])]
    names = [h for h in lab_header if h in header] if args.match_columns else lab_header
    scores, _ = _read_matrix(args.scores, names if args.match_columns else header[: len(lab_header)])
    labels, _ = _read_matrix(args.labels, names)
    try:
        report = mc_metrics(scores, labels, args.threshold).as_dict()
    except UndefinedMetricError as exc:
        raise ValueError(str(exc)) from exc
    _emit(json.dumps(report, indent=2) + "\n", args.output)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.kind == "nine_rect":
        world = bench.nine_rect_world(args.seed, args.n)
    else:
        world = bench.sweep_world(args.kind, args.step, args.seed, args.n)
    data = bench.gen_rectangles(world)
    names = list(data.classes.names)
    split = np.empty(len(data.X), dtype=object)
    split[data.train_idx], split[data.val_idx], split[data.test_idx] = "train", "val", "test"
    with open(_out(args, "data.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", *names, "split"])
        for x, y, s in zip(data.X, data.Y, split):
            w.writerow([repr(float(x[0])), repr(float(x[1])), *map(int, y), s])
    schema = {"labels": names, "split": "split"}
    _out(args, "schema.json").write_text(json.dumps(schema, indent=2) + "\n", encoding="utf-8")
    from .rules import serialize_rules

    _out(args, "rules.txt").write_text(serialize_rules(world.rules), encoding="utf-8")
    _out(args, "world.json").write_text(json.dumps(world.describe(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(data.X)} rows to {args.out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    systems = tuple(args.systems.split(",")) if args.systems else None
    if systems and set(systems) - set(SYSTEMS):
        raise UsageError(f"unknown systems {sorted(set(systems) - set(SYSTEMS))}")

    def progress(r):
        if not args.quiet:
            print(f"step {r.step} run {r.run} {r.system}: {r.au_prc:.4f}", file=sys.stderr)

    if args.kind == "nine_rect":
        kw = {"systems": systems} if systems else {}
        report = bench.nine_rect_experiment(args.runs, cfg, hidden=args.hidden or 7, n=args.n, seed=args.seed,
                                            progress=progress, workers=args.threads, **kw)  # fmt: skip
    else:
        steps = [int(s) for s in args.steps.split(",")] if args.steps else None
        report = bench.sweep_experiment(args.kind, args.runs, cfg, hidden=args.hidden or 4, n=args.n, seed=args.seed,
                                        systems=systems, step_list=steps, progress=progress,
                                        workers=args.threads)  # fmt: skip
    _out(args, "runs.csv").write_text(report.runs_csv(), encoding="utf-8")
    _out(args, "summary.csv").write_text(report.summary_csv(), encoding="utf-8")
    meta = {"kind": report.kind, "geometry": report.geometry, "config": report.config}
    _out(args, "report.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(report.summary_csv())
    return EXIT_OK


def cmd_train(args) -> int:
    rs = _read_rules(args.rules) if args.rules else None
    circuit = compile_rules(rs) if rs is not None else None
    data = bench.load_dataset(args.data, args.schema, seed=args.seed)
    if circuit is not None and list(circuit.classes.names) != list(data.classes.names):
        if set(circuit.classes.names) != set(data.classes.names):
            raise ValueError("label columns and rule classes differ")
        order = [data.classes.names.index(n) for n in circuit.classes.names]
        data = type(data)(data.X, data.Y[:, order], circuit.classes, data.train_idx, data.test_idx, data.val_idx, data.meta)
    options = _parse_config(args.config)
    options.setdefault("seed", args.seed)
    cfg = TrainConfig.from_mapping(options)
    hidden = [int(h) for h in args.hidden.split(",") if h] if args.hidden else []
    model = init_model((data.num_features, *hidden, data.num_classes), args.activation, args.seed)
    kind = args.system or ("ccn_closs" if circuit is not None else "raw")
    system, history = train(model, data, circuit, config=cfg, system=kind)
    save_checkpoint(system, _out(args, "model.ckpt"))
    if circuit is not None:
        save_circuit(circuit, _out(args, "circuit.json"))
    keys = ["epoch", "loss", "val_au_prc", "phase"]
    with open(_out(args, "history.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(history)
    Xte, Yte = data.split("test")
    summary = {"system": system.kind, "epochs_trained": system.epochs_trained, "config": config_dict(cfg)}
    if len(Xte):
        try:
            summary["test"] = mc_metrics(system.infer(Xte), Yte).as_dict()
        except UndefinedMetricError:
            pass
    _out(args, "train.json").write_text(json.dumps(summary, indent=2, default=float) + "\n", encoding="utf-8")
    print(f"trained {system.kind} for {system.epochs_trained} epochs; outputs in {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="constrained-mlc", description="Compile logical constraints into coherent multi-label predictors.")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for experiments; BLAS threads per process")
    p.add_argument("--out-dir", default=".", help="directory for generated files (default: current)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="compile a rules file and report strata and closures")
    c.add_argument("rules")
    c.add_argument("--format", choices=("text", "json"), default="text")
    c.add_argument("--report", help="write the report here instead of stdout")
    c.add_argument("--emit-circuit", metavar="PATH", help="write the compiled circuit (JSON)")
    c.add_argument("--cap", type=int, default=10**6, help="closure size limit per stratum")
    c.set_defaults(func=cmd_compile)

    for name, fn, helptext in (
        ("eval", cmd_eval, "apply a compiled circuit to a CSV of scores"),
        ("predict", cmd_predict, "like eval, plus a thresholded label-set column"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("circuit")
        e.add_argument("scores", help="CSV with one column per class (header = class names)")
        e.add_argument("-o", "--output")
        if name == "predict":
            e.add_argument("--threshold", type=float, default=0.5)
        e.set_defaults(func=fn)

    k = sub.add_parser("check", help="report rule violations in a CSV of scores or 0/1 predictions")
    k.add_argument("rules")
    k.add_argument("predictions")
    k.add_argument("--report")
    k.set_defaults(func=cmd_check)

    m = sub.add_parser("metrics", help="multi-label metrics of scores against labels")
    m.add_argument("scores")
    m.add_argument("labels")
    m.add_argument("--threshold", type=float, default=0.5)
    m.add_argument("--match-columns", action="store_true", help="align columns by header name")
    m.add_argument("-o", "--output")
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("synth", help="generate a synthetic rectangle dataset")
    s.add_argument("kind", choices=("hmc_sweep", "lcmc_sweep", "nine_rect"))
    s.add_argument("--step", type=int, default=1, help="sweep step 1-9")
    s.add_argument("--n", type=int, default=5000)
    s.set_defaults(func=cmd_synth)

    w = sub.add_parser("sweep", help="run a synthetic experiment and write CSV reports")
    w.add_argument("kind", choices=("hmc_sweep", "lcmc_sweep", "nine_rect"))
    w.add_argument("--runs", type=int, default=10)
    w.add_argument("--epochs", type=int, default=20000)
    w.add_argument("--lr", type=float, default=1e-2)
    w.add_argument("--n", type=int, default=5000)
    w.add_argument("--hidden", type=int, help="hidden units (default 4 for sweeps, 7 for nine_rect)")
    w.add_argument("--steps", help="comma-separated subset of steps")
    w.add_argument("--systems", help="comma-separated systems")
    w.add_argument("--quiet", action="store_true")
    w.set_defaults(func=cmd_sweep)

    t = sub.add_parser("train", help="train a classifier on a CSV dataset")
    t.add_argument("--data", required=True, help="features CSV with a header row")
    t.add_argument("--schema", required=True, help="JSON naming label, categorical, ignore and split columns")
    t.add_argument("--rules", help="rules file (omit for an unconstrained network)")
    t.add_argument("--config", help="training options: JSON or key = value lines")
    t.add_argument("--system", choices=SYSTEMS, default=None, help="default: ccn_closs with --rules, raw without")
    t.add_argument("--hidden", default="", help="comma-separated hidden layer sizes")
    t.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1 if args.threads > 1 else args.threads)
    except ImportError:  # optional; BLAS keeps its own default
        limiter = None
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuleSyntaxError as exc:
        print(f"{getattr(args, 'rules', '')}: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except (NotStratifiedError, HierarchyCycleError, ClosureCapError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except (OSError, TrainingDivergedError, RuntimeError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.unregister() if hasattr(limiter, "unregister") else limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
