"""Synthetic rectangle worlds, dataset loading and sweep experiments."""

from __future__ import annotations

import csv
import io
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .circuit import ConstraintCircuit, compile_rules
from .data import TabularDataset
from .metrics import au_prc, mc_metrics
from .nn import TrainConfig, TrainedSystem, init_model, train
from .rules import ClassTable, RuleSet, hierarchy_to_rules, parse_rules

EXPERIMENT_IDS = {"hmc_sweep": 1, "lcmc_sweep": 2, "nine_rect": 3}
SWEEP_SYSTEMS = {
    "hmc_sweep": ("ccn_closs", "f_plus_min", "g_plus_max"),
    "lcmc_sweep": ("ccn_closs", "h_plus_postproc"),
}


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate rectangle {self}")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        x, y = pts[:, 0], pts[:, 1]
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_]*)|(.))")


def _parse_expr(text: str):
    """Set expression over rectangle names: ``|`` union, ``&`` intersection,
    ``-`` difference (all left-associative, equal precedence), parentheses."""
    tokens = [(m.group(1), m.group(2)) for m in _TOKEN.finditer(text) if m.group(1) or (m.group(2) or "").strip()]
    pos = 0

    def atom():
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError(f"unexpected end of expression {text!r}")
        name, sym = tokens[pos]
        pos += 1
        if name:
            return ("rect", name)
        if sym == "(":
            node = expr()
            if pos >= len(tokens) or tokens[pos][1] != ")":
                raise ValueError(f"missing ')' in {text!r}")
            pos += 1
            return node
        raise ValueError(f"unexpected {sym!r} in {text!r}")

    def expr():
        nonlocal pos
        node = atom()
        while pos < len(tokens) and tokens[pos][1] in ("|", "&", "-"):
            op = tokens[pos][1]
            pos += 1
            node = (op, node, atom())
        return node

    tree = expr()
    if pos != len(tokens):
        raise ValueError(f"trailing input in {text!r}")
    return tree


def _eval_expr(tree, rects: dict[str, Rect], pts: np.ndarray) -> np.ndarray:
    if tree[0] == "rect":
        if tree[1] not in rects:
            raise ValueError(f"unknown rectangle {tree[1]!r}")
        return rects[tree[1]].contains(pts)
    a, b = _eval_expr(tree[1], rects, pts), _eval_expr(tree[2], rects, pts)
    return {"|": a | b, "&": a & b, "-": a & ~b}[tree[0]]


@dataclass
class RectangleWorld:
    rects: dict[str, Rect]
    membership: dict[str, str]  # class name -> set expression over rect names
    rules: RuleSet | None = None
    n: int = 5000
    seed: int = 0
    train_fraction: float = 0.5

    def __post_init__(self):
        self._trees = {c: _parse_expr(e) for c, e in self.membership.items()}
        for tree in self._trees.values():
            _eval_expr(tree, self.rects, np.zeros((0, 2)))

    @property
    def class_names(self) -> list[str]:
        if self.rules is not None:
            return list(self.rules.classes.names)
        return list(self.membership)

    def labels(self, pts: np.ndarray) -> np.ndarray:
        return np.stack([_eval_expr(self._trees[c], self.rects, pts) for c in self.class_names], axis=1).astype(np.int8)

    def describe(self) -> dict:
        return {"rects": {k: r.as_list() for k, r in self.rects.items()}, "membership": dict(self.membership)}


def gen_rectangles(world: RectangleWorld) -> TabularDataset:
    """Uniform points on the unit square labelled by the world's membership map."""
    rng = np.random.default_rng(world.seed)
    X = rng.uniform(0.0, 1.0, size=(world.n, 2))
    Y = world.labels(X)
    ntr = int(round(world.n * world.train_fraction))
    perm = rng.permutation(world.n)
    return TabularDataset(
        X, Y, ClassTable(tuple(world.class_names)), perm[:ntr], perm[ntr:], meta={"world": world.describe()}
    )


HMC_RULES = "A1 -> A\n"
LCMC_RULES = "class: A1, A2, A\nA1 -> A\nA2 -> A\nA, !A1 -> A2\n"
SWEEP_STEPS = 9
OUTER = Rect(0.3, 0.3, 0.9, 0.9)
INNER_SIDE = 0.2


def sweep_inner_rect(step: int, steps: int = SWEEP_STEPS) -> Rect:
    """Inner square moving from the bottom-left corner (disjoint from the outer
    square) to the outer square's centre as ``step`` goes 1..steps."""
    if not 1 <= step <= steps:
        raise ValueError("step out of range")
    c = 0.1 + 0.5 * (step - 1) / (steps - 1) if steps > 1 else 0.6
    h = INNER_SIDE / 2
    return Rect(c - h, c - h, c + h, c + h)


def sweep_world(kind: str, step: int, seed, n: int = 5000) -> RectangleWorld:
    rects = {"R1": sweep_inner_rect(step), "R2": OUTER}
    if kind == "hmc_sweep":
        return RectangleWorld(rects, {"A1": "R1", "A": "R1 | R2"}, parse_rules(HMC_RULES), n, seed)
    if kind == "lcmc_sweep":
        return RectangleWorld(rects, {"A1": "R1", "A2": "R2 - R1", "A": "R1 | R2"}, parse_rules(LCMC_RULES), n, seed)
    raise ValueError(f"unknown sweep {kind!r}")


NINE_EDGES = [
    ("A3", "A2"), ("A3", "A6"), ("A3", "A8"),
    ("A2", "A1"), ("A2", "A4"),
    ("A6", "A4"), ("A6", "A7"),
    ("A8", "A7"), ("A8", "A9"),
    ("A1", "A5"), ("A4", "A5"), ("A7", "A5"), ("A9", "A5"),
]  # fmt: skip


def nine_rect_rules() -> RuleSet:
    return hierarchy_to_rules(NINE_EDGES, [f"A{i}" for i in range(1, 10)])


def nine_rect_world(seed, n: int = 5000) -> RectangleWorld:
    """3x3 grid of touching squares over [0.1, 0.9]^2, R1 top-left, row-major.

    Class A_i covers its own square plus the squares of all its descendants,
    so A3's square carries every label and every square carries A5.
    """
    rules = nine_rect_rules()
    side = 0.8 / 3
    rects = {}
    for i in range(9):
        row, col = divmod(i, 3)
        x0 = 0.1 + col * side
        y1 = 0.9 - row * side
        rects[f"R{i + 1}"] = Rect(x0, y1 - side, x0 + side, y1)
    circuit = compile_rules(rules)
    mask = circuit.hmc_mask
    names = rules.classes.names
    membership = {}
    for a, name in enumerate(names):
        membership[name] = " | ".join(f"R{names[b][1:]}" for b in np.flatnonzero(mask[a]))
    return RectangleWorld(rects, membership, rules, n, seed)


def gen_nine_rect(seed, n: int = 5000) -> tuple[TabularDataset, RuleSet]:
    world = nine_rect_world(seed, n)
    return gen_rectangles(world), world.rules


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class RunResult:
    step: int
    run: int
    system: str
    au_prc: float
    metrics: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class SweepReport:
    kind: str
    runs: list[RunResult]
    geometry: list[dict]
    config: dict

    def summary(self, metric: str = "au_prc") -> dict[tuple[int, str], tuple[float, float]]:
        """(step, system) -> (mean, population std) over successful runs."""
        out: dict[tuple[int, str], list[float]] = {}
        for r in self.runs:
            if r.error is None:
                val = r.au_prc if metric == "au_prc" else r.metrics[metric]
                out.setdefault((r.step, r.system), []).append(val)
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in out.items()}

    def runs_csv(self) -> str:
        buf = io.StringIO()
        metric_names = sorted({k for r in self.runs for k in r.metrics})
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "run", "system", "au_prc", *metric_names, "error"])
        for r in self.runs:
            w.writerow([r.step, r.run, r.system, repr(r.au_prc), *[repr(r.metrics.get(m, float("nan"))) for m in metric_names], r.error or ""])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        metric_names = ["au_prc"] + sorted({k for r in self.runs for k in r.metrics} - {"au_prc"})
        w.writerow(["step", "system", "n_runs"] + [f"{m}_{s}" for m in metric_names for s in ("mean", "std")])
        keys = sorted({(r.step, r.system) for r in self.runs})
        sums = {m: self.summary(m) for m in metric_names}
        for key in keys:
            n_ok = sum(1 for r in self.runs if (r.step, r.system) == key and r.error is None)
            row = [key[0], key[1], n_ok]
            for m in metric_names:
                mean, std = sums[m].get(key, (float("nan"), float("nan")))
                row += [repr(mean), repr(std)]
            w.writerow(row)
        return buf.getvalue()


def run_system(
    system: str, data: TabularDataset, circuit: ConstraintCircuit, hidden: int, cfg: TrainConfig, init_seed: int
) -> TrainedSystem:
    model = init_model((data.num_features, hidden, data.num_classes), "tanh", init_seed)
    trained, _ = train(model, data, circuit, config=cfg, system=system)
    return trained


def evaluate_system(system: TrainedSystem, data: TabularDataset, with_mc: bool = False) -> tuple[float, dict]:
    X, Y = data.split("test")
    scores = system.infer(X)
    extra = {}
    if with_mc:
        rep = mc_metrics(scores, Y)
        extra = {k: v for k, v in rep.as_dict().items() if k not in ("directions", "au_prc")}
    return au_prc(scores, Y), extra


def _train_world(task: tuple) -> list[RunResult]:
    """Train every system on one (step, run) world. Top level so worker processes can pickle it."""
    kind, step, run, steps, n, seed, systems, hidden, cfg = task
    exp = EXPERIMENT_IDS[kind]
    if kind == "nine_rect":
        data, rules = gen_nine_rect(_seed_int(seed, exp, step, run, 0), n)
    else:
        world = sweep_world(kind, step, _seed_int(seed, exp, step, run, 0), n)
        if steps != SWEEP_STEPS:
            world.rects["R1"] = sweep_inner_rect(step, steps)
        data, rules = gen_rectangles(world), world.rules
    circuit = compile_rules(rules)
    init_seed = _seed_int(seed, exp, step, run, 1)
    out = []
    for system in systems:
        try:
            trained = run_system(system, data, circuit, hidden, cfg, init_seed)
            score, extra = evaluate_system(trained, data, with_mc=(kind == "lcmc_sweep"))
            out.append(RunResult(step, run, system, score, extra))
        except (RuntimeError, FloatingPointError) as exc:
            out.append(RunResult(step, run, system, float("nan"), {}, str(exc)))
    return out


def _run_tasks(tasks: list[tuple], workers: int, progress) -> list[RunResult]:
    results: list[RunResult] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = pool.map(_train_world, tasks)
            for batch in batches:
                results += batch
                for r in batch if progress else ():
                    progress(r)
        return results
    for task in tasks:
        batch = _train_world(task)
        results += batch
        for r in batch if progress else ():
            progress(r)
    return results


def sweep_experiment(
    kind: str,
    runs: int = 10,
    config: TrainConfig | None = None,
    steps: int = SWEEP_STEPS,
    hidden: int = 4,
    n: int = 5000,
    seed: int = 0,
    systems: tuple[str, ...] | None = None,
    step_list: list[int] | None = None,
    progress=None,
    workers: int = 1,
) -> SweepReport:
    """Train every system on every (step, run) world and collect test metrics.

    All systems share the data and the initial weights of a (step, run).
    A run that diverges is recorded with its error and the sweep goes on.
    With ``workers > 1`` worlds train in separate processes; the report is
    identical to the sequential one.
    """
    if kind not in SWEEP_SYSTEMS:
        raise ValueError(f"unknown sweep {kind!r}")
    cfg = config or TrainConfig()
    systems = tuple(systems or SWEEP_SYSTEMS[kind])
    chosen = list(step_list or range(1, steps + 1))
    geometry = [{"step": s, "R1": sweep_inner_rect(s, steps).as_list(), "R2": OUTER.as_list()} for s in chosen]
    tasks = [(kind, s, run, steps, n, seed, systems, hidden, cfg) for s in chosen for run in range(runs)]
    results = _run_tasks(tasks, workers, progress)
    return SweepReport(kind, results, geometry, {"hidden": hidden, "n": n, "seed": seed, "epochs": cfg.epochs, "lr": cfg.lr})


def nine_rect_experiment(
    runs: int = 10,
    config: TrainConfig | None = None,
    hidden: int = 7,
    n: int = 5000,
    seed: int = 0,
    systems: tuple[str, ...] = ("ccn_closs", "h_cm_bce"),
    progress=None,
    workers: int = 1,
) -> SweepReport:
    cfg = config or TrainConfig()
    tasks = [("nine_rect", 1, run, 1, n, seed, tuple(systems), hidden, cfg) for run in range(runs)]
    results = _run_tasks(tasks, workers, progress)
    geometry = [{"step": 1, **nine_rect_world(0, 1).describe()}]
    return SweepReport("nine_rect", results, geometry, {"hidden": hidden, "n": n, "seed": seed, "epochs": cfg.epochs, "lr": cfg.lr})


def decision_grid(system: TrainedSystem, resolution: int = 200) -> str:
    """CSV of the system's scores over a ``resolution`` x ``resolution`` lattice."""
    ticks = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(ticks, ticks)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    scores = system.infer(pts)
    names = system.circuit.classes.names if system.circuit is not None else [f"c{i}" for i in range(scores.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", *names])
    for p, s in zip(pts, scores):
        w.writerow([repr(float(p[0])), repr(float(p[1])), *[repr(float(v)) for v in s]])
    return buf.getvalue()


MISSING = {"", "?", "na", "nan", "null", "none"}


def load_dataset(features_path: str | Path, schema, splits=(0.6, 0.2, 0.2), seed: int = 0) -> TabularDataset:
    """Load a CSV with a header row and preprocess it.

    ``schema`` (a mapping or a path to a JSON document) names the ``labels``
    columns and optionally ``categorical`` and ``ignore`` columns, and may set
    ``split`` to a column holding ``train``/``val``/``test``. Otherwise
    ``splits`` gives train/val/test fractions for a seeded shuffle.

    Categorical columns become one indicator column per value seen in the
    training split; missing numeric values take the training mean; numeric
    features are standardized with training statistics.
    """
    if not isinstance(schema, dict):
        schema = json.loads(Path(schema).read_text(encoding="utf-8"))
    with open(features_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty CSV")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    col = {h: i for i, h in enumerate(header)}
    labels = list(schema.get("labels", []))
    categorical = list(schema.get("categorical", []))
    ignore = set(schema.get("ignore", []))
    split_col = schema.get("split")
    needed = labels + categorical + ([split_col] if split_col else []) + sorted(ignore)
    missing = [c for c in needed if c not in col]
    if missing:
        raise ValueError(f"missing columns: {missing}")
    if not labels:
        raise ValueError("schema names no label columns")
    n = len(body)
    if n == 0:
        raise ValueError("CSV has no data rows")

    Y = np.zeros((n, len(labels)), dtype=np.int8)
    for j, name in enumerate(labels):
        for i, r in enumerate(body):
            v = r[col[name]].strip()
            if v not in ("0", "1", "0.0", "1.0"):
                raise ValueError(f"label column {name!r} has non-binary value {v!r} on data row {i + 1}")
            Y[i, j] = int(float(v))

    if split_col:
        tags = np.array([r[col[split_col]].strip().lower() for r in body])
        bad = set(tags) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        tr, va, te = (np.flatnonzero(tags == t) for t in ("train", "val", "test"))
    else:
        fr = np.asarray(splits, dtype=float)
        if fr.shape != (3,) or (fr < 0).any() or not np.isclose(fr.sum(), 1.0):
            raise ValueError("splits must be three non-negative fractions summing to 1")
        perm = np.random.default_rng(seed).permutation(n)
        a = int(round(fr[0] * n))
        b = a + int(round(fr[1] * n))
        tr, va, te = np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:])
    if len(tr) == 0 or len(te) == 0 or (split_col is None and splits[1] > 0 and len(va) == 0):
        raise ValueError("empty split")

    features = [h for h in header if h not in set(labels) | ignore | {split_col}]
    blocks, names = [], []
    for name in features:
        raw = [r[col[name]].strip() for r in body]
        if name in categorical:
            values = sorted({raw[i] for i in tr if raw[i].lower() not in MISSING})
            for v in values:
                blocks.append(np.array([x == v for x in raw], dtype=np.float64))
                names.append(f"{name}={v}")
            continue
        try:
            vals = np.array([np.nan if x.lower() in MISSING else float(x) for x in raw])
        except ValueError as exc:
            raise ValueError(f"column {name!r} is not numeric; declare it categorical") from exc
        train_vals = vals[tr][~np.isnan(vals[tr])]
        mean = float(train_vals.mean()) if train_vals.size else 0.0
        vals = np.where(np.isnan(vals), mean, vals)
        mu = vals[tr].mean()
        sd = vals[tr].std()
        vals = (vals - mu) / (sd if sd > 0 else 1.0)
        blocks.append(vals)
        names.append(name)
    X = np.column_stack(blocks) if blocks else np.zeros((n, 0))
    return TabularDataset(X, Y, ClassTable(tuple(labels)), tr, te, va, meta={"features": names})
