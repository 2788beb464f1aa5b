"""Feedforward networks, Adam, training loops and the baseline wrappers."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .circuit import ConstraintCircuit
from .data import TabularDataset
from .loss import EPS, _bce_terms, _scatter_rows, hmc_targets_and_grad_routes
from .metrics import UndefinedMetricError, au_prc
from .module import Evaluation, _evaluate, hmc_gather_index

ACTIVATIONS = ("tanh", "relu")
SYSTEMS = ("raw", "f_plus_min", "g_plus_max", "h_plus_postproc", "h_cm_bce", "ccn_closs")
SYSTEM_LOSS = {
    "raw": "bce",
    "f_plus_min": "bce",
    "g_plus_max": "bce",
    "h_plus_postproc": "bce",
    "h_cm_bce": "cm_bce",
    "ccn_closs": "closs",
}
CHECKPOINT_MAGIC = b"CMLCKPT\0"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input.
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MlpModel:
    """Dense layers over one flat parameter buffer; sigmoid outputs.

    ``weights[i]`` has shape (fan_in, fan_out) and, like ``biases[i]``, is a
    view into ``params``.
    """

    def __init__(self, sizes, activation: str = "tanh", params: np.ndarray | None = None):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        count = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if params is None:
            params = np.zeros(count)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (count,):
            raise ValueError(f"expected {count} parameters, got {params.shape}")
        self.params = params
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        o = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(params[o : o + a * b].reshape(a, b))
            o += a * b
            self.biases.append(params[o : o + b])
            o += b

    @property
    def num_params(self) -> int:
        return self.params.size

    @property
    def num_outputs(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.sizes, self.activation, self.params.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MlpModel)
            and self.sizes == other.sizes
            and self.activation == other.activation
            and np.array_equal(self.params, other.params)
        )


def init_model(sizes, nonlinearity: str = "tanh", seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    model = MlpModel(sizes, nonlinearity)
    rng = np.random.default_rng(seed)
    for w in model.weights:
        bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return model


@dataclass
class _Cache:
    inputs: list[np.ndarray]  # input of every layer (after dropout)
    hidden: list[np.ndarray]  # hidden activations before dropout
    masks: list[np.ndarray | None]
    out: np.ndarray


def _forward(model: MlpModel, x: np.ndarray, dropout: float = 0.0, rng=None) -> _Cache:
    inputs, hidden, masks = [], [], []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w
        z += b
        if i == last:
            a = sigmoid(z)
            break
        a = np.tanh(z) if model.activation == "tanh" else np.maximum(z, 0.0)
        hidden.append(a)
        mask = None
        if dropout > 0.0:
            mask = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
            a = a * mask
        masks.append(mask)
    return _Cache(inputs, hidden, masks, a)


def forward(model: MlpModel, x, train: bool = False, dropout: float = 0.0, rng=None) -> np.ndarray:
    """Sigmoid outputs for a batch; dropout only applies when ``train`` is set."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.sizes[0]:
        raise ValueError(f"expected {model.sizes[0]} input features, got {x.shape[1]}")
    if train and dropout > 0.0 and rng is None:
        rng = np.random.default_rng()
    out = _forward(model, x, dropout if train else 0.0, rng).out
    return out[0] if single else out


def _backward(model: MlpModel, cache: _Cache, g_out: np.ndarray) -> np.ndarray:
    """Parameter gradient given the gradient w.r.t. the sigmoid outputs."""
    grad = np.empty_like(model.params)
    gm = MlpModel(model.sizes, model.activation, grad)
    out = cache.out
    g = g_out * out * (1.0 - out)
    for i in range(len(model.weights) - 1, -1, -1):
        a = cache.inputs[i]
        np.dot(a.T, g, out=gm.weights[i])
        np.dot(np.ones(g.shape[0]), g, out=gm.biases[i])
        if i == 0:
            break
        g = g @ model.weights[i].T
        mask = cache.masks[i - 1]
        if mask is not None:
            g = g * mask
        act = cache.hidden[i - 1]
        if model.activation == "tanh":
            g = g * (1.0 - act * act)
        else:
            g = g * (act > 0.0)
    return grad


class Adam:
    """Bias-corrected Adam acting in place on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self._tmp = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        np.multiply(grad, grad, out=self._tmp)
        self._tmp *= 1.0 - b2
        self.v += self._tmp
        mhat = self.m / (1.0 - b1**self.t)
        vhat = self.v / (1.0 - b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 20000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    dropout: float = 0.0
    batch_size: int | None = None  # None = full batch
    patience: int | None = None  # None = no early stopping
    eval_every: int = 1
    retrain: bool = True
    seed: int = 0
    hmc_fast_path: bool = True
    engine: str = "auto"  # auto, lean or reference

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("invalid optimizer settings")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid regularization settings")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.engine not in ("auto", "lean", "reference"):
            raise ValueError("engine must be auto, lean or reference")

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        types = {"epochs": int, "batch_size": int, "patience": int, "eval_every": int, "seed": int}
        out = {}
        for k, v in d.items():
            if v is None or (isinstance(v, str) and v.lower() in ("none", "")):
                out[k] = None
            elif k == "engine":
                out[k] = str(v)
            elif k in ("retrain", "hmc_fast_path"):
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                out[k] = types.get(k, float)(v)
        return cls(**out)


def _ancestor_index(mask: np.ndarray) -> np.ndarray:
    m = mask.T
    lists = [[a] + [b for b in np.flatnonzero(m[a]) if b != a] for a in range(m.shape[0])]
    width = max([len(x) for x in lists], default=1)
    return np.array([x + [x[0]] * (width - len(x)) for x in lists], dtype=np.intp)


def exclusive_labels(mask: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """1 for a class only when no proper descendant is also labelled."""
    proper = mask.astype(bool) & ~np.eye(mask.shape[0], dtype=bool)
    covered = (Y[:, None, :].astype(bool) & proper[None]).any(axis=2)
    return (Y.astype(bool) & ~covered).astype(Y.dtype)


@dataclass
class TrainedSystem:
    model: MlpModel
    kind: str
    circuit: ConstraintCircuit | None = None
    epochs_trained: int = 0

    def __post_init__(self):
        if self.kind not in SYSTEMS:
            raise ValueError(f"unknown system {self.kind!r}")
        needs_hmc = self.kind in ("f_plus_min", "g_plus_max")
        if needs_hmc and (self.circuit is None or not self.circuit.is_hmc):
            raise ValueError(f"{self.kind} needs a circuit compiled from a hierarchy")
        if self.kind != "raw" and self.circuit is None:
            raise ValueError(f"{self.kind} needs a circuit")
        if self.circuit is not None and self.circuit.num_classes != self.model.num_outputs:
            raise ValueError("model outputs do not match the circuit's classes")

    def postprocess(self, h: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if self.kind == "raw":
            return h
        if self.kind == "f_plus_min":
            return h[:, _ancestor_index(self.circuit.hmc_mask)].min(axis=2)
        if self.circuit.is_hmc:
            return h[:, hmc_gather_index(self.circuit)].max(axis=2)
        return _evaluate(self.circuit, h, None)

    def infer(self, x) -> np.ndarray:
        return self.postprocess(forward(self.model, x))


def wrap_baseline(model: MlpModel, kind: str, circuit: ConstraintCircuit | None = None) -> TrainedSystem:
    return TrainedSystem(model, kind, circuit)


class _LossFn:
    """Mean per-element loss and gradient w.r.t. the raw outputs."""

    def __init__(self, kind: str, circuit: ConstraintCircuit | None, fast_hmc: bool):
        if kind not in ("bce", "cm_bce", "closs"):
            raise ValueError(f"unknown loss {kind!r}")
        if kind != "bce" and circuit is None:
            raise ValueError(f"loss {kind!r} needs a circuit")
        self.kind = kind
        self.circuit = circuit
        self.index = hmc_gather_index(circuit) if (fast_hmc and circuit is not None and circuit.is_hmc) else None

    def __call__(self, h: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        n, L = h.shape
        scale = 1.0 / (n * L)
        if self.kind == "bce":
            loss, g = _bce_terms(h, y, EPS)
        elif self.index is not None:
            idx = self.index
            if self.kind == "cm_bce":
                cand = h[:, idx]
                w = cand.argmax(axis=2)
                t = np.take_along_axis(cand, w[:, :, None], axis=2)[:, :, 0]
                loss, gt = _bce_terms(t, y, EPS)
                g = _scatter_rows(n, L, idx[np.arange(L)[None, :], w], gt)
            else:
                t, cm_src, pos_src, _ = hmc_targets_and_grad_routes(idx, h, y)
                loss, gt = _bce_terms(t, y, EPS)
                g = _scatter_rows(n, L, cm_src, gt * (1.0 - y))
                g += _scatter_rows(n, L, pos_src, gt * y * np.take_along_axis(y, pos_src, axis=1))
        else:
            ev = Evaluation(self.circuit, h, y if self.kind == "closs" else None)
            loss, gt = _bce_terms(ev.output, y, EPS)
            g = ev.backward(gt)
        return loss * scale, g * scale


class _LeanFullBatch:
    """Full-batch epochs on a (units x rows) layout with preallocated buffers.

    Handles plain BCE and, for hierarchies, BCE after the module and the
    constraint loss via the descendant lists. Numerically it follows the
    general loop up to summation order.
    """

    def __init__(self, model: MlpModel, X: np.ndarray, Y: np.ndarray, loss_fn: _LossFn, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.kind = loss_fn.kind
        self.Xt = np.ascontiguousarray(X.T)
        self.Yt = np.ascontiguousarray(Y.T, dtype=np.float64)
        n = X.shape[0]
        self.n = n
        self.Z = [np.empty((s, n)) for s in model.sizes[1:]]
        self.ones = np.ones(n)
        self.grad = np.zeros_like(model.params)
        self.gm = MlpModel(model.sizes, model.activation, self.grad)
        self.cols = np.arange(n)
        if loss_fn.index is not None:
            idx = loss_fn.index
            self.desc = [sorted(set(int(b) for b in idx[a]) - {a}) for a in range(idx.shape[0])]
        else:
            self.desc = None

    @staticmethod
    def eligible(model: MlpModel, loss_fn: _LossFn, cfg: TrainConfig, n: int) -> bool:
        full = cfg.batch_size is None or cfg.batch_size >= n
        return full and cfg.dropout == 0.0 and (loss_fn.kind == "bce" or loss_fn.index is not None)

    def _route(self, h: np.ndarray, src_rows: np.ndarray):
        """Max over each class's descendants; ties keep the class itself, then
        the lowest index."""
        L = h.shape[0]
        best = h.copy()
        src = np.repeat(np.arange(L)[:, None], self.n, axis=1)
        for a, ds in enumerate(self.desc):
            row, s = best[a], src[a]
            for b in ds:
                win = src_rows[b] > row
                np.maximum(row, src_rows[b], out=row)
                np.putmask(s, win, b)
        return best, src

    def _loss(self, h: np.ndarray) -> tuple[float, np.ndarray]:
        y = self.Yt
        L, n = h.shape
        if self.kind == "bce":
            loss, g = _bce_terms(h, y, EPS)
            return loss, g
        cm, src = self._route(h, h)
        if self.kind == "cm_bce":
            t, weight = cm, None
        else:
            hy = h * y
            pos = hy.copy()
            psrc = np.repeat(np.arange(L)[:, None], n, axis=1)
            for a, ds in enumerate(self.desc):
                row, s = pos[a], psrc[a]
                for b in ds:
                    win = hy[b] > row
                    np.maximum(row, hy[b], out=row)
                    np.putmask(s, win, b)
            yes = y == 1.0
            t = np.where(yes, pos, cm)
            src = np.where(yes, psrc, src)
            weight = np.where(yes, np.take_along_axis(y, src, axis=0), 1.0)
        loss, gt = _bce_terms(t, y, EPS)
        if weight is not None:
            gt = gt * weight
        flat = (src * n + self.cols).ravel()
        return loss, np.bincount(flat, weights=gt.ravel(), minlength=L * n).reshape(L, n)

    def epoch(self, opt: "Adam") -> float:
        m, gm, Z = self.model, self.gm, self.Z
        last = len(m.weights) - 1
        a = self.Xt
        for i, (w, b) in enumerate(zip(m.weights, m.biases)):
            z = Z[i]
            np.dot(w.T, a, out=z)
            z += b[:, None]
            if i == last:
                z *= 0.5
                np.tanh(z, out=z)
                z += 1.0
                z *= 0.5
            elif m.activation == "tanh":
                np.tanh(z, out=z)
            else:
                np.maximum(z, 0.0, out=z)
            a = z
        h = Z[last]
        loss, g = self._loss(h)
        scale = 1.0 / h.size
        g *= scale
        g *= h * (1.0 - h)
        for i in range(last, -1, -1):
            prev = self.Xt if i == 0 else Z[i - 1]
            np.dot(prev, g.T, out=gm.weights[i])
            np.dot(g, self.ones, out=gm.biases[i])
            if i == 0:
                break
            g = m.weights[i] @ g
            if m.activation == "tanh":
                g *= 1.0 - prev * prev
            else:
                g *= prev > 0.0
        if self.cfg.weight_decay:
            self.grad += self.cfg.weight_decay * m.params
        opt.step(m.params, self.grad)
        return loss * scale


def _val_score(system: TrainedSystem, X: np.ndarray, Y: np.ndarray) -> float:
    try:
        return au_prc(system.infer(X), Y)
    except UndefinedMetricError:
        return float("nan")


def _fit(model: MlpModel, X, Y, loss_fn: _LossFn, cfg: TrainConfig, epochs: int, rng, monitor=None, engine: str = "auto"):
    """Run ``epochs`` epochs; ``monitor(epoch, loss)`` may return True to stop."""
    opt = Adam(model.num_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n = X.shape[0]
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    lean = None
    if engine == "lean" or (engine == "auto" and _LeanFullBatch.eligible(model, loss_fn, cfg, n)):
        if not _LeanFullBatch.eligible(model, loss_fn, cfg, n):
            raise ValueError("lean engine needs full batches, no dropout and a hierarchy or plain BCE")
        lean = _LeanFullBatch(model, X, Y, loss_fn, cfg)
    losses = []
    for epoch in range(1, epochs + 1):
        if lean is not None:
            mean = lean.epoch(opt)
        else:
            order = np.arange(n) if bs == n else rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                rows = order[start : start + bs]
                xb, yb = (X, Y) if bs == n else (X[rows], Y[rows])
                cache = _forward(model, xb, cfg.dropout, rng)
                loss, gh = loss_fn(cache.out, yb)
                grad = _backward(model, cache, gh)
                if cfg.weight_decay:
                    grad += cfg.weight_decay * model.params
                opt.step(model.params, grad)
                total += loss * len(rows)
            mean = total / n
        if not np.isfinite(mean):
            raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
        losses.append(mean)
        if monitor is not None and monitor(epoch, mean):
            break
    return losses


def train(
    model: MlpModel,
    dataset: TabularDataset,
    circuit: ConstraintCircuit | None,
    loss: str | None = None,
    config: TrainConfig | None = None,
    system: str | None = None,
) -> tuple[TrainedSystem, list[dict]]:
    """Train ``model`` in place and return the wrapped system plus history rows.

    ``system`` picks the inference wrapper (and, if ``loss`` is omitted, the
    matching training loss). With a patience and a non-empty validation split
    the run stops early on validation AU(PRC); with ``retrain`` the initial
    weights are then refit on train+validation for the best epoch count.
    """
    cfg = config or TrainConfig()
    if system is None:
        system = {"closs": "ccn_closs", "cm_bce": "h_cm_bce"}.get(loss or "bce", "h_plus_postproc" if circuit else "raw")
    loss = loss or SYSTEM_LOSS[system]
    wrapper = TrainedSystem(model, system, circuit)
    loss_fn = _LossFn(loss, circuit, cfg.hmc_fast_path)

    def targets(Y):
        Y = Y.astype(np.float64)
        return exclusive_labels(circuit.hmc_mask, Y) if system == "g_plus_max" else Y

    Xtr, Ytr = dataset.split("train")
    Xv, Yv = dataset.split("val")
    rng = np.random.default_rng([cfg.seed, 1])
    history: list[dict] = []
    early = cfg.patience is not None and len(Yv) > 0
    if not early:
        losses = _fit(model, Xtr, targets(Ytr), loss_fn, cfg, cfg.epochs, rng, engine=cfg.engine)
        history = [{"epoch": e + 1, "loss": l} for e, l in enumerate(losses)]
        wrapper.epochs_trained = len(losses)
        return wrapper, history

    initial = model.params.copy()
    state = {"best": -np.inf, "best_epoch": 0, "since": 0}

    def monitor(epoch, mean):
        row = {"epoch": epoch, "loss": mean}
        history.append(row)
        if epoch % cfg.eval_every:
            return False
        score = _val_score(wrapper, Xv, Yv)
        row["val_au_prc"] = score
        if score > state["best"]:
            state.update(best=score, best_epoch=epoch, since=0)
        else:
            state["since"] += 1
        return state["since"] >= cfg.patience

    _fit(model, Xtr, targets(Ytr), loss_fn, cfg, cfg.epochs, rng, monitor, cfg.engine)
    best_epoch = max(state["best_epoch"], 1) if cfg.epochs else 0
    if cfg.retrain:
        model.params[...] = initial
        Xall, Yall = dataset.train_and_val()
        rng = np.random.default_rng([cfg.seed, 2])
        losses = _fit(model, Xall, targets(Yall), loss_fn, cfg, best_epoch, rng, engine=cfg.engine)
        history += [{"epoch": e + 1, "loss": l, "phase": "retrain"} for e, l in enumerate(losses)]
    wrapper.epochs_trained = best_epoch
    return wrapper, history


def save_checkpoint(system: TrainedSystem, path: str | Path) -> None:
    """Magic, version, JSON header length, JSON header, little-endian float64 weights."""
    header = json.dumps(
        {"sizes": list(system.model.sizes), "activation": system.model.activation, "system": system.kind,
         "epochs_trained": system.epochs_trained, "dtype": "<f8"}
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(system.model.params.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, circuit: ConstraintCircuit | None = None) -> TrainedSystem:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    params = np.frombuffer(data[16 + hlen :], dtype="<f8").astype(np.float64)
    model = MlpModel(header["sizes"], header["activation"], params)
    return TrainedSystem(model, header["system"], circuit, header.get("epochs_trained", 0))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
