"""Small numpy neural-network engine.

Multilayer perceptrons with hand-written backpropagation, the node-to-edge
message function ``h_ij = f_e([h_i, h_j - h_i])``, the relation heads on top
of it, and plain mini-batch gradient descent.  Everything is float64 and
deterministic for a given seed.
"""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_KINDS = ("bce", "ce", "mse")


@dataclass
class MlpModel:
    """Affine layers with ReLU on hidden layers and identity on the output.

    ``weights[k]`` has shape ``(out, in)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width {w.shape[1]} != previous output "
                                 f"{self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(widths, seed: int) -> MlpModel:
    """Fan-in scaled uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"invalid widths {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, seed)


def zeros_mlp(widths) -> MlpModel:
    widths = [int(w) for w in widths]
    return MlpModel([np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                    [np.zeros(o) for o in widths[1:]])


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.in_width:
        raise ValueError(f"input width {X.shape[-1]} does not match model input width {model.in_width}")
    return X, single


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Forward pass for one vector ``(d,)`` or a batch ``(n, d)``."""
    X, single = _as_batch(model, x)
    a = X
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if k == last else np.maximum(z, 0.0)
    return a[0] if single else a


def forward_with_cache(model: MlpModel, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [X]
    a = X
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        a = z if k == last else np.maximum(z, 0.0)
        acts.append(a)
    return a, acts


def mlp_backward(model: MlpModel, acts: list[np.ndarray], grad_out: np.ndarray):
    """Backpropagate ``dL/d(output)``; returns ``(dW list, db list, dL/dX)``."""
    g = grad_out
    n = len(model.weights)
    dW = [None] * n
    db = [None] * n
    for k in range(n - 1, -1, -1):
        if k != n - 1:
            # ReLU derivative taken as 0 at exactly 0
            g = g * (acts[k + 1] > 0.0)
        dW[k] = g.T @ acts[k]
        db[k] = g.sum(axis=0)
        g = g @ model.weights[k]
    return dW, db, g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(Z):
    Z = np.asarray(Z, dtype=np.float64)
    m = Z.max(axis=-1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=-1, keepdims=True))


def softmax(Z):
    return np.exp(log_softmax(Z))


def loss_and_grad(kind: str, out: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean loss over the batch rows and its gradient w.r.t. ``out``."""
    n = out.shape[0]
    if kind == "bce":
        if out.shape[1] != 1:
            raise ValueError("bce expects a single logit per row")
        y = np.asarray(target, dtype=np.float64).reshape(n, 1)
        if np.any((y < 0) | (y > 1)):
            raise ValueError("bce targets must lie in [0, 1]")
        z = out
        # log(1 + e^z) - y z, evaluated stably
        loss = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
        return float(loss.sum() / n), (sigmoid(z) - y) / n
    if kind == "ce":
        y = np.asarray(target).reshape(n)
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise ValueError("cross-entropy targets must be class indices")
            y = y.astype(np.int64)
        k = out.shape[1]
        if np.any((y < 0) | (y >= k)):
            raise ValueError(f"class index out of range for {k} classes")
        logp = log_softmax(out)
        loss = -logp[np.arange(n), y].sum() / n
        g = np.exp(logp)
        g[np.arange(n), y] -= 1.0
        return float(loss), g / n
    if kind == "mse":
        y = np.asarray(target, dtype=np.float64).reshape(out.shape)
        d = out - y
        return float(0.5 * (d * d).sum() / n), d / n
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray
    loss: float


def mlp_gradients(model: MlpModel, x, loss_kind: str, target) -> Gradients:
    """Analytic gradients of the mean loss w.r.t. parameters and input."""
    X, single = _as_batch(model, x)
    if single and loss_kind in ("bce", "ce"):
        target = np.atleast_1d(target)
    out, acts = forward_with_cache(model, X)
    loss, g = loss_and_grad(loss_kind, out, target)
    dW, db, dX = mlp_backward(model, acts, g)
    return Gradients(dW, db, dX[0] if single else dX, loss)


# ---------------------------------------------------------------------------
# Message passing
# ---------------------------------------------------------------------------

@dataclass
class MessageState:
    node_features: np.ndarray
    edge_index: np.ndarray          # (m, 2) source, target
    edge_features: np.ndarray       # (m, d_e)
    step: int = 0


def message_inputs(node_features: np.ndarray, edge_index: np.ndarray) -> np.ndarray:
    """Rows ``[h_i, h_j - h_i]`` for every edge ``(i, j)``."""
    H = np.asarray(node_features, dtype=np.float64)
    E = np.asarray(edge_index, dtype=np.int64).reshape(-1, 2)
    hi = H[E[:, 0]]
    return np.concatenate([hi, H[E[:, 1]] - hi], axis=1)


def message_pass(graph, f_e: MlpModel, steps: int = 1) -> MessageState:
    """Edge features after ``steps`` node-to-edge passes.

    Node features are held fixed, so every pass recomputes the same edge
    features from the node features; ``steps`` only advances the counter.
    """
    H = np.asarray(graph.node_features, dtype=np.float64)
    if f_e.in_width != 2 * H.shape[1]:
        raise ValueError(f"f_e input width {f_e.in_width} != 2 x node width {H.shape[1]}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    E = np.asarray(graph.edge_index, dtype=np.int64).reshape(-1, 2)
    feats = np.zeros((0, f_e.out_width))
    for _ in range(steps):
        if len(E):
            feats = mlp_forward(f_e, message_inputs(H, E))
    return MessageState(H, E, feats, steps)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.0
    hidden: tuple[int, ...] = (128, 128)
    edge_feature_width: int = 128
    # loss per head; fixed by the class structure of each head
    losses: dict = field(default_factory=lambda: {
        "edge": "bce", "quad": "bce", "support": "ce", "angle": "ce"})

    def __post_init__(self):
        if not self.learning_rate > 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)
        for head, kind in self.losses.items():
            if kind not in LOSS_KINDS:
                raise ValueError(f"head {head}: unknown loss {kind}")


class _Sgd:
    def __init__(self, params: list[np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]):
        for p, v, g in zip(self.params, self.velocity, grads):
            if self.momentum:
                v *= self.momentum
                v -= self.lr * g
                p += v
            else:
                p -= self.lr * g


def _flat_grads(dW, db) -> list[np.ndarray]:
    out = []
    for w, b in zip(dW, db):
        out += [w, b]
    return out


@dataclass
class TrainLog:
    losses: dict[str, list[float]] = field(default_factory=dict)
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    val_accuracy: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"losses": self.losses, "accuracy": self.accuracy, "val_accuracy": self.val_accuracy}


def train_classifier(X, y, cfg: TrainConfig, loss_kind: str = "bce", n_out: int = 1,
                     init: MlpModel | None = None, name: str = "classifier"):
    """Mini-batch gradient descent on one MLP; returns ``(model, per-epoch losses)``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("empty training set")
    model = init.copy() if init is not None else init_mlp((X.shape[1],) + cfg.hidden + (n_out,), cfg.seed)
    opt = _Sgd(model.params(), cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            out, acts = forward_with_cache(model, X[b])
            _, g = loss_and_grad(loss_kind, out, y[b])
            dW, db, _ = mlp_backward(model, acts, g)
            opt.step(_flat_grads(dW, db))
        loss, _ = loss_and_grad(loss_kind, mlp_forward(model, X), y)
        losses.append(loss)
        logger.debug("%s epoch %d loss %.5f", name, epoch, loss)
    return model, losses


@dataclass
class RelationModels:
    f_e: MlpModel
    support_head: MlpModel
    angle_head: MlpModel

    def as_dict(self) -> dict[str, MlpModel]:
        return {"f_e": self.f_e, "support_head": self.support_head, "angle_head": self.angle_head}


def init_relation_models(node_width: int, cfg: TrainConfig, n_support: int = 3,
                         n_angle: int = 6) -> RelationModels:
    d = cfg.edge_feature_width
    return RelationModels(
        init_mlp((2 * node_width,) + cfg.hidden + (d,), cfg.seed),
        init_mlp((d,) + cfg.hidden + (n_support,), cfg.seed + 1),
        init_mlp((d,) + cfg.hidden + (n_angle,), cfg.seed + 2),
    )


def relation_samples(graphs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack message inputs of all labelled edges.

    Returns ``(X, head, label)`` where ``head`` is 0 for object-layout edges
    (support classes) and 1 for object-object edges (angle bins).
    """
    Xs, heads, labels = [], [], []
    for g in graphs:
        idx, head, lab = g.labelled_edges()
        if len(idx) == 0:
            continue
        Xs.append(message_inputs(g.node_features, g.edge_index[idx]))
        heads.append(head)
        labels.append(lab)
    if not Xs:
        return np.zeros((0, 0)), np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(Xs), np.concatenate(heads), np.concatenate(labels)


def predict_relations(models: RelationModels, X: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Arg-max class per edge for the head matching its edge type."""
    pred = np.zeros(len(X), dtype=np.int64)
    if len(X) == 0:
        return pred
    H = mlp_forward(models.f_e, X)
    for h, model in ((0, models.support_head), (1, models.angle_head)):
        m = head == h
        if np.any(m):
            # first maximal class wins ties
            pred[m] = np.argmax(mlp_forward(model, H[m]), axis=1)
    return pred


def _relation_epoch_stats(models: RelationModels, X, head, label) -> tuple[dict, dict]:
    losses, acc = {}, {}
    if len(X) == 0:
        return losses, acc
    H = mlp_forward(models.f_e, X)
    for h, name, model in ((0, "support", models.support_head), (1, "angle", models.angle_head)):
        m = head == h
        if not np.any(m):
            continue
        out = mlp_forward(model, H[m])
        losses[name], _ = loss_and_grad("ce", out, label[m])
        acc[name] = float(np.mean(np.argmax(out, axis=1) == label[m]))
    return losses, acc


def relation_batch_gradients(models: RelationModels, X, head, label) -> tuple[float, list[np.ndarray]]:
    """Joint loss of one batch and its gradient for every parameter.

    Each head's loss is its summed cross-entropy divided by the batch size;
    both backpropagate through the shared ``f_e``.  Gradients are ordered
    like ``f_e.params() + support_head.params() + angle_head.params()``.
    """
    n = len(X)
    H, acts_e = forward_with_cache(models.f_e, X)
    gH = np.zeros_like(H)
    total = 0.0
    head_grads = []
    for h, model in ((0, models.support_head), (1, models.angle_head)):
        m = head == h
        if np.any(m):
            out, acts = forward_with_cache(model, H[m])
            loss, g = loss_and_grad("ce", out, label[m])
            # rescale from per-head mean to per-batch mean
            total += loss * (m.sum() / n)
            dW, db, dH = mlp_backward(model, acts, g * (m.sum() / n))
            gH[m] = dH
        else:
            dW = [np.zeros_like(w) for w in model.weights]
            db = [np.zeros_like(v) for v in model.biases]
        head_grads.append(_flat_grads(dW, db))
    dW, db, _ = mlp_backward(models.f_e, acts_e, gH)
    return total, _flat_grads(dW, db) + head_grads[0] + head_grads[1]


def train_relations(graphs, cfg: TrainConfig, val_graphs=None, init: RelationModels | None = None,
                    n_support: int = 3, n_angle: int = 6) -> tuple[RelationModels, TrainLog]:
    """Jointly train ``f_e`` and both relation heads with cross-entropy.

    Each batch mixes object-layout and object-object edges; each head's loss
    is its summed cross-entropy divided by the batch size, and both losses
    backpropagate through the shared ``f_e``.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("empty training set")
    X, head, label = relation_samples(graphs)
    if len(X) == 0:
        raise ValueError("training graphs carry no labelled edges")
    sup = head == 0
    if np.any((label[sup] < 0) | (label[sup] >= n_support)):
        raise ValueError(f"support label out of range [0, {n_support})")
    if np.any((label[~sup] < 0) | (label[~sup] >= n_angle)):
        raise ValueError(f"angle label out of range [0, {n_angle})")
    node_width = X.shape[1] // 2
    models = init if init is not None else init_relation_models(node_width, cfg, n_support, n_angle)
    models = RelationModels(models.f_e.copy(), models.support_head.copy(), models.angle_head.copy())
    params = models.f_e.params() + models.support_head.params() + models.angle_head.params()
    opt = _Sgd(params, cfg.learning_rate, cfg.momentum)
    if val_graphs:
        Xv, hv, lv = relation_samples(val_graphs)
    else:
        Xv = None
    rng = np.random.default_rng(cfg.seed + 3)
    log = TrainLog(losses={"support": [], "angle": []}, accuracy={"support": [], "angle": []},
                   val_accuracy={"support": [], "angle": []})
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            _, grads = relation_batch_gradients(models, X[b], head[b], label[b])
            opt.step(grads)
        losses, acc = _relation_epoch_stats(models, X, head, label)
        for name in ("support", "angle"):
            if name in losses:
                log.losses[name].append(losses[name])
                log.accuracy[name].append(acc[name])
        if Xv is not None and len(Xv):
            _, vacc = _relation_epoch_stats(models, Xv, hv, lv)
            for name, v in vacc.items():
                log.val_accuracy[name].append(v)
        logger.debug("relations epoch %d losses %s", epoch, losses)
    return models, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_models(path, models: dict[str, MlpModel], meta: dict | None = None) -> None:
    """Write named models to one ``.npz`` archive (bit-exact float64)."""
    arrays = {}
    header = {"format": "scanlayout.models", "version": CHECKPOINT_VERSION, "models": {},
              "meta": meta or {}}
    for name in sorted(models):
        m = models[name]
        header["models"][name] = {"widths": list(m.widths), "seed": m.seed}
        for k, (w, b) in enumerate(zip(m.weights, m.biases)):
            arrays[f"{name}/W{k}"] = w
            arrays[f"{name}/b{k}"] = b
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    # fixed zip timestamps keep checkpoints byte-identical across runs
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[key]), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def load_models(path) -> tuple[dict[str, MlpModel], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != "scanlayout.models":
            raise ValueError(f"{path}: not a model checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        models = {}
        for name, info in header["models"].items():
            n = len(info["widths"]) - 1
            models[name] = MlpModel([data[f"{name}/W{k}"] for k in range(n)],
                                    [data[f"{name}/b{k}"] for k in range(n)], info["seed"])
            if list(models[name].widths) != info["widths"]:
                raise ValueError(f"{path}: widths of {name} disagree with header")
    return models, header["meta"]
