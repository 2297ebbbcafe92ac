"""Surrogate and victim classifiers over a fixed graph.

The surrogate is the linearized two-hop model: logits = Ahat^2 X W, trained
full-batch on precomputed two-hop features. The victim is the standard
two-layer graph convolution Ahat relu(Ahat X W1) W2 with manual
backpropagation; no autograd framework is involved.

Both trainers run deterministic full-batch gradient descent with a
backtracking line search: a step is only accepted if the training loss does
not increase, so the recorded training-loss history is monotonically
non-increasing by construction. The step size starts at the configured
learning rate, grows gently while steps are accepted outright, and shrinks
when they are not. Early stopping watches validation loss and restores the
best-validation weights.
"""

import base64
import json
import logging
from dataclasses import dataclass

import numpy as np

from .graphs import BoundsError, Graph, NormalizedAdjacency, Split

log = logging.getLogger(__name__)

_GROW = 1.25
_SHRINK = 0.5
_MAX_HALVINGS = 30


class CheckpointError(ValueError):
    """Unreadable or inconsistent model checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by both trainers (hidden is victim-only)."""

    learning_rate: float
    l2: float
    epochs: int
    patience: int
    seed: int
    hidden: int = 0


def surrogate_config(seed: int, epochs: int = 200) -> TrainConfig:
    return TrainConfig(learning_rate=0.1, l2=1e-5, epochs=epochs,
                       patience=30, seed=seed)


def victim_config(seed: int, epochs: int = 200, hidden: int = 16) -> TrainConfig:
    return TrainConfig(learning_rate=0.01, l2=5e-4, epochs=epochs,
                       patience=30, seed=seed, hidden=hidden)


@dataclass(frozen=True)
class SurrogateModel:
    weights: np.ndarray  # d x C
    num_classes: int
    train_history: tuple = ()
    val_history: tuple = ()


@dataclass(frozen=True)
class VictimModel:
    w1: np.ndarray  # d x hidden
    w2: np.ndarray  # hidden x C
    num_classes: int
    train_history: tuple = ()
    val_history: tuple = ()


# ---------------------------------------------------------------- numerics


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def two_hop_features(g: Graph, na: NormalizedAdjacency,
                     rows: np.ndarray) -> np.ndarray:
    """Dense (len(rows), d) block of Ahat^2 X, built row-wise so only the
    two-hop neighborhoods of the requested rows are touched."""
    block = (na.ahat[rows] @ na.ahat) @ g.features
    return np.asarray(block.todense())


# ---------------------------------------------------------------- surrogate


def surrogate_loss_and_grad(w: np.ndarray, feats: np.ndarray,
                            labels: np.ndarray, l2: float):
    """Mean cross-entropy of softmax(feats @ w) plus (l2/2)||w||^2, and its
    gradient. feats rows are two-hop features of the labeled nodes."""
    m = len(labels)
    logits = feats @ w
    logp = log_softmax(logits)
    data_loss = -logp[np.arange(m), labels].mean()
    loss = data_loss + 0.5 * l2 * float((w * w).sum())
    p = np.exp(logp)
    p[np.arange(m), labels] -= 1.0
    grad = feats.T @ (p / m) + l2 * w
    return loss, grad


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _descend(w_list, loss_of, grad_of, val_loss_of, cfg: TrainConfig):
    """Shared descent loop over a list of weight arrays.

    loss_of/grad_of evaluate the regularized training objective; val_loss_of
    the validation cross-entropy. Returns (best weights, train history,
    val history)."""
    step = cfg.learning_rate
    loss = loss_of(w_list)
    train_hist = [loss]
    val = val_loss_of(w_list)
    val_hist = [val]
    best_val, best_w, stale = val, [w.copy() for w in w_list], 0

    for _ in range(cfg.epochs):
        grads = grad_of(w_list)
        accepted = False
        for attempt in range(_MAX_HALVINGS):
            trial = [w - step * dw for w, dw in zip(w_list, grads)]
            trial_loss = loss_of(trial)
            if trial_loss <= loss:
                accepted = True
                if attempt == 0:
                    step *= _GROW
                break
            step *= _SHRINK
        if not accepted:
            break  # no descent direction at any tried step: converged
        w_list, loss = trial, trial_loss
        train_hist.append(loss)
        val = val_loss_of(w_list)
        val_hist.append(val)
        if val < best_val - 1e-12:
            best_val, best_w, stale = val, [w.copy() for w in w_list], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best_w, tuple(train_hist), tuple(val_hist)


def train_surrogate(g: Graph, na: NormalizedAdjacency, split: Split,
                    cfg: TrainConfig) -> SurrogateModel:
    """Fit the linearized model on the train split, early-stopping on val.

    Deterministic: a fixed (graph, split, config) always yields the same
    weights bit for bit.
    """
    if len(split.train) == 0 or len(split.val) == 0:
        raise BoundsError("surrogate training needs non-empty train and val")
    y_train = g.labels[split.train]
    y_val = g.labels[split.val]
    if y_train.min() < 0 or y_val.min() < 0:
        raise BoundsError("train/val contain unlabeled nodes")
    f_train = two_hop_features(g, na, split.train)
    f_val = two_hop_features(g, na, split.val)
    rng = np.random.default_rng(cfg.seed)
    w0 = _glorot(rng, g.num_features, g.num_classes)

    def loss_of(ws):
        return surrogate_loss_and_grad(ws[0], f_train, y_train, cfg.l2)[0]

    def grad_of(ws):
        return [surrogate_loss_and_grad(ws[0], f_train, y_train, cfg.l2)[1]]

    def val_loss_of(ws):
        return _cross_entropy(f_val @ ws[0], y_val)

    best, th, vh = _descend([w0], loss_of, grad_of, val_loss_of, cfg)
    return SurrogateModel(weights=best[0], num_classes=g.num_classes,
                          train_history=th, val_history=vh)


# ---------------------------------------------------------------- victim


def victim_forward(w1, w2, g: Graph, na: NormalizedAdjacency):
    """Returns (pre-activation, hidden, logits) for all nodes."""
    pre = na.ahat @ (g.features @ w1)
    hidden = np.maximum(pre, 0.0)
    logits = na.ahat @ (hidden @ w2)
    return pre, hidden, logits


def victim_loss_and_grad(w1, w2, g: Graph, na: NormalizedAdjacency,
                         rows: np.ndarray, labels: np.ndarray, l2: float):
    """Regularized training loss and (dW1, dW2) by manual backprop through
    both layers and the fixed normalized adjacency."""
    m = len(labels)
    pre, hidden, logits = victim_forward(w1, w2, g, na)
    logp = log_softmax(logits[rows])
    data_loss = -logp[np.arange(m), labels].mean()
    loss = data_loss + 0.5 * l2 * (float((w1 * w1).sum()) + float((w2 * w2).sum()))

    dz = np.zeros_like(logits)
    p = np.exp(logp)
    p[np.arange(m), labels] -= 1.0
    dz[rows] = p / m
    adz = na.ahat @ dz
    dw2 = hidden.T @ adz + l2 * w2
    dhidden = adz @ w2.T
    dhidden[pre <= 0.0] = 0.0
    dw1 = g.features.T @ (na.ahat @ dhidden) + l2 * w1
    return loss, dw1, dw2


def train_victim(g: Graph, na: NormalizedAdjacency, split: Split,
                 cfg: TrainConfig) -> VictimModel:
    """Fit the two-layer graph convolution (see train_surrogate for the
    descent and early-stopping behavior)."""
    if cfg.hidden < 1:
        raise BoundsError("victim needs hidden width >= 1")
    if len(split.train) == 0 or len(split.val) == 0:
        raise BoundsError("victim training needs non-empty train and val")
    y_train = g.labels[split.train]
    y_val = g.labels[split.val]
    if y_train.min() < 0 or y_val.min() < 0:
        raise BoundsError("train/val contain unlabeled nodes")
    rng = np.random.default_rng(cfg.seed)
    w1 = _glorot(rng, g.num_features, cfg.hidden)
    w2 = _glorot(rng, cfg.hidden, g.num_classes)

    def loss_of(ws):
        return victim_loss_and_grad(ws[0], ws[1], g, na, split.train,
                                    y_train, cfg.l2)[0]

    def grad_of(ws):
        _, d1, d2 = victim_loss_and_grad(ws[0], ws[1], g, na, split.train,
                                         y_train, cfg.l2)
        return [d1, d2]

    def val_loss_of(ws):
        logits = victim_forward(ws[0], ws[1], g, na)[2]
        return _cross_entropy(logits[split.val], y_val)

    best, th, vh = _descend([w1, w2], loss_of, grad_of, val_loss_of, cfg)
    return VictimModel(w1=best[0], w2=best[1], num_classes=g.num_classes,
                       train_history=th, val_history=vh)


# ---------------------------------------------------------------- inference


def logits_all(model, g: Graph, na: NormalizedAdjacency) -> np.ndarray:
    """Raw class scores for every node."""
    if isinstance(model, SurrogateModel):
        xw = g.features @ model.weights
        return np.asarray(na.ahat @ (na.ahat @ xw))
    if isinstance(model, VictimModel):
        return victim_forward(model.w1, model.w2, g, na)[2]
    raise TypeError(f"unknown model type {type(model).__name__}")


def logits_rows(model, g: Graph, na: NormalizedAdjacency,
                rows: np.ndarray) -> np.ndarray:
    """Raw class scores for the requested nodes only. For the surrogate this
    touches just the two-hop neighborhoods; the victim always needs the
    full forward pass."""
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    if isinstance(model, SurrogateModel):
        return two_hop_features(g, na, rows) @ model.weights
    return logits_all(model, g, na)[rows]


def predict_proba(model, g: Graph, na: NormalizedAdjacency,
                  rows=None) -> np.ndarray:
    z = logits_all(model, g, na) if rows is None else logits_rows(model, g, na, rows)
    return softmax(z)


def predict(model, g: Graph, na: NormalizedAdjacency, rows=None) -> np.ndarray:
    """Predicted class per node (argmax, lowest class wins ties)."""
    z = logits_all(model, g, na) if rows is None else logits_rows(model, g, na, rows)
    return z.argmax(axis=-1)


def margin(model, g: Graph, na: NormalizedAdjacency, node: int,
           true_class: int | None = None) -> float:
    """Score of the true class minus the best other class at one node.

    Positive iff the node is classified correctly (ties count as errors).
    Victim margins are computed on log-probabilities, surrogate margins on
    raw logits. true_class defaults to the node's label.
    """
    if true_class is None:
        true_class = int(g.labels[node])
        if true_class < 0:
            raise BoundsError(f"node {node} is unlabeled; pass true_class")
    z = logits_rows(model, g, na, np.array([node]))[0]
    if isinstance(model, VictimModel):
        z = log_softmax(z[None, :])[0]
    rival = np.delete(z, true_class).max()
    return float(z[true_class] - rival)


def attack_loss(surrogate: SurrogateModel, g: Graph, na: NormalizedAdjacency,
                v0: int, c_old: int, c_new: int | None = None) -> float:
    """Surrogate logit of the original class minus the attacked class at
    the target; smaller means a stronger attack. With c_new unset the
    strongest rival (max over classes != c_old) is used.

    Negative exactly when the surrogate no longer ranks c_old first (for
    the unset-c_new form)."""
    z = logits_rows(surrogate, g, na, np.array([v0]))[0]
    if c_new is None:
        return float(z[c_old] - np.delete(z, c_old).max())
    if c_new == c_old:
        raise BoundsError("c_new must differ from c_old")
    return float(z[c_old] - z[c_new])


def runner_up_class(surrogate: SurrogateModel, g: Graph,
                    na: NormalizedAdjacency, v0: int, c_old: int) -> int:
    """Most confusable class at the target: argmax over classes != c_old of
    the surrogate logits (lowest index wins ties)."""
    z = logits_rows(surrogate, g, na, np.array([v0]))[0].copy()
    z[c_old] = -np.inf
    return int(z.argmax())


# ---------------------------------------------------------------- checkpoints


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "dtype": "float64",
            "encoding": "base64",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(name: str, spec: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in spec["shape"])
        encoding = spec.get("encoding", "base64")
        if spec.get("dtype", "float64") != "float64":
            raise CheckpointError(f"array {name!r}: unsupported dtype")
        if encoding == "base64":
            raw = base64.b64decode(spec["data"])
            flat = np.frombuffer(raw, dtype=np.float64)
        elif encoding == "list":
            flat = np.asarray(spec["data"], dtype=np.float64).ravel()
        else:
            raise CheckpointError(f"array {name!r}: unknown encoding {encoding!r}")
    except KeyError as missing:
        raise CheckpointError(f"array {name!r}: missing field {missing}") from None
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise CheckpointError(
            f"array {name!r}: shape header {list(shape)} expects {expected} "
            f"values, data holds {flat.size}")
    return flat.reshape(shape).copy()


def save_model(model, path) -> None:
    if isinstance(model, SurrogateModel):
        doc = {"kind": "surrogate", "num_classes": model.num_classes,
               "arrays": {"weights": _encode(model.weights)}}
    elif isinstance(model, VictimModel):
        doc = {"kind": "victim", "num_classes": model.num_classes,
               "hidden": model.w1.shape[1],
               "arrays": {"w1": _encode(model.w1), "w2": _encode(model.w2)}}
    else:
        raise TypeError(f"unknown model type {type(model).__name__}")
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise CheckpointError(f"{path}: not valid JSON ({err})") from None
    kind = doc.get("kind")
    arrays = doc.get("arrays", {})
    if kind == "surrogate":
        if "weights" not in arrays:
            raise CheckpointError("surrogate checkpoint missing array 'weights'")
        w = _decode("weights", arrays["weights"])
        if w.shape[1] != doc.get("num_classes"):
            raise CheckpointError(
                f"array 'weights': {w.shape[1]} columns != "
                f"num_classes {doc.get('num_classes')}")
        return SurrogateModel(weights=w, num_classes=int(doc["num_classes"]))
    if kind == "victim":
        for name in ("w1", "w2"):
            if name not in arrays:
                raise CheckpointError(f"victim checkpoint missing array {name!r}")
        w1 = _decode("w1", arrays["w1"])
        w2 = _decode("w2", arrays["w2"])
        if w1.shape[1] != w2.shape[0]:
            raise CheckpointError(
                f"array 'w2': rows {w2.shape[0]} != hidden width {w1.shape[1]}")
        if w2.shape[1] != doc.get("num_classes"):
            raise CheckpointError(
                f"array 'w2': {w2.shape[1]} columns != "
                f"num_classes {doc.get('num_classes')}")
        return VictimModel(w1=w1, w2=w2, num_classes=int(doc["num_classes"]))
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")
