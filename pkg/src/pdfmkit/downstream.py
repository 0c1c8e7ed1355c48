"""Task models fitted on embeddings: ridge, MLP and gradient-boosted trees."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import nn
from .errors import ConfigError, ShapeError, SingularityError, TrainingError, ValidationError

logger = logging.getLogger(__name__)

FAMILIES = ("ridge", "mlp", "gbdt")


@dataclass(frozen=True)
class RegressorSpec:
    family: str = "ridge"
    ridge_lambda: float = 1.0
    mlp_dims: tuple = (512, 256, 128)
    mlp_dropout: float = 0.2
    mlp_lr: float = 0.005
    mlp_epochs: int = 40
    mlp_batch_size: int = 256
    gbdt_max_trees: int = 3000
    gbdt_max_leaves: int = 31
    gbdt_min_leaf: int = 40
    gbdt_lr: float = 0.02
    gbdt_patience: int | None = 50
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError("family", f"unknown regressor family {self.family!r}")
        if self.ridge_lambda < 0:
            raise ConfigError("ridge_lambda", "must be nonnegative")
        if self.family == "mlp" and len(self.mlp_dims) != 3:
            raise ConfigError("mlp_dims", "the task MLP has exactly three hidden layers")
        if any(d < 1 for d in self.mlp_dims):
            raise ConfigError("mlp_dims", "layer widths must be positive")
        if not 0 <= self.mlp_dropout < 1:
            raise ConfigError("mlp_dropout", "must lie in [0, 1)")
        if self.mlp_lr < 0 or self.gbdt_lr < 0:
            raise ConfigError("learning_rate", "must be nonnegative")
        if self.mlp_epochs < 0 or self.mlp_batch_size < 1:
            raise ConfigError("mlp_epochs", "epochs >= 0 and batch size >= 1 required")
        if self.gbdt_max_trees < 0 or self.gbdt_max_leaves < 2 or self.gbdt_min_leaf < 1:
            raise ConfigError("gbdt", "need max_trees >= 0, max_leaves >= 2, min_leaf >= 1")
        if self.gbdt_patience is not None and self.gbdt_patience < 1:
            raise ConfigError("gbdt_patience", "must be positive or null")


@dataclass
class TrainedRegressor:
    family: str
    width: int
    params: dict = field(default_factory=dict)

    def predict(self, X):
        return predict(self, X)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ShapeError(f"X {X.shape} and y {y.shape} are not aligned")
    return X, y


# ---------------------------------------------------------------------------
# ridge

def ridge_fit(X, y, lam=1.0):
    """Ridge with an unpenalized intercept, solved by Cholesky on centered data."""
    X, y = _check_xy(X, y)
    if len(y) < 2:
        raise ValidationError("ridge needs at least two rows")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc + lam * np.eye(X.shape[1])
    try:
        factor = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise SingularityError("ridge normal equations are singular; increase lambda") from None
    coef = scipy.linalg.cho_solve(factor, Xc.T @ (y - y_mean))
    return TrainedRegressor("ridge", X.shape[1], {
        "coef": coef, "intercept": float(y_mean - x_mean @ coef), "lambda": lam})


# ---------------------------------------------------------------------------
# MLP

class MLP:
    """ReLU hidden layers, optional dropout after each, linear scalar head."""

    def __init__(self, layers, dropout=0.0):
        self.layers = layers
        self.dropout = dropout

    @classmethod
    def create(cls, n_in, hidden, rng, dropout=0.0, n_out=1):
        dims = [n_in, *hidden]
        layers = [nn.DenseLayer.glorot(a, b, "relu", rng) for a, b in zip(dims[:-1], dims[1:])]
        layers.append(nn.DenseLayer.glorot(dims[-1], n_out, "identity", rng))
        return cls(layers, dropout)

    @property
    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"l{i}.weight"] = layer.weight
            out[f"l{i}.bias"] = layer.bias
        return out

    def forward(self, x, training=False, rng=None):
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = nn.dense_forward(layer, x)
            mask = None
            if i < len(self.layers) - 1:
                x, mask = nn.dropout(x, self.dropout, training, rng)
            caches.append((cache, mask))
        return x, caches

    def backward(self, caches, grad):
        grads = {}
        for i in reversed(range(len(self.layers))):
            cache, mask = caches[i]
            if mask is not None:
                grad = grad * mask
            g, grad = nn.dense_backward(self.layers[i], cache, grad)
            grads[f"l{i}.weight"] = g["weight"]
            grads[f"l{i}.bias"] = g["bias"]
        return grads


def _standardizer(X):
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), 1e-8)
    return mean, std


def fit_mlp_net(X, y, hidden, dropout, lr, epochs, batch_size, rng):
    """Shared training loop: squared error, Adam, cosine decay over all steps.

    Returns ``(net, x_stats, y_stats, loss_history)``.  Inputs and target
    are standardized with statistics from ``X``/``y``.
    """
    x_mean, x_std = _standardizer(X)
    y_mean = float(y.mean())
    y_std = float(max(y.std(), 1e-8))
    Xs = (X - x_mean) / x_std
    ys = ((y - y_mean) / y_std)[:, None]
    net = MLP.create(X.shape[1], hidden, rng, dropout)
    batch_size = min(batch_size, len(y))
    steps_per_epoch = -(-len(y) // batch_size)
    schedule = nn.CosineSchedule(lr, max(1, epochs * steps_per_epoch))
    state = nn.AdamState()
    params = net.params
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = order[i:i + batch_size]
            out, caches = net.forward(Xs[idx], training=True, rng=rng)
            loss, g = nn.squared_loss(out, ys[idx])
            if not np.isfinite(loss):
                raise TrainingError("MLP loss is not finite", step)
            grads = net.backward(caches, g)
            nn.adam_step(params, grads, state, nn.cosine_lr(step, schedule))
            total += loss * len(idx)
            step += 1
        history.append(total / len(y))
    return net, (x_mean, x_std), (y_mean, y_std), history


def mlp_fit(X, y, spec: RegressorSpec = RegressorSpec("mlp"), rng=None):
    X, y = _check_xy(X, y)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    net, (xm, xs), (ym, ys), history = fit_mlp_net(
        X, y, spec.mlp_dims, spec.mlp_dropout, spec.mlp_lr, spec.mlp_epochs,
        spec.mlp_batch_size, rng)
    return TrainedRegressor("mlp", X.shape[1], {
        "net": net, "x_mean": xm, "x_std": xs, "y_mean": ym, "y_std": ys, "history": history})


# ---------------------------------------------------------------------------
# gradient-boosted trees

@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            idx = np.nonzero(inner)[0]
            go_left = X[idx, f[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {k: v.tolist() for k, v in asdict(self).items()}


def best_split(X_T, order, rows_mask, r, min_leaf):
    """Exact best squared-error split of the rows in ``rows_mask``.

    ``order`` holds a global argsort of every feature (one row per
    feature).  Returns ``(gain, feature, threshold)``; ``gain`` is -inf when
    no split leaves ``min_leaf`` rows on both sides.  Ties go to the lowest
    feature index, then the lowest threshold.
    """
    n_leaf = int(rows_mask.sum())
    if n_leaf < 2 * min_leaf:
        return -np.inf, -1, 0.0
    n_feat = order.shape[0]
    idx = order[rows_mask[order]].reshape(n_feat, n_leaf)
    xs = np.take_along_axis(X_T, idx, axis=1)
    rs = r[idx]
    total = rs.sum(axis=1, keepdims=True)
    left_sum = np.cumsum(rs, axis=1)[:, :-1]
    n_left = np.arange(1, n_leaf, dtype=np.float64)[None, :]
    n_right = n_leaf - n_left
    right_sum = total - left_sum
    gain = left_sum ** 2 / n_left + right_sum ** 2 / n_right - total ** 2 / n_leaf
    valid = (n_left >= min_leaf) & (n_right >= min_leaf) & (xs[:, 1:] > xs[:, :-1])
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    f, pos = divmod(flat, n_leaf - 1)
    best = gain[f, pos]
    if not np.isfinite(best):
        return -np.inf, -1, 0.0
    lo, hi = xs[f, pos], xs[f, pos + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(best), int(f), float(thr)


def grow_tree(X, r, max_leaves, min_leaf, X_T=None, order=None):
    """Leaf-wise growth: repeatedly split the leaf with the largest gain."""
    n = len(r)
    X_T = X.T if X_T is None else X_T
    order = np.argsort(X_T, axis=1, kind="stable") if order is None else order
    feature, threshold, left, right, value, count = [-1], [0.0], [-1], [-1], [float(r.mean())], [n]
    leaves = {0: np.ones(n, dtype=bool)}
    cand = {0: best_split(X_T, order, leaves[0], r, min_leaf)}
    while len(leaves) < max_leaves:
        node = max(cand, key=lambda k: (cand[k][0], -k))
        gain, f, thr = cand[node]
        if not gain > 1e-12:
            break
        mask = leaves.pop(node)
        del cand[node]
        go_left = mask & (X[:, f] <= thr)
        go_right = mask & ~go_left
        feature[node], threshold[node] = f, thr
        for child_mask in (go_left, go_right):
            child = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(r[child_mask].mean()))
            count.append(int(child_mask.sum()))
            leaves[child] = child_mask
            cand[child] = best_split(X_T, order, child_mask, r, min_leaf)
        left[node], right[node] = len(feature) - 2, len(feature) - 1
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(value), np.array(count))


def gbdt_fit(X, y, validation=None, spec: RegressorSpec = RegressorSpec("gbdt")):
    """Plain residual boosting under squared error with optional early stopping.

    ``validation`` is ``(X_val, y_val)``; early stopping keeps the prefix of
    trees with the best validation MSE.
    """
    X, y = _check_xy(X, y)
    if len(y) < 2 * spec.gbdt_min_leaf:
        raise ValidationError(
            f"GBDT needs at least {2 * spec.gbdt_min_leaf} rows (min {spec.gbdt_min_leaf} per leaf), got {len(y)}")
    early = spec.gbdt_patience is not None
    if early and (validation is None or len(validation[1]) == 0):
        raise ConfigError("validation", "early stopping needs a nonempty validation set")
    base = float(y.mean())
    pred = np.full(len(y), base)
    if early:
        Xv, yv = _check_xy(*validation)
        pred_v = np.full(len(yv), base)
        best_loss, best_n = float(np.mean((yv - pred_v) ** 2)), 0
    X_T = np.ascontiguousarray(X.T)
    order = np.argsort(X_T, axis=1, kind="stable")
    trees, train_loss = [], [float(np.mean((y - pred) ** 2))]
    for it in range(spec.gbdt_max_trees):
        tree = grow_tree(X, y - pred, spec.gbdt_max_leaves, spec.gbdt_min_leaf, X_T, order)
        trees.append(tree)
        pred = pred + spec.gbdt_lr * tree.predict(X)
        train_loss.append(float(np.mean((y - pred) ** 2)))
        if early:
            pred_v = pred_v + spec.gbdt_lr * tree.predict(Xv)
            loss_v = float(np.mean((yv - pred_v) ** 2))
            if loss_v < best_loss:
                best_loss, best_n = loss_v, it + 1
            elif it + 1 - best_n >= spec.gbdt_patience:
                break
    if early:
        trees = trees[:best_n]
        train_loss = train_loss[:best_n + 1]
    return TrainedRegressor("gbdt", X.shape[1], {
        "base": base, "lr": spec.gbdt_lr, "trees": trees, "train_loss": train_loss})


# ---------------------------------------------------------------------------

def fit(spec: RegressorSpec, X, y, validation=None, rng=None):
    if spec.family == "ridge":
        return ridge_fit(X, y, spec.ridge_lambda)
    if spec.family == "mlp":
        return mlp_fit(X, y, spec, rng)
    return gbdt_fit(X, y, validation, spec)


def predict(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.width:
        raise ShapeError(f"{model.family}: expected width {model.width}, got {X.shape}")
    p = model.params
    if model.family == "ridge":
        return X @ p["coef"] + p["intercept"]
    if model.family == "mlp":
        out, _ = p["net"].forward((X - p["x_mean"]) / p["x_std"], training=False)
        return out[:, 0] * p["y_std"] + p["y_mean"]
    out = np.full(len(X), p["base"])
    for tree in p["trees"]:
        out += p["lr"] * tree.predict(X)
    return out


def dump_model(model):
    """JSON-serializable audit dump."""
    p = model.params
    if model.family == "ridge":
        return {"family": "ridge", "width": model.width, "coef": p["coef"].tolist(),
                "intercept": p["intercept"], "lambda": p["lambda"]}
    if model.family == "mlp":
        return {"family": "mlp", "width": model.width,
                "layers": [{"shape": list(l.weight.shape)} for l in p["net"].layers]}
    return {"family": "gbdt", "width": model.width, "base": p["base"], "lr": p["lr"],
            "trees": [t.to_dict() for t in p["trees"]]}
