"""Small dense-network kernel with hand-written backward passes.

Layers keep weights as ``(out, in)`` matrices and operate on row batches
``(n, in)``.  Every backward pass here is checked against central finite
differences in the test-suite via :func:`grad_check`.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, ShapeError, ValidationError

ACTIVATIONS = ("gelu", "relu", "identity")
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GeLU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64) if np.isscalar(x) else x
    out = x * ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def gelu_grad(x):
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _activate(name, z):
    if name == "gelu":
        return z * ndtr(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(name, z):
    if name == "gelu":
        return gelu_grad(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def shape(self):
        return self.weight.shape

    @classmethod
    def glorot(cls, n_in, n_out, activation="identity", rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = math.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype), activation)


def dense_forward(layer, x):
    """Return ``(activation(x W^T + b), cache)``."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(f"input shape {x.shape} incompatible with layer {layer.weight.shape}")
    z = x @ layer.weight.T + layer.bias
    return _activate(layer.activation, z), (x, z)


def dense_backward(layer, cache, grad_out):
    """Return ``({"weight": dW, "bias": db}, dx)``."""
    x, z = cache
    if grad_out.shape != z.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {z.shape}")
    gz = grad_out * _activation_grad(layer.activation, z)
    return {"weight": gz.T @ x, "bias": gz.sum(axis=0)}, gz @ layer.weight


def dropout(x, rate, training, rng=None):
    """Inverted dropout.  Returns ``(output, mask)``; mask is None at inference."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout", f"rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


@dataclass(frozen=True)
class HuberConfig:
    delta: float = 1.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValidationError("Huber delta must be positive")


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    if not delta > 0:
        raise ValidationError("Huber delta must be positive")
    r = pred - target
    a = np.abs(r)
    per = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = max(r.size, 1)
    return float(per.sum() / n), np.clip(r, -delta, delta) / n


def squared_loss(pred, target):
    r = np.asarray(pred) - np.asarray(target)
    n = max(r.size, 1)
    return float((r * r).sum() / n), 2.0 * r / n


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place on ``params`` (a name->array dict)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr != 0.0:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float
    total_steps: int
    lr_min: float = 0.0

    def __post_init__(self):
        if not self.lr_max >= self.lr_min >= 0:
            raise ValidationError("need lr_max >= lr_min >= 0")
        if self.total_steps < 1:
            raise ValidationError("total_steps must be at least 1")


def cosine_lr(t, schedule):
    if t < 0:
        raise ValidationError("step must be nonnegative")
    if t >= schedule.total_steps:
        return schedule.lr_min
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.total_steps))


def grad_check(closure, params, eps=1e-5, floor=1e-8):
    """Worst relative error between analytic and central-difference gradients.

    The error of one entry is ``|num - ana| / max(|num|, floor)``: the
    finite difference is the reference, so a gradient off by a factor of
    two scores 1.0.  ``closure(params)`` must return ``(loss, grads)`` where ``grads`` mirrors
    ``params``.  Entries are perturbed in place and restored.
    """
    _, analytic = closure(params)
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = closure(params)[0]
            flat[i] = orig - eps
            f_minus = closure(params)[0]
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(num), floor)
            worst = max(worst, abs(num - ga[i]) / denom)
    return worst


def save_arrays(arrays, path, meta=None):
    """Versioned JSON dump; arrays are stored as base64 of their raw bytes,
    so loading is bit-exact."""
    doc = {
        "format": "pdfmkit-weights",
        "version": 1,
        "meta": meta or {},
        "arrays": {
            name: {
                "shape": list(a.shape),
                "dtype": a.dtype.str,
                "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii"),
            }
            for name, a in sorted(arrays.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_arrays(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "pdfmkit-weights":
        raise ValidationError(f"{path}: not a weight dump")
    arrays = {}
    for name, spec in doc["arrays"].items():
        raw = base64.b64decode(spec["data"])
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    return arrays, doc.get("meta", {})
