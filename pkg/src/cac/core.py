"""Dense network primitives: softmax, a two-stage MLP with hand-written
backpropagation, SGD with momentum and a finite-difference gradient oracle.

Everything is float64 numpy. A model is split into a feature extractor
(a stack of dense layers) and a linear classifier, so ``probs =
softmax(classifier(extractor(x)))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MODEL_VERSION = "cac-model-v1"
ACTIVATIONS = ("relu", "identity")

# One array per parameter tensor, ordered W0, b0, W1, b1, ..., Wc, bc.
GradientSet = list


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf."""


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite values")


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits, "logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def l2_normalize_rows(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms <= tol)
    if bad.size:
        raise NumericError(f"row {int(bad[0])} has near-zero norm ({norms[bad[0]]:.3g})")
    return m / norms[:, None]


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ModelParams:
    """Extractor layers, a linear classifier and the optimizer velocity.

    ``velocity`` holds one zero-initialised array per parameter tensor, in
    the same order as :meth:`tensors`.
    """

    extractor: list[Layer]
    classifier: Layer
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.classifier.activation != "identity":
            raise ConfigError("classifier must be linear")
        for pos, (layer, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if layer.fan_out != nxt.fan_in:
                raise ConfigError(
                    f"layer {pos} outputs {layer.fan_out} but layer {pos + 1} expects {nxt.fan_in}"
                )
        if not self.velocity:
            self.velocity = [np.zeros_like(t) for t in self.tensors()]
        elif [v.shape for v in self.velocity] != [t.shape for t in self.tensors()]:
            raise ConfigError("velocity shapes do not mirror parameter shapes")

    @property
    def layers(self) -> list[Layer]:
        return [*self.extractor, self.classifier]

    @property
    def num_classes(self) -> int:
        return self.classifier.fan_out

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_dim(self) -> int:
        return self.classifier.fan_in

    def tensors(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def with_tensors(self, tensors: Sequence[np.ndarray], velocity=None) -> "ModelParams":
        """Return a copy with parameter tensors (and optionally velocity) replaced."""
        layers = []
        for pos, layer in enumerate(self.layers):
            layers.append(replace(layer, weight=tensors[2 * pos], bias=tensors[2 * pos + 1]))
        vel = list(velocity) if velocity is not None else [v.copy() for v in self.velocity]
        return ModelParams(extractor=layers[:-1], classifier=layers[-1], velocity=vel)

    def copy(self) -> "ModelParams":
        return self.with_tensors([t.copy() for t in self.tensors()])


def init_model(
    input_dim: int,
    num_classes: int,
    hidden_width: int = 32,
    feature_dim: int = 16,
    seed: int = 0,
) -> ModelParams:
    """Glorot-uniform initialisation of extractor (relu hidden + linear feature
    layer) and classifier. Biases start at zero."""
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out, activation):
        a = np.sqrt(6.0 / (n_in + n_out))
        return Layer(rng.uniform(-a, a, size=(n_in, n_out)), np.zeros(n_out), activation)

    extractor = [
        dense(input_dim, hidden_width, "relu"),
        dense(hidden_width, feature_dim, "identity"),
    ]
    return ModelParams(extractor, dense(feature_dim, num_classes, "identity"))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer


def model_forward(params: ModelParams, x: np.ndarray, return_cache: bool = False):
    """Run ``x`` through extractor and classifier.

    Returns ``(features, logits, probs)``; features are the raw extractor
    output (not normalised). With ``return_cache`` a :class:`ForwardCache`
    for :func:`model_backward` is appended.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ConfigError(f"input has shape {h.shape}, model expects (*, {params.input_dim})")
    inputs, pre = [], []
    for layer in params.layers:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    features = inputs[-1]
    logits = h
    probs = softmax(logits)
    _check_finite(features, "features")
    if return_cache:
        return features, logits, probs, ForwardCache(inputs, pre)
    return features, logits, probs


def model_backward(params: ModelParams, cache: ForwardCache, grad_logits: np.ndarray) -> GradientSet:
    """Backpropagate ``dL/dlogits`` to every parameter tensor."""
    grads: list[np.ndarray] = []
    delta = grad_logits
    for layer, h_in, z in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.pre)):
        if layer.activation == "relu":
            delta = delta * (z > 0)
        grads.append(delta.sum(axis=0))
        grads.append(h_in.T @ delta)
        delta = delta @ layer.weight.T
    grads.reverse()
    return grads


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sgd_momentum_step(
    params: ModelParams,
    grads: GradientSet,
    lr: float,
    momentum: float,
    extractor_lr: float | None = None,
) -> ModelParams:
    """``v <- momentum*v + g; p <- p - lr*v``.

    ``extractor_lr`` overrides ``lr`` for the extractor tensors, which is how
    the classifier gets the larger rate during adaptation.
    """
    tensors = params.tensors()
    if len(grads) != len(tensors) or any(g.shape != t.shape for g, t in zip(grads, tensors)):
        raise ConfigError("gradient shapes do not mirror parameter shapes")
    if lr <= 0 or not 0 <= momentum < 1:
        raise ConfigError(f"need lr > 0 and momentum in [0, 1), got {lr}, {momentum}")
    n_extractor = 2 * len(params.extractor)
    new_t, new_v = [], []
    for pos, (p, v, g) in enumerate(zip(tensors, params.velocity, grads)):
        rate = extractor_lr if (extractor_lr is not None and pos < n_extractor) else lr
        v = momentum * v + g
        new_v.append(v)
        new_t.append(p - rate * v)
    return params.with_tensors(new_t, velocity=new_v)


def finite_difference_grad(
    loss_fn: Callable[[ModelParams], float], params: ModelParams, eps: float = 1e-5
) -> GradientSet:
    """Central differences of ``loss_fn`` for every scalar parameter."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    base = [t.copy() for t in params.tensors()]
    grads = []
    for pos, t in enumerate(base):
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            vals = []
            for sign in (1.0, -1.0):
                probe = [b if k != pos else b.copy() for k, b in enumerate(base)]
                probe[pos][idx] += sign * eps
                val = loss_fn(params.with_tensors(probe))
                if not np.isfinite(val):
                    raise NumericError(f"loss is non-finite at tensor {pos} index {idx}")
                vals.append(val)
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        grads.append(g)
    return grads


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(model_forward(params, x)[2], axis=1)


def model_to_dict(params: ModelParams) -> dict:
    def enc(layer: Layer):
        return {
            "shape": list(layer.weight.shape),
            "activation": layer.activation,
            "weight": layer.weight.ravel().tolist(),
            "bias": layer.bias.tolist(),
        }

    return {
        "version": MODEL_VERSION,
        "extractor": [enc(layer) for layer in params.extractor],
        "classifier": enc(params.classifier),
    }


def model_from_dict(doc: dict) -> ModelParams:
    if doc.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model version {doc.get('version')!r}")

    def dec(d):
        shape = tuple(d["shape"])
        w = np.asarray(d["weight"], dtype=np.float64)
        if w.size != shape[0] * shape[1]:
            raise ConfigError(f"weight array of length {w.size} does not fit shape {shape}")
        return Layer(w.reshape(shape), np.asarray(d["bias"], dtype=np.float64), d["activation"])

    return ModelParams([dec(d) for d in doc["extractor"]], dec(doc["classifier"]))


def save_model(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params)))


def load_model(path) -> ModelParams:
    return model_from_dict(json.loads(Path(path).read_text()))
