"""Dense feed-forward networks with manual reverse-mode gradients.

Everything is float64.  A :class:`Model` is a stack of :class:`DenseLayer`
objects followed by an optional elementwise ``max(., 0)`` on the logits
(``output_rectified``), which is what the purity certificate in
:mod:`lipmargin.lipschitz` needs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    CorruptedModelError,
    FormatVersionError,
    InputError,
    NonFiniteGradientError,
    SerializationError,
    UsageError,
)

ACTIVATIONS = ("relu", "identity")
FORMAT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_mask(z):
    # subgradient at 0 is taken to be 0
    return (z > 0.0).astype(np.float64)


@dataclass
class DenseLayer:
    """``y = act(W x + b)`` with ``W`` of shape (out_dim, in_dim)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unsupported activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InputError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Model:
    layers: list[DenseLayer]
    output_rectified: bool = False

    def __post_init__(self):
        if not self.layers:
            raise InputError("a model needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise InputError(
                    f"layer {k} outputs {self.layers[k].out_dim} values but "
                    f"layer {k + 1} expects {self.layers[k + 1].in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def init(cls, dims, seed=0, output_rectified=False, hidden_activation="relu",
             output_activation="identity"):
        """Randomly initialized network with layer widths ``dims``.

        ``dims = [n, h1, ..., C]``; He-normal weights, zero biases.
        """
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise InputError(f"invalid layer dims {dims}")
        rng = np.random.default_rng(seed)
        layers = []
        for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = k == len(dims) - 2
            W = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
            layers.append(DenseLayer(W, np.zeros(d_out),
                                     output_activation if last else hidden_activation))
        return cls(layers, output_rectified=output_rectified)

    def copy(self) -> "Model":
        return Model(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            output_rectified=self.output_rectified,
        )

    def parameters(self):
        """Flat list of parameter arrays in (W0, b0, W1, b1, ...) order."""
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def check_finite(self):
        for k, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise CorruptedModelError(f"layer {k} has non-finite parameters")

    def param_hash(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()

    def __call__(self, x):
        return forward(self, x)


@dataclass
class ForwardCache:
    """Activations recorded by :func:`forward_cached` for one batch."""

    inputs: np.ndarray
    pre: list = field(default_factory=list)   # z_k = W_k a_{k-1} + b_k
    post: list = field(default_factory=list)  # a_k = act(z_k)
    squeeze: bool = False


@dataclass
class GradientTape:
    weights: list
    biases: list
    inputs: np.ndarray | None = None

    def arrays(self):
        out = []
        for gW, gb in zip(self.weights, self.biases):
            out.extend([gW, gb])
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scaled(self, factor: float) -> "GradientTape":
        inputs = None if self.inputs is None else self.inputs * factor
        return GradientTape([g * factor for g in self.weights],
                            [g * factor for g in self.biases], inputs)


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InputError(f"expected inputs of dimension {model.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("inputs must be finite")
    return X, squeeze


def forward_cached(model: Model, x) -> tuple[np.ndarray, ForwardCache]:
    """Logits plus the cache that :func:`backward` consumes.

    ``x`` may be a single vector (n,) or a batch (m, n); the logits have the
    matching shape.
    """
    model.check_finite()
    X, squeeze = _as_batch(model, x)
    cache = ForwardCache(inputs=X, squeeze=squeeze)
    a = X
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        a = _relu(z) if layer.activation == "relu" else z
        cache.pre.append(z)
        cache.post.append(a)
    if model.output_rectified:
        a = _relu(a)
    return (a[0] if squeeze else a), cache


def forward(model: Model, x) -> np.ndarray:
    return forward_cached(model, x)[0]


def backward(model: Model, loss_grad, cache: ForwardCache | None) -> GradientTape:
    """Gradients of ``sum_i <loss_grad_i, f(x_i)>`` w.r.t. parameters and inputs.

    ``loss_grad`` is dloss/dlogits with the same shape as the logits returned
    by the forward pass that produced ``cache``.  Per-sample contributions are
    summed (not averaged) over the batch.
    """
    if cache is None:
        raise UsageError("backward called without a cached forward pass")
    G = np.atleast_2d(np.asarray(loss_grad, dtype=np.float64))
    if G.shape != cache.post[-1].shape:
        raise InputError(f"loss gradient shape {G.shape} != logits shape {cache.post[-1].shape}")

    if model.output_rectified:
        G = G * _relu_mask(cache.post[-1])
    gWs, gbs = [], []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            G = G * _relu_mask(cache.pre[k])
        a_prev = cache.inputs if k == 0 else cache.post[k - 1]
        gWs.append(G.T @ a_prev)
        gbs.append(G.sum(axis=0))
        G = G @ layer.weights
    gWs.reverse()
    gbs.reverse()
    inputs = G[0] if cache.squeeze else G
    return GradientTape(gWs, gbs, inputs)


def sgd_step(model: Model, tape: GradientTape, lr: float) -> Model:
    """In-place ``theta <- theta - lr * grad``; returns ``model``.

    The step is rejected (model untouched) if any gradient entry is non-finite.
    """
    if not lr >= 0.0:
        raise InputError(f"learning rate must be nonnegative, got {lr}")
    if not tape.is_finite():
        raise NonFiniteGradientError("non-finite gradient; SGD step rejected")
    for layer, gW, gb in zip(model.layers, tape.weights, tape.biases):
        if gW.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise InputError("gradient tape does not match model shape")
    for layer, gW, gb in zip(model.layers, tape.weights, tape.biases):
        layer.weights -= lr * gW
        layer.bias -= lr * gb
    return model


def to_dict(model: Model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "output_rectified": bool(model.output_rectified),
        "layers": [
            {
                "activation": layer.activation,
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }


def from_dict(obj: dict) -> Model:
    if not isinstance(obj, dict):
        raise SerializationError("model document must be a JSON object")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported model format_version {obj.get('format_version')!r}"
        )
    try:
        layers = [DenseLayer(l["weights"], l["bias"], l["activation"]) for l in obj["layers"]]
        model = Model(layers, output_rectified=bool(obj["output_rectified"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"malformed model document: {exc}") from exc
    if model.input_dim != obj.get("input_dim") or model.num_classes != obj.get("num_classes"):
        raise SerializationError("declared input_dim/num_classes disagree with layer shapes")
    model.check_finite()
    return model


def serialize(model: Model) -> bytes:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(to_dict(model), separators=(",", ":")).encode("utf-8")


def deserialize(data: bytes | str) -> Model:
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SerializationError(f"not valid JSON: {exc}") from exc
    return from_dict(obj)


def save(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
