"""Hand-differentiated layers and the residual transfer network.

Topology (batch rows, weights stored ``[in, out]``)::

    x -> [linear -> relu] * k -> fcb -> relu -> fcc = f_T
    delta_f = res2(relu(res1(f_T)))
    f_S = f_T + delta_f
    f_t = softmax(f_T), f_s = softmax(f_S)

``f_t`` is the deployed target classifier; ``f_s`` is fit to source labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor

PROB_EPS = 1e-12
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    """Raised when an operation is called in the wrong lifecycle state."""


@dataclass
class Variant:
    use_mmd: bool = True
    use_entropy: bool = True
    use_residual: bool = True


@dataclass
class Linear:
    name: str
    weight: Tensor
    bias: Tensor
    lr_mult: float = 1.0
    grad_weight: Tensor = field(init=False, repr=False)
    grad_bias: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.lr_mult <= 0:
            raise ValueError(f"lr_mult must be positive, got {self.lr_mult}")
        self.zero_grad()

    @classmethod
    def init_uniform(cls, name, n_in, n_out, rng, lr_mult=1.0):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        return cls(name, w, np.zeros(n_out), lr_mult)

    @classmethod
    def init_zero(cls, name, n_in, n_out, lr_mult=1.0):
        return cls(name, np.zeros((n_in, n_out)), np.zeros(n_out), lr_mult)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def backward(self, x: Tensor, grad_out: Tensor) -> Tensor:
        self.grad_weight += x.T @ grad_out
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight.T

    def zero_grad(self):
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: Tensor, grad_probs: Tensor) -> Tensor:
    """Vector-Jacobian product of row-wise softmax."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


@dataclass
class HeadOutputs:
    f_T: Tensor
    delta_f: Tensor
    f_S: Tensor
    f_t: Tensor
    f_s: Tensor
    fcb_feats: Tensor


class Network:
    """Feature stack plus the bottleneck / classifier / residual head.

    New layers (fcb, fcc, res1, res2) default to a learning-rate multiplier
    of 10; feature layers use 1. The last residual layer starts at zero so
    that ``f_S == f_T`` before training.
    """

    def __init__(self, in_dim, feature_widths, bottleneck, n_classes, rng,
                 variant: Variant | None = None, new_layer_lr_mult=10.0):
        self.variant = variant or Variant()
        self.feature_layers: list[Linear] = []
        width = in_dim
        for i, w in enumerate(feature_widths):
            self.feature_layers.append(Linear.init_uniform(f"feat{i}", width, w, rng))
            width = w
        m = new_layer_lr_mult
        self.fcb = Linear.init_uniform("fcb", width, bottleneck, rng, m)
        # fcc starts at zero so the first predictions are uniform; a random
        # classifier tends to put the whole target batch in one class, which the
        # entropy term then locks in
        self.fcc = Linear.init_zero("fcc", bottleneck, n_classes, m)
        # res2 starts at zero so delta_f == 0; res1 must not, or relu(res1) == 0
        # blocks every gradient into both residual weight matrices
        self.res1 = Linear.init_uniform("res1", n_classes, n_classes, rng, m)
        self.res2 = Linear.init_zero("res2", n_classes, n_classes, m)
        self._cache = None
        self.grads_ready = False
        # total gradient w.r.t. f_T from the last backward pass
        self.grad_f_T: Tensor | None = None

    @property
    def in_dim(self) -> int:
        first = self.feature_layers[0] if self.feature_layers else self.fcb
        return first.n_in

    @property
    def n_classes(self) -> int:
        return self.fcc.n_out

    def layers(self) -> list[Linear]:
        return [*self.feature_layers, self.fcb, self.fcc, self.res1, self.res2]

    def parameters(self) -> Iterator[tuple[str, Tensor, Tensor, float]]:
        """Yield ``(name, value, grad, lr_mult)`` for every parameter tensor."""
        for layer in self.layers():
            yield f"{layer.name}.weight", layer.weight, layer.grad_weight, layer.lr_mult
            yield f"{layer.name}.bias", layer.bias, layer.grad_bias, layer.lr_mult

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()
        self.grads_ready = False

    def copy(self) -> "Network":
        clone = object.__new__(Network)
        clone.variant = Variant(**vars(self.variant))
        clone.feature_layers = [Linear(l.name, l.weight.copy(), l.bias.copy(), l.lr_mult)
                                for l in self.feature_layers]
        for name in ("fcb", "fcc", "res1", "res2"):
            l = getattr(self, name)
            setattr(clone, name, Linear(l.name, l.weight.copy(), l.bias.copy(), l.lr_mult))
        clone._cache = None
        clone.grads_ready = False
        clone.grad_f_T = None
        return clone


def forward(net: Network, x: Tensor) -> HeadOutputs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match width {net.in_dim}")
    inputs = []
    pre = []
    h = x
    for layer in net.feature_layers:
        inputs.append(h)
        a = layer(h)
        pre.append(a)
        h = relu(a)
    fcb_in = h
    fcb_pre = net.fcb(fcb_in)
    fcb_feats = relu(fcb_pre)
    f_T = net.fcc(fcb_feats)
    if net.variant.use_residual:
        r1 = net.res1(f_T)
        h1 = relu(r1)
        delta_f = net.res2(h1)
        f_S = f_T + delta_f
    else:
        r1 = h1 = None
        delta_f = np.zeros_like(f_T)
        f_S = f_T
    out = HeadOutputs(f_T=f_T, delta_f=delta_f, f_S=f_S, f_t=softmax(f_T),
                      f_s=softmax(f_S), fcb_feats=fcb_feats)
    net._cache = dict(inputs=inputs, pre=pre, fcb_in=fcb_in, fcb_pre=fcb_pre,
                      r1=r1, h1=h1, out=out)
    return out


def backward(net: Network, upstream: dict[str, Tensor]) -> Tensor:
    """Accumulate parameter gradients given d(objective)/d(head outputs).

    ``upstream`` maps any of the :class:`HeadOutputs` field names to the
    gradient of the scalar objective w.r.t. that output; missing keys count as
    zero. Returns the gradient w.r.t. the network input.
    """
    if net._cache is None:
        raise StateError("backward called without a preceding forward")
    c = net._cache
    out: HeadOutputs = c["out"]
    def up(key):
        g = upstream.get(key)
        if g is None:
            return np.zeros_like(getattr(out, key))
        return np.asarray(g, dtype=np.float64)

    g_fS = up("f_S") + softmax_backward(out.f_s, up("f_s"))
    g_fT = up("f_T") + softmax_backward(out.f_t, up("f_t")) + g_fS
    if net.variant.use_residual:
        g_delta = up("delta_f") + g_fS
        g_h1 = net.res2.backward(c["h1"], g_delta)
        g_r1 = g_h1 * (c["r1"] > 0)
        g_fT = g_fT + net.res1.backward(out.f_T, g_r1)
    net.grad_f_T = g_fT

    g_feats = net.fcc.backward(out.fcb_feats, g_fT) + up("fcb_feats")
    g_pre = g_feats * (c["fcb_pre"] > 0)
    g = net.fcb.backward(c["fcb_in"], g_pre)
    for layer, x_in, a in zip(reversed(net.feature_layers), reversed(c["inputs"]),
                              reversed(c["pre"])):
        g = layer.backward(x_in, g * (a > 0))
    net.grads_ready = True
    return g


def predict(net: Network, x: Tensor) -> np.ndarray:
    """Argmax of the target head; ``np.argmax`` resolves ties to the lowest index."""
    return np.argmax(forward(net, x).f_t, axis=1)


def cross_entropy(probs: Tensor, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under row-stochastic ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_EPS))))


def cross_entropy_grad(probs: Tensor, labels) -> Tensor:
    """Gradient of :func:`cross_entropy` w.r.t. ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs)
    n = len(labels)
    rows = np.arange(n)
    picked = probs[rows, labels]
    grad = np.zeros_like(probs)
    live = picked >= PROB_EPS
    grad[rows[live], labels[live]] = -1.0 / (n * picked[live])
    return grad


def _check_labels(labels, probs):
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        bad = labels[(labels < 0) | (labels >= probs.shape[1])][0]
        raise IndexError(f"label {bad} outside [0, {probs.shape[1]})")
    return labels.astype(np.int64)


def save_checkpoint(net: Network, path) -> None:
    """Write a JSON checkpoint; Python float repr round-trips float64 exactly."""
    doc = {
        "format": "rtn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "variant": vars(net.variant),
        "layers": [
            {"name": l.name, "shape": list(l.weight.shape), "lr_mult": l.lr_mult,
             "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
            for l in net.layers()
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Network:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "rtn-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} rtn checkpoint")
    layers = [
        Linear(d["name"], np.array(d["weight"], dtype=np.float64).reshape(d["shape"]),
               np.array(d["bias"], dtype=np.float64), d["lr_mult"])
        for d in doc["layers"]
    ]
    net = object.__new__(Network)
    net.variant = Variant(**doc["variant"])
    net.feature_layers = layers[:-4]
    net.fcb, net.fcc, net.res1, net.res2 = layers[-4:]
    net._cache = None
    net.grads_ready = False
    net.grad_f_T = None
    return net
