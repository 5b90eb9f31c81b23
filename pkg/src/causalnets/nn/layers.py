"""Layer kinds with hand-written forward and backward passes.

Tensors are channels-last: a batch of sequences has shape ``(batch, time,
channels)``.  Every layer is stateless; parameters live in a flat
``name -> ndarray`` mapping owned by :class:`~causalnets.nn.network.ModelWeights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "elu", "tanh", "sigmoid", "linear")
KINDS = ("conv1d", "conv1d_transpose", "dense", "avg_pool_time", "avg_pool1d",
         "upsample1d", "activation", "dropout", "flatten")


@dataclass
class LayerSpec:
    """Architecture entry: a layer kind plus its kind-specific parameters.

    ``conv1d`` / ``conv1d_transpose``: window, in_channels, out_channels, has_bias
    ``dense``: in_dim, out_dim, has_bias, l1_coefficient
    ``avg_pool1d``: size (ceil mode, partial last window)
    ``upsample1d``: factor, out_length
    ``activation``: function
    ``dropout``: rate
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        p = self.params
        if self.kind in ("conv1d", "conv1d_transpose"):
            p.setdefault("has_bias", True)
            if p.get("stride", 1) != 1:
                raise ValueError("only stride 1 convolutions are supported")
        elif self.kind == "dense":
            p.setdefault("has_bias", True)
            p.setdefault("l1_coefficient", 0.0)
        elif self.kind == "activation":
            if p.get("function") not in ACTIVATIONS:
                raise ValueError(f"unknown activation {p.get('function')!r}")
        elif self.kind == "dropout":
            if not 0.0 <= p.get("rate", 0.0) < 1.0:
                raise ValueError("dropout rate must lie in [0, 1)")

    def to_dict(self):
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        d.pop("section", None)
        return cls(kind, d)

    def param_shapes(self) -> dict[str, tuple]:
        p = self.params
        if self.kind in ("conv1d", "conv1d_transpose"):
            shapes = {"kernel": (p["window"], p["in_channels"], p["out_channels"])}
            if p["has_bias"]:
                shapes["bias"] = (p["out_channels"],)
            return shapes
        if self.kind == "dense":
            shapes = {"kernel": (p["in_dim"], p["out_dim"])}
            if p["has_bias"]:
                shapes["bias"] = (p["out_dim"],)
            return shapes
        return {}

    def fans(self) -> tuple[int, int]:
        p = self.params
        if self.kind in ("conv1d", "conv1d_transpose"):
            return p["window"] * p["in_channels"], p["window"] * p["out_channels"]
        return p["in_dim"], p["out_dim"]


def conv1d(x, w, b=None):
    """Valid 1D cross-correlation; returns output and the im2col matrix."""
    n, t, cin = x.shape
    k, _, cout = w.shape
    if t < k or cin != w.shape[1]:
        raise ValueError(f"conv1d input {x.shape} incompatible with kernel {w.shape}")
    p = t - k + 1
    cols = sliding_window_view(x, k, axis=1).transpose(0, 1, 3, 2).reshape(n * p, k * cin)
    y = (cols @ w.reshape(k * cin, cout)).reshape(n, p, cout)
    if b is not None:
        y = y + b
    return y, cols


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_forward(spec: LayerSpec, x, tensors: dict, prefix: str, training: bool, rng):
    """Apply one layer.  Returns ``(y, cache)``."""
    kind, p = spec.kind, spec.params
    if kind == "conv1d":
        w = tensors[prefix + "kernel"]
        b = tensors.get(prefix + "bias") if p["has_bias"] else None
        y, cols = conv1d(x, w, b)
        return y, (x.shape, cols)
    if kind == "conv1d_transpose":
        w = tensors[prefix + "kernel"]
        n, steps, cin = x.shape
        k, _, cout = w.shape
        z = (x.reshape(n * steps, cin) @ w.transpose(1, 0, 2).reshape(cin, k * cout)).reshape(n, steps, k, cout)
        y = np.zeros((n, steps + k - 1, cout))
        for j in range(k):
            y[:, j:j + steps, :] += z[:, :, j, :]
        if p["has_bias"]:
            y += tensors[prefix + "bias"]
        return y, x
    if kind == "dense":
        w = tensors[prefix + "kernel"]
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"dense input {x.shape} incompatible with kernel {w.shape}")
        y = x @ w
        if p["has_bias"]:
            y = y + tensors[prefix + "bias"]
        return y, x
    if kind == "avg_pool_time":
        return x.mean(axis=1), x.shape
    if kind == "avg_pool1d":
        size = p["size"]
        n, t, c = x.shape
        out_t = math.ceil(t / size)
        padded = np.zeros((n, out_t * size, c))
        padded[:, :t] = x
        counts = np.minimum(size, t - size * np.arange(out_t))
        y = padded.reshape(n, out_t, size, c).sum(axis=2) / counts[None, :, None]
        return y, (x.shape, counts)
    if kind == "upsample1d":
        y = np.repeat(x, p["factor"], axis=1)[:, :p["out_length"]]
        return y, x.shape
    if kind == "activation":
        f = p["function"]
        if f == "relu":
            y = np.maximum(x, 0.0)
        elif f == "elu":
            y = elu(x)
        elif f == "tanh":
            y = np.tanh(x)
        elif f == "sigmoid":
            y = sigmoid(x)
        else:
            y = x
        return y, (x, y)
    if kind == "dropout":
        rate = p["rate"]
        if not training or rate == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * mask, mask
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise AssertionError(kind)


def layer_backward(spec: LayerSpec, dy, cache, tensors: dict, prefix: str, grads: dict, need_dx: bool = True):
    """Accumulate parameter gradients into ``grads`` and return the input gradient."""
    kind, p = spec.kind, spec.params
    if kind == "conv1d":
        shape, cols = cache
        n, t, cin = shape
        w = tensors[prefix + "kernel"]
        k, _, cout = w.shape
        steps = t - k + 1
        dy2 = dy.reshape(n * steps, cout)
        _accumulate(grads, prefix + "kernel", (cols.T @ dy2).reshape(w.shape))
        if p["has_bias"]:
            _accumulate(grads, prefix + "bias", dy2.sum(axis=0))
        if not need_dx:
            return None
        dcols = (dy2 @ w.reshape(k * cin, cout).T).reshape(n, steps, k, cin)
        dx = np.zeros(shape)
        for j in range(k):
            dx[:, j:j + steps, :] += dcols[:, :, j, :]
        return dx
    if kind == "conv1d_transpose":
        x = cache
        n, steps, cin = x.shape
        w = tensors[prefix + "kernel"]
        k, _, cout = w.shape
        dz = sliding_window_view(dy, k, axis=1).transpose(0, 1, 3, 2).reshape(n * steps, k * cout)
        x2 = x.reshape(n * steps, cin)
        _accumulate(grads, prefix + "kernel", (x2.T @ dz).reshape(cin, k, cout).transpose(1, 0, 2))
        if p["has_bias"]:
            _accumulate(grads, prefix + "bias", dy.sum(axis=(0, 1)))
        if not need_dx:
            return None
        return (dz @ w.transpose(1, 0, 2).reshape(cin, k * cout).T).reshape(x.shape)
    if kind == "dense":
        x = cache
        w = tensors[prefix + "kernel"]
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        _accumulate(grads, prefix + "kernel", x2.T @ dy2)
        if p["has_bias"]:
            _accumulate(grads, prefix + "bias", dy2.sum(axis=0))
        return dy @ w.T if need_dx else None
    if kind == "avg_pool_time":
        n, t, c = cache
        return np.broadcast_to(dy[:, None, :] / t, (n, t, c)).copy()
    if kind == "avg_pool1d":
        (n, t, c), counts = cache
        size = p["size"]
        spread = np.repeat(dy / counts[None, :, None], size, axis=1)
        return spread[:, :t]
    if kind == "upsample1d":
        n, t, c = cache
        factor = p["factor"]
        full = np.zeros((n, t * factor, c))
        full[:, :dy.shape[1]] = dy
        return full.reshape(n, t, factor, c).sum(axis=2)
    if kind == "activation":
        x, y = cache
        f = p["function"]
        if f == "relu":
            return dy * (x > 0)
        if f == "elu":
            return dy * np.where(x > 0, 1.0, y + 1.0)
        if f == "tanh":
            return dy * (1.0 - y * y)
        if f == "sigmoid":
            return dy * y * (1.0 - y)
        return dy
    if kind == "dropout":
        return dy if cache is None else dy * cache
    if kind == "flatten":
        return dy.reshape(cache)
    raise AssertionError(kind)


def _accumulate(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g
