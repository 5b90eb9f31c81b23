"""Sequential and Siamese networks over the layer kinds in :mod:`.layers`.

A network is a *branch* (a layer stack applied to every input with one
shared set of parameters), an optional *combiner* merging two branch
outputs (``"dot"`` or ``"subtract"``), and a *head* applied afterwards.
Single-input networks have no combiner and apply branch then head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import LayerSpec, layer_backward, layer_forward

COMBINERS = (None, "dot", "subtract")


class FormatError(ValueError):
    """Model file inconsistent with its own descriptor."""


@dataclass
class ModelWeights:
    branch: list
    combiner: str | None = None
    head: list = field(default_factory=list)
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {self.combiner!r}")

    def layers(self):
        """Yield ``(section, index, spec, prefix)`` in evaluation order."""
        for i, spec in enumerate(self.branch):
            yield "branch", i, spec, f"branch.{i}."
        for i, spec in enumerate(self.head):
            yield "head", i, spec, f"head.{i}."

    def expected_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for _, _, spec, prefix in self.layers():
            for name, shape in spec.param_shapes().items():
                shapes[prefix + name] = shape
        return shapes

    def copy(self) -> "ModelWeights":
        return ModelWeights(list(self.branch), self.combiner, list(self.head),
                            {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def init_weights(branch, combiner=None, head=(), seed=0) -> ModelWeights:
    """Glorot-uniform kernels and zero biases, deterministic in ``seed``."""
    weights = ModelWeights(list(branch), combiner, list(head))
    rng = np.random.default_rng(seed)
    for _, _, spec, prefix in weights.layers():
        for name, shape in spec.param_shapes().items():
            if name == "kernel":
                fan_in, fan_out = spec.fans()
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.tensors[prefix + name] = rng.uniform(-limit, limit, shape)
            else:
                weights.tensors[prefix + name] = np.zeros(shape)
    return weights


def _run(specs, section, x, tensors, training, rng):
    caches = []
    for i, spec in enumerate(specs):
        x, cache = layer_forward(spec, x, tensors, f"{section}.{i}.", training, rng)
        caches.append(cache)
    return x, caches


def forward(weights: ModelWeights, inputs, training: bool = False, seed=0):
    """Evaluate the network.

    ``inputs`` is one array for single-input networks or a pair of arrays
    when a combiner is configured.  Returns ``(output, cache)``; the cache
    is what :func:`backward` consumes.
    """
    rng = np.random.default_rng(seed) if training else None
    t = weights.tensors
    if weights.combiner is None:
        if isinstance(inputs, (tuple, list)):
            if len(inputs) != 1:
                raise ValueError("single-input network called with two inputs")
            inputs = inputs[0]
        x = np.asarray(inputs, float)
        feats, bcache = _run(weights.branch, "branch", x, t, training, rng)
        branch_caches = [bcache]
        merged = feats
        combine_cache = None
    else:
        if not isinstance(inputs, (tuple, list)) or len(inputs) != 2:
            raise ValueError("Siamese network needs exactly two inputs")
        a, b = (np.asarray(v, float) for v in inputs)
        if a.shape != b.shape:
            raise ValueError(f"input shapes differ: {a.shape} vs {b.shape}")
        fa, ca = _run(weights.branch, "branch", a, t, training, rng)
        fb, cb = _run(weights.branch, "branch", b, t, training, rng)
        branch_caches = [ca, cb]
        if weights.combiner == "dot":
            merged = np.sum(fa * fb, axis=-1, keepdims=True)
        else:
            merged = fa - fb
        combine_cache = (fa, fb)
    out, hcache = _run(weights.head, "head", merged, t, training, rng)
    cache = {"weights": weights, "branch": branch_caches, "combine": combine_cache,
             "head": hcache, "branch_params": [sorted(_section_params(weights, "branch"))] * len(branch_caches)}
    return out, cache


def _section_params(weights, section):
    return [k for k in weights.tensors if k.startswith(section + ".")]


def backward(cache, dout, from_logits: bool = False) -> dict:
    """Exact gradients of the loss w.r.t. every parameter, including the L1 term.

    With ``from_logits`` the final sigmoid of the head is skipped and
    ``dout`` is taken as the gradient w.r.t. its input; this is the fused
    sigmoid / binary cross-entropy path.
    """
    weights: ModelWeights = cache["weights"]
    t = weights.tensors
    grads: dict = {}
    head = weights.head
    dx = np.asarray(dout, float)
    n_head = len(head)
    if from_logits:
        last = head[-1] if head else None
        if last is None or last.kind != "activation" or last.params["function"] != "sigmoid":
            raise ValueError("from_logits requires a final sigmoid activation")
        n_head -= 1
    for i in reversed(range(n_head)):
        need = i > 0 or weights.combiner is not None or bool(weights.branch)
        dx = layer_backward(head[i], dx, cache["head"][i], t, f"head.{i}.", grads, need)
    if weights.combiner is None:
        douts = [dx]
    else:
        fa, fb = cache["combine"]
        if weights.combiner == "dot":
            douts = [dx * fb, dx * fa]
        else:
            douts = [dx, -dx]
    for dfeat, bcache in zip(douts, cache["branch"]):
        d = dfeat
        for i in reversed(range(len(weights.branch))):
            d = layer_backward(weights.branch[i], d, bcache[i], t, f"branch.{i}.", grads, need_dx=i > 0)
    for _, _, spec, prefix in weights.layers():
        c = spec.params.get("l1_coefficient", 0.0) if spec.kind == "dense" else 0.0
        if c:
            name = prefix + "kernel"
            grads[name] = grads.get(name, 0.0) + c * np.sign(t[name])
    for name, value in t.items():
        grads.setdefault(name, np.zeros_like(value))
    return grads


def input_gradients(cache, dout):
    """Gradients w.r.t. the network inputs (used for finite-difference checks)."""
    weights: ModelWeights = cache["weights"]
    t = weights.tensors
    scratch: dict = {}
    dx = np.asarray(dout, float)
    for i in reversed(range(len(weights.head))):
        dx = layer_backward(weights.head[i], dx, cache["head"][i], t, f"head.{i}.", scratch)
    if weights.combiner is None:
        douts = [dx]
    elif weights.combiner == "dot":
        fa, fb = cache["combine"]
        douts = [dx * fb, dx * fa]
    else:
        douts = [dx, -dx]
    result = []
    for dfeat, bcache in zip(douts, cache["branch"]):
        d = dfeat
        for i in reversed(range(len(weights.branch))):
            d = layer_backward(weights.branch[i], d, bcache[i], t, f"branch.{i}.", scratch)
        result.append(d)
    return result


def l1_penalty(weights: ModelWeights) -> float:
    total = 0.0
    for _, _, spec, prefix in weights.layers():
        if spec.kind == "dense" and spec.params.get("l1_coefficient", 0.0):
            total += spec.params["l1_coefficient"] * float(np.abs(weights.tensors[prefix + "kernel"]).sum())
    return total


def weights_to_dict(weights: ModelWeights) -> dict:
    descriptor = [{"section": "branch", **s.to_dict()} for s in weights.branch]
    descriptor += [{"section": "head", **s.to_dict()} for s in weights.head]
    return {
        "descriptor": descriptor,
        "combiner": weights.combiner,
        "shared_branch": weights.combiner is not None,
        "tensors": {name: {"shape": list(v.shape), "values": v.ravel().tolist()}
                    for name, v in sorted(weights.tensors.items())},
    }


def weights_from_dict(d: dict) -> ModelWeights:
    branch = [LayerSpec.from_dict(x) for x in d["descriptor"] if x.get("section", "branch") == "branch"]
    head = [LayerSpec.from_dict(x) for x in d["descriptor"] if x.get("section") == "head"]
    weights = ModelWeights(branch, d.get("combiner"), head)
    expected = weights.expected_shapes()
    tensors = d.get("tensors", {})
    missing = set(expected) - set(tensors)
    if missing:
        raise FormatError(f"missing tensors: {', '.join(sorted(missing))}")
    for name, rec in tensors.items():
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}")
        shape = tuple(rec["shape"])
        if shape != tuple(expected[name]):
            raise FormatError(f"tensor {name!r} has shape {shape}, descriptor expects {tuple(expected[name])}")
        values = np.array(rec["values"], dtype=float)
        if values.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name!r} has {values.size} values, shape {shape} needs {int(np.prod(shape))}")
        weights.tensors[name] = values.reshape(shape)
    return weights


def save_model(weights: ModelWeights, path, extra: dict | None = None) -> None:
    d = weights_to_dict(weights)
    if extra:
        d["metadata"] = extra
    Path(path).write_text(json.dumps(d) + "\n", encoding="utf-8")


def load_model(path) -> ModelWeights:
    return weights_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_model_metadata(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")).get("metadata", {})
