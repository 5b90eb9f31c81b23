"""Adam with bias correction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "epsilon": self.epsilon, "step": self.step,
            "first_moment": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                             for k, v in sorted(self.first_moment.items())},
            "second_moment": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                              for k, v in sorted(self.second_moment.items())},
        }

    @classmethod
    def from_dict(cls, d):
        def arrays(m):
            return {k: np.array(r["values"], float).reshape(r["shape"]) for k, r in m.items()}
        return cls(d["learning_rate"], d["beta1"], d["beta2"], d["epsilon"], d["step"],
                   arrays(d["first_moment"]), arrays(d["second_moment"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s: str) -> "AdamState":
        return cls.from_dict(json.loads(s))


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """Update ``params`` in place and advance ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        params[name] = params[name] - state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
