"""Small float64 neural-network toolkit with exact reverse-mode gradients."""

from .layers import LayerSpec
from .losses import bce_with_logits, loss
from .network import (
    FormatError,
    ModelWeights,
    backward,
    forward,
    init_weights,
    input_gradients,
    l1_penalty,
    load_model,
    save_model,
    weights_from_dict,
    weights_to_dict,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState", "FormatError", "LayerSpec", "ModelWeights", "adam_step", "backward",
    "bce_with_logits", "forward", "init_weights", "input_gradients", "l1_penalty", "load_model",
    "loss", "save_model", "weights_from_dict", "weights_to_dict",
]
