# flake8: noqa
from .checkpoint import Checkpoint
from .layers import MLP, Dense, LayerNorm, ParamStore, TransformerBlock, linear_forward
from .losses import bce_loss, binary_cross_entropy, mse
from .optim import AdamSettings, adam_step, step_with
from .tensor import (
    Tensor,
    concat,
    count_dot_products,
    layer_norm,
    masked_attention,
    sigmoid,
    tanh,
)
