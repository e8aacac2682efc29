import math
from dataclasses import dataclass, field
from hashlib import md5
from typing import Iterable, Optional

import numpy as np

from ..exceptions import ConfigurationError
from .tensor import Tensor, layer_norm, masked_attention, tanh


def _stream_tag(name: str) -> int:
    return int(md5(name.encode("utf-8")).hexdigest()[:8], 16)


@dataclass
class ParamStore:
    """named parameters, their gradients and the adaptive-moment state"""

    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, shape: tuple, fan_in: Optional[int] = None, init=None):
        if name in self.params:
            raise ConfigurationError(f"parameter {name} registered twice")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in or shape[0])
            rng = np.random.default_rng([self.seed, _stream_tag(name)])
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, op=name)
        return self.params[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ConfigurationError(f"parameters not in checkpoint: {sorted(missing)}")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ConfigurationError(
                    f"{name}: checkpoint shape {arr.shape} != {self.params[name].shape}"
                )
            self.params[name].data = np.array(arr, dtype=np.float64)
        self.moments = {}
        self.step = 0

    def size(self) -> int:
        return sum(p.data.size for p in self.params.values())


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ConfigurationError(
            f"linear: input {x.shape} weight {w.shape} bias {b.shape} do not conform"
        )
    return x @ w + b


class Dense:
    def __init__(
        self, store: ParamStore, name: str, fan_in: int, fan_out: int, zero=False
    ):
        init = "zeros" if zero else None
        self.w = store.add(f"{name}.w", (fan_in, fan_out), fan_in, init)
        self.b = store.add(f"{name}.b", (fan_out,), fan_in, init)
        self.flops = 2 * fan_in * fan_out

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", (dim,), init="ones")
        self.bias = store.add(f"{name}.bias", (dim,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP:
    def __init__(
        self, store: ParamStore, name: str, dims: Iterable[int], zero_last=False
    ):
        dims = list(dims)
        pairs = list(zip(dims[:-1], dims[1:]))
        self.layers = [
            Dense(store, f"{name}.{i}", a, b, zero=zero_last and i == len(pairs) - 1)
            for i, (a, b) in enumerate(pairs)
        ]

    @property
    def flops(self):
        return sum(layer.flops for layer in self.layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = tanh(layer(x))
        return self.layers[-1](x)


class TransformerBlock:
    """pre-norm attention + MLP block, split so cached keys/values can be reused"""

    def __init__(self, store: ParamStore, name: str, width: int, heads: int):
        if width % heads:
            raise ConfigurationError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", width)
        self.query = Dense(store, f"{name}.query", width, width)
        self.key = Dense(store, f"{name}.key", width, width)
        self.value = Dense(store, f"{name}.value", width, width)
        self.out = Dense(store, f"{name}.out", width, width)
        self.ln_mlp = LayerNorm(store, f"{name}.ln_mlp", width)
        self.mlp = MLP(store, f"{name}.mlp", [width, 2 * width, width])

    def qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h = self.ln_attn(x)
        return self.query(h), self.key(h), self.value(h)

    def finish(self, x: Tensor, attended: Tensor) -> Tensor:
        x = x + self.out(attended)
        return x + self.mlp(self.ln_mlp(x))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        q, k, v = self.qkv(x)
        return self.finish(x, masked_attention(q, k, v, mask, self.heads))

    def row_flops(self, rows: int) -> int:
        dense = 4 * self.query.flops + self.mlp.flops
        return rows * dense
