"""Small module/layer containers shared by the feature encoder and the
language model. Parameters are discovered by walking attributes in
insertion order, which gives every parameter a stable dotted name used for
checkpoints and optimizer state."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Parameter


class Module:
    def named_parameters(self, prefix: str = ""):
        for attr, val in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.trainable]

    def named_linears(self, prefix: str = ""):
        for attr, val in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(val, Linear):
                yield name, val
            if isinstance(val, Module):
                yield from val.named_linears(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_linears(f"{name}.{i}.")

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.freeze()

    def num_scalars(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


class Linear(Module):
    """Affine map with an optional low-rank adapter attached post hoc."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float = 0.02, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out), decay=False)
        self.adapter = None

    def __call__(self, x, rng=None, training: bool = False):
        y = ag.affine(x, self.w, self.b)
        if self.adapter is not None:
            y = ag.add(y, self.adapter.branch(x, rng=rng, training=training))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim), decay=False)
        self.bias = Parameter(np.zeros(dim), decay=False)
        self._eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias, eps=self._eps)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 causal: bool = False, zero_out: bool = True):
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, zero=zero_out)
        self._heads = heads
        self._causal = causal

    def __call__(self, x, offsets=None, rng=None, training: bool = False):
        core = ag.attention_core(
            self.q(x, rng, training),
            self.k(x, rng, training),
            self.v(x, rng, training),
            self._heads, causal=self._causal, offsets=offsets,
        )
        return self.o(core, rng, training)


class TransformerBlock(Module):
    """Pre-norm residual block: attention then a GELU feed-forward. Residual
    output projections start at zero so a fresh block is the identity."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator,
                 causal: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, causal=causal, zero_out=True)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, dim, rng, zero=True)

    def __call__(self, x, offsets=None, rng=None, training: bool = False):
        x = ag.add(x, self.attn(self.ln1(x), offsets, rng, training))
        h = self.fc2(ag.gelu(self.fc1(self.ln2(x), rng, training)), rng, training)
        return ag.add(x, h)
