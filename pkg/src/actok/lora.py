"""Low-rank adaptation of frozen linear maps.

An adapter adds a rank-r bypass to a frozen affine layer:

    y = x @ W0 + b + (alpha / r) * dropout(x) @ A^T @ B^T

A is Gaussian-initialized, B starts at zero, so a freshly attached adapter
leaves the layer's function unchanged. Merging folds the bypass into a
single dense matrix W0 + (alpha / r) * A^T B^T for adapter-free inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Parameter
from .nn import Linear, Module

DEFAULT_TARGETS = ("attn.q", "attn.v")


@dataclass
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple[str, ...] = DEFAULT_TARGETS
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"adapter dropout must be in [0, 1), got {self.dropout}")
        if not self.targets:
            raise ConfigError("adapter target list is empty")


class LoraAdapter(Module):
    """The low-rank bypass for one linear layer."""

    def __init__(self, d_in: int, d_out: int, cfg: AdapterConfig,
                 rng: np.random.Generator, target: str):
        self.a = Parameter(rng.normal(0.0, cfg.init_std, (cfg.rank, d_in)), name=f"{target}.a")
        self.b = Parameter(np.zeros((d_out, cfg.rank)), name=f"{target}.b")
        self._rank = cfg.rank
        self._alpha = cfg.alpha
        self._dropout = cfg.dropout
        self._target = target

    @property
    def scaling(self) -> float:
        return self._alpha / self._rank

    @property
    def target(self) -> str:
        return self._target

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def alpha(self) -> float:
        return self._alpha

    @property
    def dropout(self) -> float:
        return self._dropout

    def branch(self, x, rng=None, training: bool = False):
        h = x
        if training and self._dropout > 0.0:
            if rng is None:
                raise ConfigError("adapter dropout in training mode needs an RNG stream")
            keep = 1.0 - self._dropout
            mask = (rng.random(x.shape) < keep) / keep
            h = ag.mul_mask(h, mask)
        return ag.scale(ag.matmul(ag.matmul(h, self.a, transpose_b=True),
                                  self.b, transpose_b=True), self.scaling)

    def delta(self) -> np.ndarray:
        """The dense weight increment (alpha / r) * A^T B^T."""
        return self.scaling * (self.a.data.T @ self.b.data.T)


def attach_adapters(model: Module, cfg: AdapterConfig,
                    rng: np.random.Generator) -> list[LoraAdapter]:
    """Attach adapters to every linear layer whose dotted name ends with one
    of cfg.targets. The wrapped weights are frozen in place."""
    matches = [(name, lin) for name, lin in model.named_linears()
               if any(name.endswith(t) for t in cfg.targets)]
    if not matches:
        raise ConfigError(f"adapter targets {cfg.targets} matched no linear layers")
    adapters = []
    for name, lin in matches:
        if lin.adapter is not None:
            raise ConfigError(f"layer {name!r} already has an adapter attached")
        lin.w.freeze()
        lin.b.freeze()
        lin.adapter = LoraAdapter(lin.w.shape[0], lin.w.shape[1], cfg, rng, target=name)
        adapters.append(lin.adapter)
    return adapters


def adapter_parameters(adapters: list[LoraAdapter]) -> list[tuple[str, Parameter]]:
    out = []
    for ad in adapters:
        out.append((f"adapter.{ad.target}.a", ad.a))
        out.append((f"adapter.{ad.target}.b", ad.b))
    return out


def merge_adapter(lin: Linear) -> np.ndarray:
    """Merged dense weight for an adapted layer (the layer is not modified)."""
    if lin.adapter is None:
        raise ConfigError("layer has no adapter to merge")
    return lin.w.data + lin.adapter.delta()


def merge_model(model: Module) -> int:
    """Fold every attached adapter into its host weight and detach it.
    Returns the number of merged layers."""
    merged = 0
    for _, lin in model.named_linears():
        if lin.adapter is not None:
            lin.w.data = merge_adapter(lin)
            lin.adapter = None
            merged += 1
    return merged


def trainable_fraction(model: Module) -> float:
    """Trainable scalars / total scalars over the model, adapters included."""
    total = 0
    trainable = 0
    for _, p in model.named_parameters():
        total += p.data.size
        if p.trainable:
            trainable += p.data.size
    if total == 0:
        raise ConfigError("model has no parameters")
    return trainable / total
