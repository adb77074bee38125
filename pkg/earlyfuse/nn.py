"""Parameter containers and transformer layers built on :mod:`earlyfuse.tensor`."""

import logging
import math
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ArchitectureMismatchError, DimensionError
from .tensor import Tensor, get_default_dtype, layer_norm

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(shape: Tuple[int, ...], rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values.astype(get_default_dtype())


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(get_default_dtype())


class Module:
    """Base class for anything that owns parameters.

    Parameters are discovered from instance attributes in assignment order,
    recursing into sub-modules and lists of sub-modules, so names and their
    order are stable for a given construction sequence.
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into parameters, refusing any shape disagreement."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ArchitectureMismatchError(
                    f"Parameter table does not match model. Missing: {missing[:5]}, unexpected: {unexpected[:5]}"
                )
        for name, value in state.items():
            if name not in own:
                continue
            param = own[name]
            value = np.asarray(value)
            if value.shape != param.shape:
                raise ArchitectureMismatchError(
                    f"Parameter {name} has shape {value.shape}, model expects {param.shape}", key=name
                )
            param.data = np.array(value, dtype=param.dtype)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform(in_features, out_features, rng))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError("linear", x.shape, self.weight.shape)
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class MLP(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class Attention(Module):
    """Multi-head scaled dot-product attention.

    Queries and keys are projected to ``num_heads * qk_dim`` so the
    similarity space per head can be narrower than ``dim / num_heads``;
    values keep ``dim / num_heads`` per head. Scores are scaled by
    ``1 / sqrt(qk_dim)``.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, qk_dim: Optional[int] = None):
        if dim % num_heads:
            raise DimensionError("attention", (dim,), (num_heads,), detail="dim must divide by heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qk_dim = qk_dim or self.head_dim
        self.scale = 1.0 / math.sqrt(self.qk_dim)
        self.q = Linear(dim, num_heads * self.qk_dim, rng)
        self.k = Linear(dim, num_heads * self.qk_dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._last_weights: Optional[np.ndarray] = None

    @property
    def last_weights(self) -> Optional[np.ndarray]:
        """Attention probabilities [B, heads, Nq, Nk] of the latest call."""
        return self._last_weights

    def _split_heads(self, x: Tensor, per_head: int) -> Tensor:
        batch, tokens, _ = x.shape
        return x.reshape(batch, tokens, self.num_heads, per_head).transpose(0, 2, 1, 3)

    def forward(self, queries: Tensor, keys: Tensor) -> Tensor:
        if queries.ndim != 3 or keys.ndim != 3 or queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise DimensionError("attention", queries.shape, keys.shape, detail=f"expected [B, N, {self.dim}]")
        if queries.shape[0] != keys.shape[0]:
            raise DimensionError("attention", queries.shape, keys.shape, detail="batch sizes differ")
        batch, n_queries, _ = queries.shape
        q = self._split_heads(self.q(queries), self.qk_dim)
        k = self._split_heads(self.k(keys), self.qk_dim)
        v = self._split_heads(self.v(keys), self.head_dim)
        weights = ((q @ k.swapaxes(-1, -2)) * self.scale).softmax(axis=-1)
        self._last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, n_queries, self.dim)
        return self.proj(out)
