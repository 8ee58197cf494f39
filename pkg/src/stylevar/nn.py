"""Tiny module system on top of :mod:`stylevar.autodiff`."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=ad.get_default_dtype()), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_adapters", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def _walk(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child._walk(f"{prefix}{name}.")

    def named_parameters(self) -> Dict[str, Tensor]:
        """Base (non-adapter) parameters, in registration order."""
        return {f"{p}{n}": t for p, m in self._walk() for n, t in m._params.items()}

    def named_adapters(self) -> Dict[str, Tensor]:
        return {f"{p}{n}": t for p, m in self._walk() for n, t in m._adapters.items()}

    def modules(self) -> Iterator["Module"]:
        return (m for _, m in self._walk())

    def zero_grad(self) -> None:
        for t in list(self.named_parameters().values()) + list(self.named_adapters().values()):
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


class ModuleList(Module):
    def __init__(self, items: List[Module]):
        super().__init__()
        for i, m in enumerate(items):
            setattr(self, str(i), m)
        object.__setattr__(self, "_items", list(items))

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``y = x @ W + b`` with an optional low-rank adapter ``scaling * x A^T B^T``.

    ``W`` is stored as (in, out); adapter ``A`` is (rank, in) and ``B`` is
    (out, rank), with ``B`` zero at attach time.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02,
                 bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = param(rng.normal(0.0, std, (n_in, n_out)))
        if bias:
            self.bias = param(np.zeros(n_out))
        else:
            object.__setattr__(self, "bias", None)
        object.__setattr__(self, "lora_A", None)
        object.__setattr__(self, "lora_B", None)
        object.__setattr__(self, "scaling", 0.0)

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    def attach_adapter(self, rank: int, scaling: float, rng: np.random.Generator) -> None:
        A = param(rng.normal(0.0, 1.0 / np.sqrt(self.n_in), (rank, self.n_in)))
        B = param(np.zeros((self.n_out, rank)))
        object.__setattr__(self, "lora_A", A)
        object.__setattr__(self, "lora_B", B)
        object.__setattr__(self, "scaling", float(scaling))
        self._adapters["lora_A"] = A
        self._adapters["lora_B"] = B

    def reset_adapter(self, rng: np.random.Generator) -> None:
        self.lora_A.data[...] = rng.normal(0.0, 1.0 / np.sqrt(self.n_in), self.lora_A.shape)
        self.lora_B.data[...] = 0.0

    def merge_adapter(self) -> None:
        self.weight.data += self.scaling * (self.lora_B.data @ self.lora_A.data).T

    def __call__(self, x: Tensor, adapter: bool = True) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if adapter and self.lora_A is not None:
            y = y + ((x @ self.lora_A.transpose()) @ self.lora_B.transpose()) * self.scaling
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def adapted_linears(root: Module) -> List[Linear]:
    return [m for m in root.modules() if isinstance(m, Linear) and m.has_adapter]


def load_arrays(tensors: Dict[str, Tensor], arrays: Dict[str, np.ndarray], strict: bool = True,
                what: str = "parameters") -> None:
    missing = [k for k in tensors if k not in arrays]
    unexpected = [k for k in arrays if k not in tensors]
    if strict and (missing or unexpected):
        raise KeyError(f"{what}: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for k, t in tensors.items():
        if k in arrays:
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ValueError(f"{what}: shape mismatch for {k}: {a.shape} vs {t.shape}")
            t.data[...] = a


def copy_arrays(tensors: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in tensors.items()}

