"""Named parameter storage, the optimizer step and the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


class ParamStore:
    """An ordered name -> parameter map with per-name freeze flags.

    Frozen parameters still receive gradients during backward; the optimizer
    step leaves them untouched.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def freeze(self, prefix: str, frozen: bool = True) -> None:
        """Set the freeze flag on every parameter whose name matches
        ``prefix`` exactly or starts with ``prefix + '.'``."""
        hit = False
        for name in self._params:
            if name == prefix or name.startswith(prefix + "."):
                self._frozen[name] = frozen
                hit = True
        if not hit:
            raise UsageError(f"no parameter matches prefix {prefix!r}")

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def merge(self, other: "ParamStore") -> None:
        for name, t in other.items():
            self.add(name, t, frozen=other.is_frozen(name))

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            if name == prefix or name.startswith(prefix + "."):
                out.add(name, t, frozen=self.is_frozen(name))
        return out

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy()), frozen=self.is_frozen(name))
        return out

    def blob(self, prefix: str = "") -> bytes:
        """Concatenated little-endian bytes of the matching parameters, for
        bit-exact before/after comparisons."""
        chunks = []
        for name, t in self.items():
            if not prefix or name == prefix or name.startswith(prefix + "."):
                chunks.append(t.data.astype("<f8").tobytes())
        return b"".join(chunks)


def sgd_step(store: ParamStore, lr: float, weight_decay: float = 0.0) -> None:
    """One plain gradient step with decoupled weight decay on unfrozen
    parameters; all gradients (frozen included) are cleared afterwards."""
    for name, t in store.items():
        if not store.is_frozen(name) and t.grad is not None:
            t.data -= lr * t.grad + lr * weight_decay * t.data
    store.zero_grads()


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing from base_lr at step 0 to min_lr at total_steps."""

    base_lr: float
    total_steps: int
    min_lr: float = 0.0

    def lr(self, t: int) -> float:
        if t < 0 or t > self.total_steps:
            raise UsageError(f"step {t} outside [0, {self.total_steps}]")
        span = self.base_lr - self.min_lr
        return self.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * t / self.total_steps))


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(seed))
