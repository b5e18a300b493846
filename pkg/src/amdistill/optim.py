"""Named parameter collections and SGD with momentum and weight decay."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor

__all__ = ["ParamSet", "sgd_step"]


class ParamSet:
    """Ordered map of named trainable tensors with momentum buffers.

    Momentum buffers are zero-initialized when a parameter is added, so the
    first optimizer step behaves like plain SGD scaled by the gradient.
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        self._velocity: dict[str, np.ndarray] = {}
        if params:
            for name, tensor in params.items():
                self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._velocity[name] = np.zeros_like(tensor.data)

    def adopt(self, other: "ParamSet", prefix: str) -> None:
        """Add every parameter of ``other`` under ``prefix.`` (fresh momentum)."""
        for name, tensor in other.items():
            self.add(f"{prefix}.{name}", tensor)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def velocity(self, name: str) -> np.ndarray:
        return self._velocity[name]

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def fingerprint(self) -> str:
        """sha256 over names and raw little-endian values, order-independent."""
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode("utf-8"))
            digest.update(self._params[name].data.astype("<f8").tobytes())
        return digest.hexdigest()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update over every parameter, then zero the grads.

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v.
    """
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be > 0, got {lr}")
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter '{name}' has no gradient")
        v = params.velocity(name)
        np.multiply(v, momentum, out=v)
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
        p.grad = None
