"""Parameter containers and the two optimizers the training loops use."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .autograd import DTYPE, Tensor, matmul


class Module:
    """Base container that tracks parameters and named state recursively.

    Attributes that are Tensors with ``requires_grad`` count as parameters;
    plain numpy arrays count as buffers (e.g. batch-norm running stats).
    Attribute insertion order fixes the traversal order, which keeps
    checkpoints and optimizers deterministic.
    """

    def __init__(self):
        self.training = False

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus buffers, for checkpointing."""
        arrays = {name: t.data for name, t in self.named_parameters()}
        arrays.update(self.named_buffers())
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters():
            tensor.data = np.asarray(arrays[name], dtype=DTYPE).reshape(tensor.shape)
        for name, buf in self.named_buffers():
            buf[...] = np.asarray(arrays[name], dtype=DTYPE).reshape(buf.shape)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def apply_constraints(self) -> None:
        """Re-establish parameter invariants after an optimizer step."""
        constrain = getattr(self, "_constrain", None)
        if constrain is not None:
            constrain()
        for _, child in self._children():
            child.apply_constraints()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Affine map of the last axis: y = x @ w + b with w of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, init_scale: Optional[float] = None):
        super().__init__()
        if init_scale is None:
            init_scale = 1.0 / math.sqrt(d_in)
        self.w = Tensor(rng.normal(0.0, init_scale, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class SGD:
    """Plain stochastic gradient descent."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam:
    """Adam with bias correction; defaults follow the pretraining recipe."""

    def __init__(self, params: list[Tensor], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * p.grad ** 2
            mhat = self.m[i] / bias1
            vhat = self.v[i] / bias2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def warmup_lr(base_lr: float, step: int, total_steps: int, warmup_frac: float = 0.1) -> float:
    """Linear warmup to ``base_lr`` over the first ``warmup_frac`` of training."""
    warmup_steps = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr
