"""Optimizers operating on flat parameter lists.

A model exposes ``parameters()`` as an ordered list of named tensors; Adam
moments align with that order.  ``sign`` flips the effective learning rate
(sign=-1 is the unlearning step used by the mixture's forget pass).
"""

from typing import List, Sequence

from .backend import kernels as K
from .errors import ShapeError
from .tensor import Tensor


class AdamState:
    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: List[Tensor] = [Tensor(p.shape) for p in params]
        self.v: List[Tensor] = [Tensor(p.shape) for p in params]

    def step(self, params: Sequence[Tensor], grads: Sequence[Tensor], sign: int = 1) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ShapeError(
                f"adam step over {len(params)} params / {len(grads)} grads, "
                f"state tracks {len(self.m)}"
            )
        self.t += 1
        lr = sign * self.learning_rate
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeError(f"adam shapes: param {p.shape}, grad {g.shape}")
            K.adam_update(
                p.data, g.data, m.data, v.data,
                self.t, lr, self.beta1, self.beta2, self.epsilon, p.size,
            )

    def clone_fresh(self) -> "AdamState":
        """New zeroed state with the same hyperparameters and shapes."""
        fresh = AdamState.__new__(AdamState)
        fresh.learning_rate = self.learning_rate
        fresh.beta1 = self.beta1
        fresh.beta2 = self.beta2
        fresh.epsilon = self.epsilon
        fresh.t = 0
        fresh.m = [Tensor(t.shape) for t in self.m]
        fresh.v = [Tensor(t.shape) for t in self.v]
        return fresh


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], learning_rate: float) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"sgd step over {len(params)} params / {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"sgd shapes: param {p.shape}, grad {g.shape}")
        K.sgd_update(p.data, g.data, learning_rate, p.size)
