"""AdamW with decoupled weight decay for named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor

__all__ = ["OptimizerConfig", "AdamW"]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only
    (1-D gains and biases are left undecayed)."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig = OptimizerConfig()):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if p.data.ndim >= 2 and c.weight_decay:
                p.data -= c.lr * c.weight_decay * p.data
            p.data -= c.lr * update

    # moments travel inside checkpoints so a resumed run continues seamlessly
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk in tensors:
                self.m[name] = np.ascontiguousarray(tensors[mk], dtype=np.float64)
            if vk in tensors:
                self.v[name] = np.ascontiguousarray(tensors[vk], dtype=np.float64)
