"""Adam, global-norm gradient clipping and the plateau learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ParamStore


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for name in store.names(trainable_only=True):
        g = store.grad(name)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_gradients(store: ParamStore, max_norm: float = 5.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied factor (1.0 when the norm is already within bounds).
    """
    norm = global_grad_norm(store)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for name in store.names(trainable_only=True):
        g = store.grad(name)
        g *= g.dtype.type(scale)
    return scale


class Adam:
    """Bias-corrected Adam over the trainable tensors of a store."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(store[n]) for n in store.names(trainable_only=True)}
        self.v = {n: np.zeros_like(store[n]) for n in store.names(trainable_only=True)}

    def step(self, store: ParamStore, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, m in self.m.items():
            g = store.grad(name)
            v = self.v[name]
            dt = m.dtype.type
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            update = dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(self.eps))
            store[name] = store[name] - update

    def state_dict(self) -> dict:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def load_state_dict(self, state: dict, m: dict, v: dict) -> None:
        self.t = int(state["t"])
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        for name in self.m:
            self.m[name][...] = m[name]
            self.v[name][...] = v[name]


@dataclass
class PlateauSchedule:
    """Halve the LR after ``plateau_patience`` non-improving epochs; stop after ``stop_patience``.

    "Improving" means strictly lower validation loss; ties count as
    non-improving. The plateau counter restarts after each LR cut.
    """

    lr: float = 1e-3
    plateau_patience: int = 7
    stop_patience: int = 15
    factor: float = 0.5
    best: float = float("inf")
    since_best: int = 0
    since_cut: int = 0
    stopped: bool = False

    def step(self, val_loss: float) -> dict:
        improved = val_loss < self.best
        cut = False
        if improved:
            self.best = val_loss
            self.since_best = 0
            self.since_cut = 0
        else:
            self.since_best += 1
            self.since_cut += 1
            if self.since_cut >= self.plateau_patience:
                self.lr *= self.factor
                self.since_cut = 0
                cut = True
            if self.since_best >= self.stop_patience:
                self.stopped = True
        return {"improved": improved, "lr_cut": cut, "stop": self.stopped}

    def state_dict(self) -> dict:
        return dict(lr=self.lr, best=self.best, since_best=self.since_best,
                    since_cut=self.since_cut, stopped=self.stopped)

    def load_state_dict(self, d: dict) -> None:
        for k, v in d.items():
            setattr(self, k, v)
