"""Stochastic gradient descent with momentum."""

import numpy as np


class SGD:
    """Momentum SGD over a subset of a store's parameters.

    ``lr_scale`` maps parameter name -> multiplier on the base rate;
    ``masks`` maps name -> 0/1 array restricting which entries move.
    Masked entries are never written, so they stay bit-identical.
    ``clip_norm`` rescales the step's gradient when its global L2 norm
    (after ``grad_scale``) exceeds the bound.
    """

    def __init__(self, store, names, lr=1e-2, momentum=0.9, lr_scale=None, masks=None, clip_norm=None):
        self.store = store
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.lr_scale = dict(lr_scale or {})
        self.masks = dict(masks or {})
        self.clip_norm = clip_norm
        self.velocity = {n: np.zeros_like(store[n].data) for n in self.names}

    def grad_norm(self, grad_scale=1.0):
        return float(np.sqrt(sum(float((self.store[n].grad ** 2).sum()) for n in self.names))) * grad_scale

    def step(self, grad_scale=1.0):
        if self.clip_norm is not None:
            norm = self.grad_norm(grad_scale)
            if norm > self.clip_norm:
                grad_scale *= self.clip_norm / norm
        for n in self.names:
            p = self.store[n]
            g = p.grad * grad_scale
            v = self.velocity[n]
            v *= self.momentum
            v += g
            lr = self.lr * self.lr_scale.get(n, 1.0)
            mask = self.masks.get(n)
            if mask is None:
                p.data -= lr * v
            else:
                sel = mask.astype(bool)
                v[~sel] = 0.0
                p.data[sel] -= lr * v[sel]

    def state(self):
        return {n: v.copy() for n, v in self.velocity.items()}

    def load_state(self, state):
        for n, v in state.items():
            if n in self.velocity:
                self.velocity[n] = np.array(v, dtype=np.float64)
