import numpy as np


class SGD:
    """Heavy-ball momentum SGD over a fixed list of tensors (updated in place)."""

    def __init__(self, params, lr=1e-2, momentum=0.9, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        gs = [grads[p].data for p in self.params]
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in gs))
            if norm > self.clip_norm:
                gs = [g * (self.clip_norm / norm) for g in gs]
        for p, v, g in zip(self.params, self._velocity, gs):
            v *= self.momentum
            v += g
            p.data -= self.lr * v
