"""Adam with decoupled weight decay, plus the two-stage learning-rate schedule."""

import math

import numpy as np


class NumericalError(RuntimeError):
    """Raised on non-finite gradients; carries the parameter name and step."""


class Adam:
    """Adam updating a list of parameter arrays in place.

    Weight decay defaults to the decoupled form (lr * wd * param subtracted
    after the Adam step); set decoupled=False to fold it into the gradient
    instead.
    """

    def __init__(self, params, lr, wd=0.0, beta1=0.9, beta2=0.999, eps=1e-8,
                 decoupled=True, names=None):
        self.params = list(params)
        self.lr = lr
        self.wd = wd
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decoupled = decoupled
        self.names = list(names) if names is not None else [f"param{i}" for i in range(len(self.params))]
        self.step_count = 0
        self.m1 = [np.zeros_like(p) for p in self.params]
        self.m2 = [np.zeros_like(p) for p in self.params]

    def step(self, grads, lr=None):
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        if lr is not None:
            self.lr = lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p, g, m1, m2 in zip(self.names, self.params, grads, self.m1, self.m2):
            g = np.asarray(g, dtype=np.float64)
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in {name} at step {t}")
            if not self.decoupled and self.wd:
                g = g + self.wd * p
            m1 *= self.beta1
            m1 += (1.0 - self.beta1) * g
            m2 *= self.beta2
            m2 += (1.0 - self.beta2) * g * g
            p -= self.lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + self.eps)
            if self.decoupled and self.wd:
                p -= self.lr * self.wd * p


def lr_schedule(t, t1_epochs, t2_epochs, iters_per_epoch, lr0):
    """Learning rate at 0-based iteration t.

    Constant lr0 for the first t1_epochs, then cosine annealing from lr0 to
    0 across the t2_epochs fine-tuning span. Continuous at the boundary.
    """
    warm = t1_epochs * iters_per_epoch
    if t < warm or t2_epochs == 0:
        return lr0
    progress = min((t - warm) / (t2_epochs * iters_per_epoch), 1.0)
    return lr0 * (1.0 + math.cos(math.pi * progress)) / 2.0
