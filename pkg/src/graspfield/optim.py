"""Double-precision Adam used by field training, level-set descent, and the planner."""

from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam on a list of float64 arrays."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]

    def step(self, grads, lrs=None) -> list[np.ndarray]:
        """Return the update deltas for one step (caller applies them).

        Args:
            grads: gradient arrays, same shapes as at construction.
            lrs: optional per-array learning rates overriding self.lr.
        """
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        deltas = []
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            lr = self.lr if lrs is None else lrs[i]
            deltas.append(-lr * mhat / (np.sqrt(vhat) + self.eps))
        return deltas
