"""Adaptive-moment first-order optimiser over named parameter groups."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with a learning rate per group.

    ``step`` returns the update for each group rather than applying it, so
    callers can map tangent-space steps onto their manifold (quaternions).
    Step counts are kept per leading index, so rows appended later with
    :meth:`extend` get their own bias correction.
    """

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, np.ndarray] = {}

    def _init(self, name, g):
        self.m[name] = np.zeros_like(g)
        self.v[name] = np.zeros_like(g)
        self.t[name] = np.zeros(g.shape[:1] if g.ndim else (), dtype=np.int64)

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> dict[str, np.ndarray]:
        updates = {}
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if name not in self.m:
                self._init(name, g)
            if self.m[name].shape != g.shape:
                raise ValueError(f"gradient shape for {name!r} changed; call extend() or keep() first")
            self.t[name] += 1
            t = self.t[name].reshape(self.t[name].shape + (1,) * (g.ndim - self.t[name].ndim))
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            updates[name] = -lr_scale * self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return updates

    def extend(self, n_new: int) -> None:
        """Append ``n_new`` fresh rows to every group."""
        for name in self.m:
            pad = ((0, n_new),) + ((0, 0),) * (self.m[name].ndim - 1)
            self.m[name] = np.pad(self.m[name], pad)
            self.v[name] = np.pad(self.v[name], pad)
            self.t[name] = np.pad(self.t[name], (0, n_new))

    def keep(self, mask) -> None:
        for name in self.m:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]
            self.t[name] = self.t[name][mask]
