"""Observation models.  ``logp(F, y)`` returns per-point log densities (n, B)."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .kernels import LOG_2PI


class GaussianLikelihood:
    def __init__(self, noise_var=0.1):
        self.log_noise_var = dc.Tensor(np.log(noise_var), requires_grad=True)

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var.values))

    def parameters(self):
        return {"lik/log_noise_var": self.log_noise_var}

    def logp(self, F, y):
        # F: (n, B, D), y: (B, D)
        r = dc.as_tensor(y) - F
        lv = self.log_noise_var
        return dc.sum_(-0.5 * (LOG_2PI + lv) - 0.5 * dc.square(r) * dc.exp(-lv), axis=2)


class CategoricalLikelihood:
    """Softmax over the final-layer outputs; targets are integer labels."""

    def __init__(self, num_classes):
        self.num_classes = num_classes

    def parameters(self):
        return {}

    def logp(self, F, y):
        labels = np.asarray(y).reshape(-1).astype(int)
        n, B, C = F.shape
        picked = F[:, np.arange(B), labels]
        return picked - dc.logsumexp(F, axis=2)

    def probabilities(self, F):
        F = np.asarray(F)
        e = np.exp(F - F.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class ShiftedMixtureLikelihood:
    """y ~ sum_k w_k N(f + c_k, noise_var), one shared noise variance.

    With several offsets the posterior over f given one observation has one
    mode per component, which makes it a convenient multimodal test bed.
    """

    def __init__(self, offsets=(0.0, 2.0), weights=None, noise_var=0.1):
        self.offsets = np.asarray(offsets, dtype=float)
        k = len(self.offsets)
        self.log_weights = np.log(np.full(k, 1.0 / k) if weights is None else np.asarray(weights))
        self.log_noise_var = dc.Tensor(np.log(noise_var), requires_grad=True)

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var.values))

    def parameters(self):
        return {"lik/log_noise_var": self.log_noise_var}

    def logp(self, F, y):
        # F: (n, B, 1), y: (B, 1); components along a trailing axis
        r = dc.as_tensor(np.asarray(y)[..., None] - self.offsets) - dc.reshape(F, F.shape + (1,))
        lv = self.log_noise_var
        comp = self.log_weights - 0.5 * (LOG_2PI + lv) - 0.5 * dc.square(r) * dc.exp(-lv)
        return dc.sum_(dc.logsumexp(comp, axis=3), axis=2)

    def sample(self, f, rng):
        f = np.asarray(f)
        k = rng.choice(len(self.offsets), size=f.shape, p=np.exp(self.log_weights))
        return f + self.offsets[k] + np.sqrt(self.noise_var) * rng.standard_normal(f.shape)
