"""Trainable DGP state: layers, likelihood and the posterior family over U."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffusion import DiffusionSchedule, ScoreNetwork
from .gplayers import DgpArchitecture, GPLayer, PosteriorDraw
from .likelihoods import CategoricalLikelihood, GaussianLikelihood

GROUPS = ("phi", "q", "hyper", "z", "lik")


class MeanField:
    """Gaussian q(U_{l,d}) = N(m_{l,d}, S_{l,d}) with S stored as a Cholesky factor."""

    def __init__(self, arch, init_scale=1.0):
        M = arch.num_inducing
        self.arch = arch
        self.means = [dc.Tensor(np.zeros((M, d)), requires_grad=True) for d in arch.widths[1:]]
        self.chols = [dc.Tensor(np.tile(init_scale * np.eye(M), (d, 1, 1)), requires_grad=True)
                      for d in arch.widths[1:]]
        self._mask = np.tril(np.ones((M, M)))

    def parameters(self):
        out = {}
        for l, (m, c) in enumerate(zip(self.means, self.chols)):
            out[f"q/m{l}"] = m
            out[f"q/chol{l}"] = c
        return out

    def factors(self):
        return [c * self._mask for c in self.chols]

    def sample(self, n, rng):
        """Reparameterized draw of ``n`` samples as a :class:`PosteriorDraw`."""
        M = self.arch.num_inducing
        blocks = []
        for m, Ls in zip(self.means, self.factors()):
            D = m.shape[1]
            eps = rng.standard_normal((n, D, M))
            U = dc.reshape(m, (1, M, D)) + dc.einsum("dmk,ndk->nmd", Ls, eps)
            blocks.append(dc.reshape(U, (n, M * D)))
        return PosteriorDraw(dc.concat(blocks, axis=1), self.arch)


@dataclass
class DgpModel:
    arch: DgpArchitecture
    layers: list
    likelihood: object
    schedule: DiffusionSchedule
    score: ScoreNetwork
    meanfield: MeanField = None
    jitter: float = 1e-6

    @classmethod
    def create(cls, arch, schedule=None, rng=None, score_hidden=(128, 128), noise_var=0.1,
               Z_init=None, meanfield=False, likelihood=None, score_residual=False):
        """Fresh model; inducing inputs default to standard normal draws."""
        rng = np.random.default_rng(0) if rng is None else rng
        schedule = DiffusionSchedule() if schedule is None else schedule
        layers = []
        for l in range(arch.num_layers):
            Z = None if Z_init is None else Z_init[l]
            layers.append(GPLayer.init(arch.num_inducing, arch.widths[l], rng, Z=Z))
        if likelihood is None:
            likelihood = (CategoricalLikelihood(arch.num_classes) if arch.task == "classification"
                          else GaussianLikelihood(noise_var))
        score = ScoreNetwork(arch.flat_dim, score_hidden, rng=rng, schedule=schedule,
                             residual=score_residual)
        mf = MeanField(arch) if meanfield else None
        return cls(arch, layers, likelihood, schedule, score, mf)

    def parameters(self, groups=GROUPS):
        """Named trainable tensors, restricted to the given groups, in a fixed order."""
        out = {}
        if "phi" in groups and self.meanfield is None:
            out.update(self.score.parameters())
        if "q" in groups and self.meanfield is not None:
            out.update(self.meanfield.parameters())
        for l, layer in enumerate(self.layers):
            if "hyper" in groups:
                out[f"layer{l}/log_lengthscales"] = layer.hyper.log_lengthscales
                out[f"layer{l}/log_signal_variance"] = layer.hyper.log_signal_variance
            if "z" in groups:
                out[f"layer{l}/Z"] = layer.Z
        if "lik" in groups:
            out.update(self.likelihood.parameters())
        return out

    def state_arrays(self):
        return {k: t.values.copy() for k, t in self.parameters().items()}

    def load_arrays(self, arrays):
        params = self.parameters()
        for k, v in arrays.items():
            if k in params:
                if params[k].shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {np.shape(v)}")
                params[k].values = np.array(v, dtype=np.float64)

    def factors(self):
        return [layer.factor(self.jitter) for layer in self.layers]
