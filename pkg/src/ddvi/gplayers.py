"""Sparse GP layers: conditionals, reparameterized propagation and the DGP prior.

Inducing variables for all layers live in one flat vector of length
``H = M * sum(widths[1:])``; layer l occupies an ``M x D_l`` row-major block.
Draws are batched: a :class:`PosteriorDraw` holds ``n`` samples at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .kernels import KernelHyper, LOG_2PI, chol_with_jitter, half_logdet, rbf_gram

VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class DgpArchitecture:
    widths: tuple  # (D_0, D_1, ..., D_L)
    num_inducing: int
    task: str = "regression"
    num_classes: int = 0

    def __post_init__(self):
        if len(self.widths) < 2 or self.num_inducing < 1 or min(self.widths) < 1:
            raise ValueError(f"invalid architecture widths={self.widths} M={self.num_inducing}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.widths[-1] != self.num_classes:
            raise ValueError("classification output width must equal num_classes")

    @classmethod
    def build(cls, input_dim, num_layers, num_inducing, output_dim=1, hidden_cap=8,
              task="regression", num_classes=0):
        """Hidden widths follow the input dimension, capped at ``hidden_cap``."""
        hidden = min(input_dim, hidden_cap)
        widths = (input_dim,) + (hidden,) * (num_layers - 1) + (output_dim,)
        return cls(widths, num_inducing, task, num_classes)

    @property
    def num_layers(self):
        return len(self.widths) - 1

    @property
    def flat_dim(self):
        return self.num_inducing * sum(self.widths[1:])

    def offsets(self):
        out, start = [], 0
        for d in self.widths[1:]:
            out.append((start, start + self.num_inducing * d))
            start += self.num_inducing * d
        return out


@dataclass
class PosteriorDraw:
    """``n`` flattened inducing-variable samples and their per-layer views."""

    flat: dc.Tensor  # (n, H)
    arch: DgpArchitecture
    views: list = field(init=False)

    def __post_init__(self):
        if self.flat.ndim == 1:
            self.flat = dc.reshape(self.flat, (1, -1))
        n, H = self.flat.shape
        if H != self.arch.flat_dim:
            raise dc.ShapeError(f"draw has dimension {H}, architecture needs {self.arch.flat_dim}")
        M = self.arch.num_inducing
        self.views = [dc.reshape(self.flat[:, a:b], (n, M, d))
                      for (a, b), d in zip(self.arch.offsets(), self.arch.widths[1:])]

    @property
    def num_samples(self):
        return self.flat.shape[0]


@dataclass
class GPLayer:
    Z: dc.Tensor  # (M, D_in)
    hyper: KernelHyper

    @classmethod
    def init(cls, num_inducing, input_dim, rng, Z=None):
        if Z is None:
            Z = rng.standard_normal((num_inducing, input_dim))
        return cls(dc.Tensor(np.array(Z, dtype=float), requires_grad=True),
                   KernelHyper.init(input_dim))

    def factor(self, jitter=1e-6):
        L, _ = chol_with_jitter(rbf_gram(self.Z, self.Z, self.hyper), jitter)
        return L


def conditional_moments(F_prev, layer, U, L=None, jitter=1e-6):
    """Marginal moments of p(F_l | F_{l-1}, U_l).

    Shapes: ``F_prev`` (n, B, D_in) or (B, D_in); ``U`` (n, M, D) or (M, D).
    Returns ``mean`` (n, B, D) and ``var`` (n, B), with the variance floored
    at 1e-12.  Unbatched inputs give unbatched outputs.
    """
    F_prev, U = dc.as_tensor(F_prev), dc.as_tensor(U)
    squeeze = U.ndim == 2
    if squeeze:
        U = dc.reshape(U, (1,) + U.shape)
    n, M, D = U.shape
    if F_prev.ndim == 2:
        F_prev = dc.reshape(F_prev, (1,) + F_prev.shape)
    nf, B, Din = F_prev.shape
    if nf not in (1, n):
        raise dc.ShapeError(f"conditional_moments: {nf} input samples vs {n} draws")
    if L is None:
        L = layer.factor(jitter)
    Kzf = dc.transpose(rbf_gram(dc.reshape(F_prev, (nf * B, Din)), layer.Z, layer.hyper))
    A = dc.reshape(dc.solve_triangular(L, Kzf), (M, nf, B))  # L^-1 K_ZF
    W = dc.reshape(dc.solve_triangular(L, dc.reshape(dc.transpose(U, (1, 0, 2)), (M, n * D))),
                   (M, n, D))  # L^-1 U
    if nf == 1 and n > 1:
        A = dc.broadcast_to(A, (M, n, B))
    mean = dc.einsum("mnb,mnd->nbd", A, W)
    var = dc.exp(layer.hyper.log_signal_variance) - dc.einsum("mnb,mnb->nb", A, A)
    var = dc.clamp_min(var, VAR_FLOOR)
    if squeeze:
        return mean[0], var[0]
    return mean, var


def propagate(X, draw, layers, rng=None, eps=None, factors=None, jitter=1e-6):
    """Push inputs through the layer stack with reparameterized sampling.

    Noise is taken from ``eps`` (list of per-layer (n, B, D_l) arrays) when
    given, drawn from ``rng`` otherwise; with neither, the noise is zero and
    the propagation follows the conditional means.  Returns the final-layer
    samples (n, B, D_L) and the list of all layer samples.
    """
    X = dc.as_tensor(X)
    F = dc.reshape(X, (1,) + X.shape)
    n = draw.num_samples
    if factors is None:
        factors = [layer.factor(jitter) for layer in layers]
    samples = []
    for l, (layer, U, L) in enumerate(zip(layers, draw.views, factors)):
        mean, var = conditional_moments(F, layer, U, L=L)
        if eps is not None:
            e = eps[l]
        elif rng is not None:
            e = rng.standard_normal(mean.shape)
        else:
            e = None
        F = mean if e is None else mean + dc.reshape(dc.sqrt(var), var.shape + (1,)) * e
        samples.append(F)
    return F, samples


def dgp_prior_logp(draw, layers, factors=None, jitter=1e-6):
    """Per-sample sum over layers and output dims of log N(U_{l,d} | 0, K_ZZ)."""
    if factors is None:
        factors = [layer.factor(jitter) for layer in layers]
    n = draw.num_samples
    total = 0.0
    for U, L in zip(draw.views, factors):
        _, M, D = U.shape
        W = dc.solve_triangular(L, dc.reshape(dc.transpose(U, (1, 0, 2)), (M, n * D)))
        quad = dc.sum_(dc.sum_(dc.reshape(dc.square(W), (M, n, D)), axis=2), axis=0)
        total = total - 0.5 * quad - D * half_logdet(L) - 0.5 * M * D * LOG_2PI
    return total
