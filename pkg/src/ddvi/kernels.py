"""RBF/ARD kernels, jittered Cholesky and zero-mean Gaussian log densities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

LOG_2PI = float(np.log(2 * np.pi))


class CholeskyError(np.linalg.LinAlgError):
    pass


@dataclass
class KernelHyper:
    """Kernel hyperparameters stored in log space."""

    log_lengthscales: dc.Tensor
    log_signal_variance: dc.Tensor

    @classmethod
    def init(cls, dim, lengthscale=1.0, signal_variance=1.0):
        return cls(
            dc.Tensor(np.full(dim, np.log(lengthscale)), requires_grad=True),
            dc.Tensor(np.log(signal_variance), requires_grad=True),
        )

    @property
    def dim(self):
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales.values)

    @property
    def signal_variance(self):
        return float(np.exp(self.log_signal_variance.values))


def rbf_gram(A, B, hyper):
    """Cross-covariance ``sf2 * exp(-0.5 * sum_d (a_d - b_d)^2 / l_d^2)``."""
    A, B = dc.as_tensor(A), dc.as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1] or A.shape[1] != hyper.dim:
        raise dc.ShapeError(
            f"rbf_gram: point sets {A.shape}, {B.shape} do not match {hyper.dim} lengthscales")
    inv_ls = dc.exp(dc.neg(hyper.log_lengthscales))
    As, Bs = A * inv_ls, B * inv_ls
    sq = (dc.sum_(dc.square(As), axis=1, keepdims=True)
          + dc.reshape(dc.sum_(dc.square(Bs), axis=1), (1, -1))
          - 2.0 * dc.matmul(As, dc.transpose(Bs)))
    return dc.exp(hyper.log_signal_variance - 0.5 * sq)


def rbf_diag(n, hyper):
    """Prior marginal variances ``k(x, x)`` for ``n`` points."""
    return dc.broadcast_to(dc.exp(hyper.log_signal_variance), (n,))


def choose_jitter(K, base_jitter=1e-6, max_jitter=1e-2):
    """Smallest jitter in ``base, 10*base, ..., max`` for which K + jitter*I factorizes."""
    K = np.asarray(K)
    eye = np.eye(K.shape[0])
    jitter = base_jitter
    while jitter <= max_jitter * (1 + 1e-9):
        try:
            np.linalg.cholesky(K + jitter * eye)
            return jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(K)
    raise CholeskyError(
        f"Cholesky failed with jitter up to {max_jitter:g}; condition estimate {cond:.3e}")


def chol_with_jitter(K, base_jitter=1e-6, max_jitter=1e-2):
    """Return ``(L, jitter)`` with ``L L^T = K + jitter I``."""
    K = dc.as_tensor(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise dc.ShapeError(f"chol_with_jitter: expected square matrix, got {K.shape}")
    jitter = choose_jitter(K.values, base_jitter, max_jitter)
    return dc.cholesky(K + jitter * np.eye(K.shape[0])), jitter


def half_logdet(L):
    """``0.5 * log|K|`` from the Cholesky factor of K."""
    return dc.sum_(dc.log(dc.diagonal(L)))


def gaussian_logpdf_zero_mean(u, L):
    """log N(u | 0, L L^T).

    ``u`` may be an M-vector or an M x D matrix; columns are independent
    draws and their log densities are summed.
    """
    u = dc.as_tensor(u)
    M = L.shape[0]
    if u.shape[0] != M:
        raise dc.ShapeError(f"gaussian_logpdf_zero_mean: u {u.shape} vs factor {L.shape}")
    ncol = 1 if u.ndim == 1 else int(np.prod(u.shape[1:]))
    w = dc.solve_triangular(L, u)
    return (-0.5 * dc.sum_(dc.square(w)) - ncol * half_logdet(L)
            - 0.5 * M * ncol * LOG_2PI)
