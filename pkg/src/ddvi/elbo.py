"""Evidence lower bounds: the diffusion bound, the mean-field baseline and conjugate oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from . import diffcore as dc
from .diffusion import path_kl, simulate_reverse
from .gplayers import PosteriorDraw, dgp_prior_logp, propagate
from .kernels import LOG_2PI, choose_jitter, half_logdet, rbf_gram


@dataclass
class ElboBreakdown:
    """Monte Carlo averages of the bound's terms; ``total`` is differentiable."""

    prior_term: dc.Tensor
    likelihood_term: dc.Tensor
    l1_term: dc.Tensor
    fix_term: dc.Tensor
    n_mc: int

    @property
    def total(self):
        return self.prior_term + self.likelihood_term - self.l1_term - self.fix_term

    def as_floats(self):
        vals = {k: float(dc.as_tensor(getattr(self, k)).values)
                for k in ("prior_term", "likelihood_term", "l1_term", "fix_term")}
        vals["total"] = vals["prior_term"] + vals["likelihood_term"] - vals["l1_term"] - vals["fix_term"]
        return vals


def _check_batch(X, y, n_mc):
    if len(X) == 0:
        raise ValueError("empty minibatch")
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    y = np.asarray(y)
    return y.reshape(len(X), -1) if y.ndim == 1 and y.dtype.kind == "f" else y


def scaled_loglik(model, draw, X, y, N_total, rng, factors=None):
    """(N_total / B) * sum_i log p(y_i | f_{L,i}), one propagated sample per draw."""
    F, _ = propagate(X, draw, model.layers, rng=rng, factors=factors)
    return dc.sum_(model.likelihood.logp(F, y), axis=1) * (N_total / len(X))


def ddvi_elbo(model, X, y, N_total, n_mc, rng):
    """Diffusion bound: prior + likelihood - path KL - log p_fix at the terminal state."""
    y = _check_batch(X, y, n_mc)
    sched, H = model.schedule, model.arch.flat_dim
    traj = simulate_reverse(model.score, sched, n_mc, H, rng)
    UT = traj.terminal
    draw = PosteriorDraw(UT, model.arch)
    factors = model.factors()
    prior = dgp_prior_logp(draw, model.layers, factors)
    lik = scaled_loglik(model, draw, X, y, N_total, rng, factors)
    l1 = path_kl(traj, sched)
    fix = (-0.5 / sched.sigma2) * dc.sum_(dc.square(UT), axis=1) - 0.5 * H * (LOG_2PI + np.log(sched.sigma2))
    avg = lambda v: dc.mean(v) if isinstance(v, dc.Tensor) else dc.Tensor(float(np.mean(v)))
    return ElboBreakdown(avg(prior), avg(lik), avg(l1), avg(fix), n_mc)


def gaussian_kl_to_prior(m, Ls, Lk):
    """sum_d KL(N(m_d, Ls_d Ls_d^T) || N(0, Lk Lk^T)); m is M x D, Ls is D x M x M."""
    M, D = m.shape
    A = dc.solve_triangular(Lk, dc.reshape(dc.transpose(Ls, (1, 0, 2)), (M, D * M)))
    trace = dc.sum_(dc.square(A))
    maha = dc.sum_(dc.square(dc.solve_triangular(Lk, m)))
    diag = Ls[:, np.arange(M), np.arange(M)]
    logdet_s = dc.sum_(dc.log(dc.square(diag)))
    return 0.5 * (trace + maha - M * D + 2 * D * half_logdet(Lk) - logdet_s)


def dsvi_breakdown(model, X, y, N_total, n_mc, rng):
    """Mean-field bound in the same four-term layout (prior_term = -KL, l1 = fix = 0)."""
    y = _check_batch(X, y, n_mc)
    mf = model.meanfield
    if mf is None:
        raise ValueError("dsvi_elbo needs a model with mean-field parameters")
    factors = model.factors()
    kl = 0.0
    for m, Ls, Lk in zip(mf.means, mf.factors(), factors):
        kl = kl + gaussian_kl_to_prior(m, Ls, Lk)
    draw = mf.sample(n_mc, rng)
    lik = dc.mean(scaled_loglik(model, draw, X, y, N_total, rng, factors))
    zero = dc.Tensor(0.0)
    return ElboBreakdown(-kl, lik, zero, zero, n_mc)


def dsvi_elbo(model, X, y, N_total, n_mc, rng):
    return dsvi_breakdown(model, X, y, N_total, n_mc, rng).total


def model_elbo(model, X, y, N_total, n_mc, rng):
    """Breakdown of whichever bound matches the model's posterior family."""
    if model.meanfield is not None:
        return dsvi_breakdown(model, X, y, N_total, n_mc, rng)
    return ddvi_elbo(model, X, y, N_total, n_mc, rng)


@dataclass
class ExactGaussianPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    log_marginal: float


def exact_gaussian_posterior(Z, hyper, X, y, noise_var, jitter=1e-6):
    """Exact p(u | y) and log p(y) for a single-layer GP with Gaussian noise.

    With A = K_XZ K_ZZ^-1 and C = K_XX - A K_ZX + noise_var I the posterior
    covariance is (K_ZZ^-1 + A^T C^-1 A)^-1 and the mean is cov A^T C^-1 y.
    """
    Z, X = np.asarray(Z, float), np.asarray(X, float)
    y = np.asarray(y, float).reshape(-1)
    gram = lambda a, b: rbf_gram(a, b, hyper).values
    Kzz, Kxz, Kxx = gram(Z, Z), gram(X, Z), gram(X, X)
    Kzz = Kzz + choose_jitter(Kzz, jitter) * np.eye(len(Z))
    Lz = cholesky(Kzz, lower=True)
    A = cho_solve((Lz, True), Kxz.T).T
    C = Kxx - A @ Kxz.T + noise_var * np.eye(len(X))
    C = 0.5 * (C + C.T)
    Lc = cholesky(C, lower=True)
    CiA = cho_solve((Lc, True), A)
    prec = cho_solve((Lz, True), np.eye(len(Z))) + A.T @ CiA
    Lp = cholesky(0.5 * (prec + prec.T), lower=True)
    cov = cho_solve((Lp, True), np.eye(len(Z)))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (CiA.T @ y)
    Ky = Kxx + noise_var * np.eye(len(X))
    Ly = cholesky(Ky, lower=True)
    w = solve_triangular(Ly, y, lower=True)
    log_marginal = -0.5 * w @ w - np.log(np.diag(Ly)).sum() - 0.5 * len(y) * LOG_2PI
    return ExactGaussianPosterior(mean, cov, float(log_marginal))
