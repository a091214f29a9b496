"""Self-checks against independent oracles, shared by the CLI and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffusion import (DiffusionSchedule, ScoreNetwork, kappa, kappa_ode_oracle, path_kl,
                        simulate_reverse)
from .elbo import dsvi_elbo, ddvi_elbo, exact_gaussian_posterior
from .gplayers import DgpArchitecture
from .kernels import KernelHyper, rbf_gram
from .model import DgpModel, GROUPS
from .likelihoods import GaussianLikelihood


def random_schedule(rng):
    return DiffusionSchedule(lam=rng.uniform(0.1, 2.0), g=rng.uniform(0.3, 2.0),
                             T=rng.uniform(0.5, 2.0), S=30, sigma2=rng.uniform(0.2, 2.0))


def kappa_check(seed=0, n_schedules=5, n_points=20):
    """Max relative error of the closed-form bridge variance against RK4."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_schedules):
        sched = random_schedule(rng)
        for t in np.linspace(0.0, sched.T, n_points):
            ref = kappa_ode_oracle(t, sched)
            worst = max(worst, abs(float(kappa(t, sched)) - ref) / abs(ref))
    return worst


def analytic_cancellation_check(seed=0, n=64, H=16, sched=None):
    """Max |path_kl| over chains driven by the analytic bridge score."""
    sched = DiffusionSchedule() if sched is None else sched
    net = ScoreNetwork(H, analytic=True, schedule=sched)
    with dc.no_grad():
        traj = simulate_reverse(net, sched, n, H, np.random.default_rng(seed))
        return float(np.abs(path_kl(traj, sched).values).max())


@dataclass
class ConjugateInstance:
    """Single-layer GP regression problem with a closed-form posterior over U."""

    Z: np.ndarray
    X: np.ndarray
    y: np.ndarray  # (N, 1)
    hyper: KernelHyper
    noise_var: float

    def exact(self, jitter=1e-6):
        return exact_gaussian_posterior(self.Z, self.hyper, self.X, self.y, self.noise_var, jitter)

    def model(self, schedule=None, meanfield=False, score_hidden=(128, 128), seed=0,
              score_residual=False):
        arch = DgpArchitecture((self.X.shape[1], 1), len(self.Z))
        model = DgpModel.create(arch, schedule, np.random.default_rng(seed), score_hidden,
                                Z_init=[self.Z], meanfield=meanfield,
                                likelihood=GaussianLikelihood(self.noise_var),
                                score_residual=score_residual)
        layer = model.layers[0]
        layer.hyper.log_lengthscales.values = self.hyper.log_lengthscales.values.copy()
        layer.hyper.log_signal_variance.values = np.array(self.hyper.log_signal_variance.values)
        return model


def conjugate_instance(seed=0, N=40, M=8, lengthscale=0.15, noise_var=1.0, repeat=True):
    """Toy GP regression instance.

    With ``repeat`` each inducing input is observed N/M times up to a tiny
    perturbation; otherwise X = Z (requires N = M).  Targets are a draw from
    the GP prior plus noise.
    """
    rng = np.random.default_rng(seed)
    Z = np.linspace(-1, 1, M)[:, None]
    if repeat:
        X = np.repeat(Z, N // M, axis=0) + rng.uniform(-0.01, 0.01, (N, 1))
    else:
        if N != M:
            raise ValueError("X = Z requires N == M")
        X = Z.copy()
    hyper = KernelHyper.init(1, lengthscale, 1.0)
    K = rbf_gram(X, X, hyper).values + 1e-8 * np.eye(len(X))
    f = np.linalg.cholesky(K) @ rng.standard_normal(len(X))
    y = (f + np.sqrt(noise_var) * rng.standard_normal(len(X)))[:, None]
    return ConjugateInstance(Z, X, y, hyper, noise_var)


def set_meanfield_to(model, post):
    """Place the mean-field factor at the exact Gaussian posterior."""
    mf = model.meanfield
    mf.means[0].values = post.mean.reshape(-1, 1).copy()
    mf.chols[0].values = np.linalg.cholesky(post.covariance)[None].copy()


def dsvi_saturation_check(seed=0, n_seeds=256, n_mc=1):
    """DSVI bound at the exact posterior of a conjugate instance with X = Z.

    Returns (mean bound, standard error, exact log marginal).
    """
    inst = conjugate_instance(seed, N=8, M=8, lengthscale=0.3, noise_var=0.5, repeat=False)
    post = inst.exact()
    model = inst.model(meanfield=True)
    set_meanfield_to(model, post)
    with dc.no_grad():
        vals = np.array([float(dsvi_elbo(model, inst.X, inst.y, len(inst.X), n_mc,
                                         np.random.default_rng([seed, s])).values)
                         for s in range(n_seeds)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_seeds)), post.log_marginal


def audit_model(seed=0, num_inducing=4, S=10, hidden=(16, 16), batch=8, phi_scale=0.1):
    """Two-layer toy model with random non-zero score weights and a data batch."""
    rng = np.random.default_rng(seed)
    arch = DgpArchitecture.build(2, 2, num_inducing, 1)
    sched = DiffusionSchedule(S=S)
    model = DgpModel.create(arch, sched, rng, hidden, noise_var=0.3)
    for p in model.score.parameters().values():
        p.values = p.values + phi_scale * rng.standard_normal(p.shape)
    for layer in model.layers:
        layer.hyper.log_lengthscales.values = rng.uniform(-0.3, 0.3, layer.hyper.dim)
    X = rng.uniform(-1, 1, (batch, 2))
    y = np.sin(3 * X[:, :1]) + 0.1 * rng.standard_normal((batch, 1))
    return model, X, y


def grad_audit(seed=0, eps=1e-5, **kwargs):
    """Per-group max relative error of autodiff against central differences
    on a one-sample bound whose noise is frozen by ``seed``."""
    model, X, y = audit_model(seed, **kwargs)
    N_total = 4 * len(X)
    out = {}
    for group in GROUPS:
        named = model.parameters((group,))
        if not named:
            continue
        params = list(named.values())

        def f(_):
            return ddvi_elbo(model, X, y, N_total, 1, np.random.default_rng(seed + 1)).total

        out[group] = dc.grad_check(f, params, eps=eps)
    return out
