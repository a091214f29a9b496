"""Reverse-time diffusion over the flattened inducing variables.

The forward (noising) SDE is an Ornstein-Uhlenbeck process with constant
drift rate ``lam`` and diffusion scale ``g``.  Posterior draws are produced by
an Euler-Maruyama simulation of the learned reverse SDE started from
``p_fix = N(0, sigma2 I)``.  The bridge process, which shares the forward
dynamics but starts at ``p_fix``, has marginals ``N(0, kappa_t I)`` and
hence an analytic score ``-U / kappa_t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

N_FREQ = 4
EMBED_DIM = 1 + 2 * N_FREQ


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    lam: float = 0.5
    g: float = 1.0
    T: float = 1.0
    S: int = 30
    sigma2: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.g < 0 or self.T <= 0 or self.S < 1 or self.sigma2 <= 0:
            raise ValueError(f"invalid diffusion schedule {self}")

    @property
    def dt(self):
        return self.T / self.S

    @property
    def grid(self):
        return np.arange(self.S + 1) * self.dt

    @property
    def is_stationary(self):
        return self.lam > 0 and np.isclose(self.g ** 2 / (2 * self.lam), self.sigma2)


def kappa(t, sched):
    """Bridge marginal variance: solution of dk/dt = -2 lam k + g^2, k(0) = sigma2."""
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > sched.T * (1 + 1e-12)):
        raise ValueError(f"kappa: t={t} outside [0, {sched.T}]")
    a = 2 * sched.lam * t
    # (1 - e^{-a}) / (2 lam), with a series for tiny rates to avoid 0/0
    growth = np.where(a < 1e-8, t * (1 - 0.5 * a), -np.expm1(-a) / np.maximum(2 * sched.lam, 1e-300))
    return sched.sigma2 * np.exp(-a) + sched.g ** 2 * growth


def kappa_ode_oracle(t, sched, steps=10_000):
    """Classical RK4 integration of the variance ODE; an independent check on :func:`kappa`."""
    lam, g2 = sched.lam, sched.g ** 2

    def rhs(k):
        return -2 * lam * k + g2

    k, h = sched.sigma2, float(t) / steps
    for _ in range(steps):
        k1 = rhs(k)
        k2 = rhs(k + 0.5 * h * k1)
        k3 = rhs(k + 0.5 * h * k2)
        k4 = rhs(k + h * k3)
        k += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return k


def boundary_kl(sched, H):
    """KL(N(0, sigma2 I) || N(0, kappa_T I)) in H dimensions."""
    ratio = sched.sigma2 / kappa(sched.T, sched)
    return 0.5 * H * (ratio - 1 - np.log(ratio))


def time_embedding(t, T):
    s = t / T
    freqs = np.pi * 2.0 ** np.arange(N_FREQ)
    return np.concatenate([[s], np.sin(freqs * s), np.cos(freqs * s)])


class ScoreNetwork:
    """Fully connected tanh network approximating the score of the forward marginals.

    Input is the state concatenated with a time embedding (t/T plus sine and
    cosine features at four frequencies).  The output layer starts at zero.
    With ``analytic=True`` the network is bypassed and the bridge score
    ``-U / kappa_t`` is returned, which requires ``schedule``.

    With ``residual=True`` the network output is added to the bridge score,
    so a freshly initialized network reproduces the bridge exactly and the
    path-KL integrand is the squared network output.  Off by default.
    """

    def __init__(self, dim, hidden=(128, 128), rng=None, analytic=False, schedule=None,
                 residual=False):
        self.dim = dim
        self.hidden = tuple(hidden)
        self.analytic = analytic
        self.residual = residual
        self.schedule = schedule
        if (analytic or residual) and schedule is None:
            raise ValueError("analytic and residual score modes need a schedule")
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [dim + EMBED_DIM, *self.hidden, dim]
        self.weights, self.biases = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            W = np.zeros((a, b)) if last else rng.standard_normal((a, b)) * np.sqrt(1.0 / a)
            self.weights.append(dc.Tensor(W, requires_grad=True))
            self.biases.append(dc.Tensor(np.zeros(b), requires_grad=True))

    def parameters(self):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"score/W{i}"] = W
            out[f"score/b{i}"] = b
        return out

    def __call__(self, t, U):
        U = dc.as_tensor(U)
        if self.analytic:
            return U * (-1.0 / float(kappa(t, self.schedule)))
        T = self.schedule.T if self.schedule is not None else 1.0
        emb = np.broadcast_to(time_embedding(t, T), (U.shape[0], EMBED_DIM))
        h = dc.concat([U, emb], axis=1)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.matmul(h, W) + b
            if i < len(self.weights) - 1:
                h = dc.tanh(h)
        if self.residual:
            h = h - U * (1.0 / float(kappa(t, self.schedule)))
        return h


def score_eval(net, t, U):
    return net(t, U)


@dataclass
class ReverseTrajectory:
    states: list  # S + 1 tensors of shape (n, H)
    scores: list  # S tensors, score at (T - t_s, states[s])
    noise: np.ndarray  # (S, n, H)
    schedule: DiffusionSchedule

    @property
    def terminal(self):
        return self.states[-1]


def simulate_reverse(net, sched, n, H, rng):
    """Euler-Maruyama simulation of the learned reverse SDE for ``n`` chains.

    U_{s+1} = U_s + dt * (lam * U_s + g^2 * s(T - t_s, U_s)) + g * sqrt(dt) * eps_s
    """
    dt = sched.dt
    U = dc.Tensor(np.sqrt(sched.sigma2) * rng.standard_normal((n, H)))
    noise = rng.standard_normal((sched.S, n, H))
    states, scores = [U], []
    g2, step_noise = sched.g ** 2, sched.g * np.sqrt(dt)
    for s in range(sched.S):
        t_rev = sched.T - s * dt
        score = net(t_rev, U)
        U = U + dt * (sched.lam * U + g2 * score) + step_noise * noise[s]
        if not np.isfinite(U.values).all():
            raise DivergenceError(f"reverse SDE produced non-finite state at step {s + 1}")
        states.append(U)
        scores.append(score)
    return ReverseTrajectory(states, scores, noise, sched)


def path_kl(traj, sched):
    """Per-chain estimate of KL(learned reverse path || bridge reverse path).

    Boundary term plus a left Riemann sum of
    0.5 * g^2 * || U / kappa_{T-t} + s(T-t, U) ||^2.
    """
    if traj.schedule != sched:
        raise ValueError("path_kl: trajectory was simulated with a different schedule")
    dt, H = sched.dt, traj.terminal.shape[1]
    total = 0.0
    for s, score in enumerate(traj.scores):
        k = float(kappa(sched.T - s * dt, sched))
        mismatch = traj.states[s] * (1.0 / k) + score
        total = total + dc.sum_(dc.square(mismatch), axis=1)
    return 0.5 * dt * sched.g ** 2 * total + boundary_kl(sched, H)
