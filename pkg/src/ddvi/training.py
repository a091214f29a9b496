"""Training loop, prediction and model (de)serialization."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import diffcore as dc
from .data import Preprocessor
from .diffusion import DiffusionSchedule, simulate_reverse
from .elbo import model_elbo
from .gplayers import DgpArchitecture, PosteriorDraw, propagate
from .model import DgpModel
from .seeding import generator

log = logging.getLogger(__name__)

METRIC_HEADER = ["iter", "elbo", "prior", "lik", "l1", "fix", "wall_ms"]


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    method: str = "ddvi"
    layers: int = 2
    num_inducing: int = 128
    lr: float = 0.01
    lr_schedule: str = "constant"
    batch_size: int = 256
    iterations: int = 20000
    n_mc: int = 4
    n_mc_eval: int = 128
    lam: float = 0.5
    g: float = 1.0
    T: float = 1.0
    S: int = 30
    sigma2: float = 1.0
    seed: int = 0
    jitter: float = 1e-6
    hidden_cap: int = 8
    score_hidden: str = "128,128"
    score_residual: int = 0
    train_groups: str = "phi,q,hyper,z,lik"
    noise_var: float = 0.1
    z_init: str = "normal"
    pca: int = 0
    split_ratio: float = 0.9
    checkpoint_every: int = 1000
    metrics_path: str = ""

    def __post_init__(self):
        if self.method not in ("ddvi", "dsvi"):
            raise ValueError(f"method must be ddvi or dsvi, got {self.method!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.z_init not in ("normal", "data"):
            raise ValueError(f"z_init must be normal or data, got {self.z_init!r}")
        for name in ("layers", "num_inducing", "batch_size", "n_mc", "n_mc_eval", "S",
                     "hidden_cap", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.iterations < 0 or self.T <= 0 or self.sigma2 <= 0:
            raise ValueError("lr and iterations must be non-negative; T and sigma2 positive")

    def lr_at(self, it):
        if self.lr_schedule == "cosine" and self.iterations > 0:
            return 0.5 * self.lr * (1 + np.cos(np.pi * it / self.iterations))
        return self.lr

    @property
    def schedule(self):
        return DiffusionSchedule(self.lam, self.g, self.T, self.S, self.sigma2)

    @property
    def hidden_sizes(self):
        return tuple(int(h) for h in self.score_hidden.split(",") if h.strip())

    @property
    def groups(self):
        return tuple(g.strip() for g in self.train_groups.split(",") if g.strip())

    @classmethod
    def from_mapping(cls, mapping):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in mapping.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            conv = {"int": int, "float": float, "str": str}[types[k]]
            kwargs[k] = conv(float(v)) if conv is int else conv(v)
        return cls(**kwargs)

    def to_mapping(self):
        return {k: v for k, v in dataclasses.asdict(self).items()}


class Adam:
    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # name -> Tensor
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.step_count = 0

    def step(self):
        """Descent step on the accumulated gradients."""
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        for k, p in self.params.items():
            g = np.zeros(p.shape) if p.grad is None else p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** t)
            vhat = self.v[k] / (1 - b2 ** t)
            p.values = p.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays, step_count):
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam_m/{k}"])
            self.v[k] = np.array(arrays[f"adam_v/{k}"])
        self.step_count = step_count


def build_model(config, input_dim, task="regression", num_classes=0, output_dim=1, X=None):
    """Model for ``config``; ``X`` supplies inducing inputs when ``z_init == 'data'``."""
    out = num_classes if task == "classification" else output_dim
    arch = DgpArchitecture.build(input_dim, config.layers, config.num_inducing, out,
                                 config.hidden_cap, task, num_classes)
    rng = generator(config.seed, 0)
    Z_init = None
    if config.z_init == "data" and X is not None:
        idx = rng.choice(len(X), config.num_inducing, replace=len(X) < config.num_inducing)
        Z0 = X[idx]
        Z_init = [Z0] + [None] * (arch.num_layers - 1)
        for l in range(1, arch.num_layers):
            Z_init[l] = Z0[:, :arch.widths[l]] if Z0.shape[1] >= arch.widths[l] else None
    model = DgpModel.create(arch, config.schedule, rng, config.hidden_sizes, config.noise_var,
                            Z_init, meanfield=config.method == "dsvi",
                            score_residual=bool(config.score_residual))
    model.jitter = config.jitter
    return model


def _arch_config(model):
    a = model.arch
    return {"arch.widths": ",".join(map(str, a.widths)), "arch.num_inducing": a.num_inducing,
            "arch.task": a.task, "arch.num_classes": a.num_classes}


def make_checkpoint(config, model, opt, iteration, preprocessor=None):
    cfg = config.to_mapping()
    cfg.update(_arch_config(model))
    cfg["state.iteration"] = iteration
    cfg["state.adam_step"] = opt.step_count if opt is not None else 0
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    arrays["rng/master_seed"] = np.array([float(config.seed)])
    if preprocessor is not None:
        arrays.update(preprocessor.arrays())
    return ckpt_io.Checkpoint(cfg, arrays)


def restore(checkpoint):
    """Rebuild ``(config, model, preprocessor)`` from a checkpoint."""
    cfg = dict(checkpoint.config)
    config = TrainConfig.from_mapping({k: v for k, v in cfg.items() if "." not in k})
    widths = tuple(int(w) for w in cfg["arch.widths"].split(","))
    task, nc = cfg["arch.task"], int(cfg["arch.num_classes"])
    model = build_model(config, widths[0], task, nc, widths[-1])
    if model.arch.widths != widths:
        arch = DgpArchitecture(widths, model.arch.num_inducing, task, nc)
        model = DgpModel.create(arch, config.schedule, generator(config.seed, 0),
                                config.hidden_sizes, config.noise_var,
                                meanfield=config.method == "dsvi",
                                score_residual=bool(config.score_residual))
        model.jitter = config.jitter
    model.load_arrays({k[len("param/"):]: v for k, v in checkpoint.arrays.items()
                       if k.startswith("param/")})
    pre = None
    if "data/x_min" in checkpoint.arrays:
        pre = Preprocessor.from_arrays(checkpoint.arrays, task)
    return config, model, pre


@dataclass
class TrainResult:
    model: DgpModel
    checkpoint: ckpt_io.Checkpoint
    history: list = field(default_factory=list)


def _open_metrics(path, append):
    if not path:
        return None, None
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    exists = append and os.path.exists(path)
    fh = open(path, "a" if exists else "w", newline="")
    w = csv.writer(fh)
    if not exists:
        w.writerow(METRIC_HEADER)
    return fh, w


def train(config, data, preprocessor=None, out_dir=None, resume=None, model=None,
          callback=None):
    """Maximize the bound with Adam over minibatches.

    ``data`` is an already preprocessed :class:`Dataset`.  Iteration ``i``
    draws its minibatch and all Monte Carlo noise from ``generator(seed, 1, i)``,
    so resuming from a checkpoint reproduces the uninterrupted run.
    """
    X, y = data.X, data.y
    N = len(X)
    if model is None:
        if resume is not None:
            _, model, _ = restore(resume)
        else:
            model = build_model(config, X.shape[1], data.task, data.num_classes,
                                y.shape[1] if y.ndim == 2 else 1, X)
    params = model.parameters(config.groups)
    opt = Adam(params, lr=config.lr)
    start = 0
    if resume is not None:
        start = int(resume.config["state.iteration"])
        opt.load_arrays(resume.arrays, int(resume.config["state.adam_step"]))

    metrics_path = config.metrics_path or (os.path.join(out_dir, "metrics.csv") if out_dir else "")
    fh, writer = _open_metrics(metrics_path, append=resume is not None)
    ckpt_path = os.path.join(out_dir, "checkpoint.ddvi") if out_dir else None
    B = min(config.batch_size, N)
    history = []
    last_good = make_checkpoint(config, model, opt, start, preprocessor)
    try:
        for it in range(start, config.iterations):
            t0 = time.perf_counter()
            rng = generator(config.seed, 1, it)
            idx = np.sort(rng.choice(N, B, replace=False)) if B < N else np.arange(N)
            opt.zero_grad()
            try:
                bd = model_elbo(model, X[idx], y[idx], N, config.n_mc, rng)
                total = bd.total
                if not np.isfinite(total.values):
                    raise FloatingPointError(f"non-finite ELBO at iteration {it}")
                dc.backward(-total)
                if not all(p.grad is None or np.isfinite(p.grad).all() for p in params.values()):
                    raise FloatingPointError(f"non-finite gradient at iteration {it}")
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                if ckpt_path:
                    ckpt_io.save(last_good, ckpt_path)
                raise TrainingAborted(str(exc), last_good) from exc
            opt.lr = config.lr_at(it)
            opt.step()
            vals = bd.as_floats()
            row = [it, vals["total"], vals["prior_term"], vals["likelihood_term"],
                   vals["l1_term"], vals["fix_term"], (time.perf_counter() - t0) * 1e3]
            history.append(row)
            if writer:
                writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
            if callback:
                callback(it, bd, model)
            done = it + 1
            if done % config.checkpoint_every == 0 or done == config.iterations:
                last_good = make_checkpoint(config, model, opt, done, preprocessor)
                if ckpt_path:
                    ckpt_io.save(last_good, ckpt_path)
                log.info("iter %d elbo %.4f", done, vals["total"])
    finally:
        if fh:
            fh.close()
    final = make_checkpoint(config, model, opt, max(config.iterations, start), preprocessor)
    return TrainResult(model, final, history)


def posterior_draws(model, n, rng):
    """``n`` draws of the flattened inducing variables (no graph recorded)."""
    with dc.no_grad():
        if model.meanfield is not None:
            return model.meanfield.sample(n, rng).flat.values
        traj = simulate_reverse(model.score, model.schedule, n, model.arch.flat_dim, rng)
        return traj.terminal.values


@dataclass
class Prediction:
    task: str
    samples: np.ndarray  # (S, N, D_L) final-layer values, normalized target scale
    noise_var: float = 0.0
    y_mean: np.ndarray = 0.0
    y_std: np.ndarray = 1.0
    sample_probs: np.ndarray = None  # (S, N, C)

    @property
    def mean(self):
        return self.samples.mean(axis=0) * self.y_std + self.y_mean

    @property
    def variance(self):
        return (self.samples.var(axis=0) + self.noise_var) * self.y_std ** 2

    @property
    def probs(self):
        return self.sample_probs.mean(axis=0)


def predict(model, X_star, n_samples, rng, preprocessor=None, chunk=32):
    """Predictive samples at (already normalized) inputs ``X_star``."""
    X_star = np.asarray(X_star, float)
    if X_star.shape[1] != model.arch.widths[0]:
        raise ValueError(f"expected {model.arch.widths[0]} features, got {X_star.shape[1]}")
    out = []
    with dc.no_grad():
        factors = model.factors()
        for start in range(0, n_samples, chunk):
            n = min(chunk, n_samples - start)
            U = posterior_draws(model, n, rng)
            F, _ = propagate(X_star, PosteriorDraw(dc.Tensor(U), model.arch), model.layers,
                             rng=rng, factors=factors)
            out.append(F.values)
    samples = np.concatenate(out, axis=0)
    if model.arch.task == "classification":
        return Prediction("classification", samples,
                          sample_probs=model.likelihood.probabilities(samples))
    y_mean = preprocessor.y_mean if preprocessor is not None and preprocessor.y_mean is not None else 0.0
    y_std = preprocessor.y_std if preprocessor is not None and preprocessor.y_std is not None else 1.0
    return Prediction("regression", samples, model.likelihood.noise_var, y_mean, y_std)
