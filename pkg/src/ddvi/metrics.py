"""Test metrics from predictive samples."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .kernels import LOG_2PI


def log_mean_exp(a, axis=0):
    return logsumexp(a, axis=axis) - np.log(a.shape[axis])


def rmse(pred_mean, y):
    return float(np.sqrt(np.mean((np.asarray(pred_mean) - np.asarray(y)) ** 2)))


def gaussian_mixture_nll(samples, noise_var, y):
    """Mean over points of -log((1/S) sum_s N(y | f_s, noise_var)); samples is (S, N, D)."""
    y = np.asarray(y).reshape(samples.shape[1:])
    logp = -0.5 * (LOG_2PI + np.log(noise_var)) - 0.5 * (y - samples) ** 2 / noise_var
    return float(-log_mean_exp(logp.sum(axis=2), axis=0).mean())


def categorical_nll(probs, labels):
    """``probs`` is (S, N, C) per-sample class probabilities."""
    labels = np.asarray(labels).astype(int)
    p = probs[:, np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p.mean(axis=0), 1e-300)).mean())


def auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    labels = np.asarray(labels).astype(int)
    if set(np.unique(labels)) - {0, 1}:
        raise ValueError("auc requires binary labels")
    pos = labels == 1
    n_pos, n_neg = pos.sum(), (~pos).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics(pred, targets, task=None):
    """Regression: rmse and nll on the original target scale.
    Classification: accuracy, nll and (binary only) auc."""
    task = task or pred.task
    if task == "regression":
        y = np.asarray(targets, float).reshape(len(pred.mean), -1)
        y_norm = (y - pred.y_mean) / pred.y_std
        nll = gaussian_mixture_nll(pred.samples, pred.noise_var, y_norm)
        nll += float(np.log(pred.y_std).sum())
        return {"rmse": rmse(pred.mean, y), "nll": nll}
    labels = np.asarray(targets).astype(int).reshape(-1)
    probs = pred.probs
    out = {"accuracy": float((probs.argmax(axis=1) == labels).mean()),
           "nll": categorical_nll(pred.sample_probs, labels)}
    if probs.shape[1] == 2:
        out["auc"] = auc(probs[:, 1], labels)
    return out
