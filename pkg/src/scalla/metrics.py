"""Predictive-quality and OOD-discrimination metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .likelihoods import softmax
from .lla import PredictiveGaussian

PROB_FLOOR = 1e-12
ENTROPY_JITTER = 1e-8


def softmax_probs_mc(pred: PredictiveGaussian, samples: int, seed) -> np.ndarray:
    """Mean softmax over draws from the predictive Gaussian; deterministic per seed."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    mean = np.asarray(pred.mean, dtype=np.float64)
    cov = np.asarray(pred.cov, dtype=np.float64)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-8 * max(1.0, abs(w.max())):
        raise ValueError("predictive covariance is not PSD")
    root = v * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    draws = mean + rng.standard_normal((samples, mean.size)) @ root.T
    return softmax(draws).mean(axis=0)


def accuracy(probs: np.ndarray, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return float(np.mean(probs.argmax(axis=1) == labels))


def nll(probs: np.ndarray, labels) -> float:
    """Mean negative log predicted probability of the true label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def ece(probs: np.ndarray, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins on [0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = np.minimum((confidence * bins).astype(int), bins - 1)
    total = len(labels)
    out = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b == 0:
            continue
        out += (n_b / total) * abs(correct[sel].mean() - confidence[sel].mean())
    return out


def auc_roc(scores_in, scores_ood) -> float:
    """Rank-based (Mann-Whitney) AUC: P(ood > in) + 0.5 P(equal)."""
    scores_in = np.asarray(scores_in, dtype=np.float64)
    scores_ood = np.asarray(scores_ood, dtype=np.float64)
    if scores_in.size == 0 or scores_ood.size == 0:
        raise ValueError("both score lists must be nonempty")
    ranks = rankdata(np.concatenate([scores_in, scores_ood]))
    n_i, n_o = scores_in.size, scores_ood.size
    rank_sum = ranks[n_i:].sum()
    return float((rank_sum - n_o * (n_o + 1) / 2.0) / (n_i * n_o))


def softmax_entropy(probs) -> np.ndarray | float:
    """-sum p log p along the last axis, with 0 log 0 = 0."""
    probs = np.asarray(probs, dtype=np.float64)
    terms = np.where(probs > 0.0, probs * np.log(np.maximum(probs, PROB_FLOOR)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def gaussian_entropy(pred: PredictiveGaussian) -> float:
    """Differential entropy 0.5 log det(2 pi e (cov + jitter I)).

    The jitter keeps rank-deficient surrogate covariances finite.
    """
    cov = np.asarray(pred.cov, dtype=np.float64)
    c = cov.shape[0]
    jittered = 0.5 * (cov + cov.T) + ENTROPY_JITTER * np.eye(c)
    sign, logdet = np.linalg.slogdet(jittered)
    if sign <= 0:
        raise ValueError("covariance is not positive definite after jitter")
    return float(0.5 * (c * np.log(2.0 * np.pi * np.e) + logdet))
