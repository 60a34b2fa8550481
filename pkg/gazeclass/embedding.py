"""Exact t-SNE of per-subject ASDNet activations."""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import CLASS_NAMES, N_VARIANTS
from .errors import EmbeddingError
from .evaluation import model_for
from .network import head_activations, stack_streams

logger = logging.getLogger(__name__)

EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
LEARNING_RATE = 200.0
PERPLEXITY_TOL = 1e-5
PERPLEXITY_STEPS = 50


@dataclass
class EmbeddingInput:
    points: np.ndarray
    labels: np.ndarray
    subject_ids: list

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 4:
            raise EmbeddingError("embedding needs an (N, d) matrix with N >= 4")
        if not np.all(np.isfinite(self.points)):
            raise EmbeddingError("embedding input has non-finite values")


@dataclass
class Embedding2D:
    coords: np.ndarray
    kl_trace: np.ndarray
    perplexity: float
    seed: int
    exaggeration_iters: int = EXAGGERATION_ITERS


def default_perplexity(n):
    return min(30.0, float((n - 1) // 3))


def _squared_distances(x):
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_affinities(d_row, beta):
    p = np.exp(-(d_row - d_row.min()) * beta)
    total = p.sum()
    entropy = np.log(total) + beta * np.sum((d_row - d_row.min()) * p) / total
    return p / total, entropy


def conditional_probabilities(x, perplexity):
    """Row-stochastic P(j|i) with each row's Gaussian bandwidth bisected to the perplexity."""
    n = len(x)
    d = _squared_distances(x)
    target = np.log(perplexity)
    cond = np.zeros((n, n))
    for i in range(n):
        others = np.delete(d[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        p, entropy = _row_affinities(others, beta)
        for _ in range(PERPLEXITY_STEPS):
            if abs(entropy - target) < PERPLEXITY_TOL:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else (beta + lo) / 2.0
            p, entropy = _row_affinities(others, beta)
        cond[i, np.arange(n) != i] = p
    return cond


def joint_probabilities(x, perplexity):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if perplexity <= 0 or perplexity > (n - 1) / 3:
        raise EmbeddingError(f"perplexity {perplexity} infeasible for {n} points")
    if np.all(x == x[0]):
        raise EmbeddingError("all input points are identical")
    cond = conditional_probabilities(x, perplexity)
    p = cond + cond.T
    return p / p.sum()


def _student_t(y):
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(p, y):
    _, q = _student_t(y)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / np.maximum(q[nz], 1e-300))))


def kl_gradient(p, y):
    num, q = _student_t(y)
    w = (p - q) * num
    return 4.0 * (np.diag(w.sum(axis=1)) - w) @ y


def initial_coords(n, seed, point_keys=None):
    """Per-point N(0, 1e-4) draws keyed by ``(seed, point_key)``."""
    keys = range(n) if point_keys is None else point_keys
    return np.stack([np.random.default_rng([seed, int(k)]).normal(0.0, 1e-4, 2) for k in keys])


def tsne(inp, perplexity=None, seed=0, iterations=1000, learning_rate=LEARNING_RATE, point_keys=None):
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains."""
    points = getattr(inp, "points", inp)
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 4:
        raise EmbeddingError("t-SNE needs at least 4 points")
    if iterations < EXAGGERATION_ITERS:
        raise EmbeddingError(f"iterations must be >= {EXAGGERATION_ITERS}")
    if not 0 < learning_rate < np.inf:
        raise EmbeddingError(f"learning_rate must be positive and finite, got {learning_rate}")
    perplexity = default_perplexity(n) if perplexity is None else perplexity
    p = joint_probabilities(points, perplexity)

    y = initial_coords(n, seed, point_keys)
    step = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = np.empty(iterations)
    for it in range(iterations):
        early = it < EXAGGERATION_ITERS
        grad = kl_gradient(p * EXAGGERATION if early else p, y)
        momentum = 0.5 if early else 0.8
        same_sign = (grad > 0) == (step > 0)
        gains = np.maximum(np.where(same_sign, gains * 0.8, gains + 0.2), 0.01)
        step = momentum * step - learning_rate * gains * grad
        y = y + step
        y = y - y.mean(axis=0)
        trace[it] = kl_divergence(p, y) if np.all(np.isfinite(y)) else np.nan
        if not np.isfinite(trace[it]):
            raise EmbeddingError(f"t-SNE diverged at iteration {it}")
    logger.info("t-SNE: %d points, perplexity %.1f, final KL %.4f", n, perplexity, trace[-1])
    return Embedding2D(coords=y, kl_trace=trace, perplexity=float(perplexity), seed=seed)


def kl_trace_check(embedding, window=50, slack=1e-3):
    """After exaggeration, the KL moving average never rises by more than ``slack``."""
    post = np.asarray(embedding.kl_trace[embedding.exaggeration_iters :], dtype=float)
    if not np.all(np.isfinite(post)):
        return False
    if len(post) <= window:
        return True
    moving = np.convolve(post, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(moving) <= slack))


def subject_embedding_inputs(models, features, subject_ids=None):
    """Per-subject fc1 (post-ReLU) activations and logits, each averaged over the variants."""
    ids = features.subject_ids if subject_ids is None else list(subject_ids)
    hidden, logits = [], []
    for sid in ids:
        stacked = np.stack([
            stack_streams(features.image[v], features.hfm[sid][v]) for v in range(N_VARIANTS)
        ])
        h, z = head_activations(model_for(models, sid), stacked)
        hidden.append(h.mean(axis=0))
        logits.append(z.mean(axis=0))
    labels = np.array([features.labels[sid] for sid in ids])
    return (
        EmbeddingInput(np.stack(hidden), labels, ids),
        EmbeddingInput(np.stack(logits), labels, ids),
    )


def write_scatter_csv(path, embedding, inp):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["subject_id", "label", "x", "y"])
        for sid, label, (x, y) in zip(inp.subject_ids, inp.labels, embedding.coords):
            writer.writerow([sid, CLASS_NAMES[label], repr(float(x)), repr(float(y))])


def write_kl_csv(path, embedding):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["iteration", "kl"])
        for it, value in enumerate(embedding.kl_trace):
            writer.writerow([it, repr(float(value))])
