"""Exact t-SNE (no tree approximation), for a few thousand points at most."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TsneResult:
    embedding: np.ndarray  # (n, 2)
    kl: float
    initial_kl: float
    conditional: np.ndarray  # row-normalised P(j | i)
    perplexities: np.ndarray  # achieved per point


def sq_distances(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(1)
    d = s[:, None] - 2.0 * x @ x.T + s[None, :]
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    logits = -beta * (d - d.min())
    p = np.exp(logits)
    p /= p.sum()
    h = -float(np.sum(p * np.log(np.maximum(p, 1e-300))))
    return h, p


def conditional_probabilities(dist: np.ndarray, perplexity: float, tol: float = 1e-4,
                              max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian bandwidths found by bisection on the precision.

    Stops when exp(entropy) is within ``tol`` of the target perplexity; rows
    whose distances are all equal can't be tuned and come out uniform.
    """
    n = dist.shape[0]
    P = np.zeros((n, n))
    achieved = np.empty(n)
    target = np.log(perplexity)
    for i in range(n):
        d = np.delete(dist[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        h, p = _row_entropy(d, beta)
        for _ in range(max_iter):
            if abs(np.exp(h) - perplexity) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, p = _row_entropy(d, beta)
        P[i, np.arange(n) != i] = p
        achieved[i] = np.exp(h)
    return P, achieved


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def _q_matrix(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + sq_distances(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def _dedupe(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    _, first = np.unique(x, axis=0, return_index=True)
    dup = np.ones(len(x), dtype=bool)
    dup[first] = False
    if dup.any():
        x = x.copy()
        x[dup] += 1e-9 * rng.standard_normal((int(dup.sum()), x.shape[1]))
    return x


def tsne_embed(points, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
               learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250,
               momentum: tuple[float, float] = (0.5, 0.8), switch_iter: int = 250) -> TsneResult:
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n < 3 * perplexity:
        raise ValueError(f"t-SNE needs n >= 3 * perplexity ({n} < {3 * perplexity})")
    rng = np.random.default_rng(seed)
    x = _dedupe(x, rng)
    cond, achieved = conditional_probabilities(sq_distances(x), perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    np.fill_diagonal(P, 0.0)

    y = 1e-4 * rng.standard_normal((n, 2))
    initial_kl = _kl(P, _q_matrix(y)[0])
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iterations):
        Q, num = _q_matrix(y)
        Peff = P * exaggeration if it < exaggeration_iters else P
        W = (Peff - Q) * num
        grad = 4.0 * ((np.diag(W.sum(1)) - W) @ y)
        mom = momentum[0] if it < switch_iter else momentum[1]
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
    final_kl = _kl(P, _q_matrix(y)[0])
    return TsneResult(y, final_kl, initial_kl, cond, achieved)
