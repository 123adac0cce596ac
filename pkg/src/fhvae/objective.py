"""Discriminative segment variational lower bound and the s-vector cache."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .gaussian import DiagGaussian, kl, log_pdf, reparam_sample
from .model import FhvaeParams, decode_x, encode_z1, encode_z2
from .tensor import Tensor

LOG_COLUMNS = ("step", "total", "recon_ll", "kl_z1", "kl_z2", "log_prior_mu2", "disc_log_prob", "wall_ms")


class CacheError(KeyError):
    pass


@dataclass
class SVectorCache:
    """Trainable table of s-vector posterior means, one row per cached sequence."""

    table: Tensor
    slot_to_seq: list
    seg_counts: np.ndarray
    seq_to_slot: dict = field(init=False)

    def __post_init__(self):
        self.seg_counts = np.asarray(self.seg_counts, dtype=np.int64)
        if len(self.slot_to_seq) != self.table.shape[0] or len(self.seg_counts) != self.table.shape[0]:
            raise ValueError("cache table, slot map and segment counts disagree on K")
        self.seq_to_slot = {s: k for k, s in enumerate(self.slot_to_seq)}
        if len(self.seq_to_slot) != len(self.slot_to_seq):
            raise ValueError("slot_to_seq must be injective")

    @classmethod
    def from_values(cls, values: np.ndarray, slot_to_seq: Sequence, seg_counts: Sequence[int]) -> "SVectorCache":
        return cls(Tensor(np.asarray(values, dtype=np.float64), requires_grad=True), list(slot_to_seq), seg_counts)

    @property
    def K(self) -> int:
        return self.table.shape[0]

    @property
    def nbytes(self) -> int:
        return self.table.data.nbytes

    def slots_for(self, seq_ids: Sequence) -> np.ndarray:
        try:
            return np.array([self.seq_to_slot[s] for s in seq_ids], dtype=np.intp)
        except KeyError as e:
            raise CacheError(f"sequence {e.args[0]!r} has no cache slot") from None


@dataclass
class SegmentBatch:
    frames: np.ndarray  # (B, T, d_x)
    seq_ids: list
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.seq_ids)


@dataclass
class LossBreakdown:
    """Batch means of each term. ``log_prior_mu2`` is already divided by the
    per-segment count, so total = -(recon - kl1 - kl2 + log_prior + alpha*disc)."""

    loss: Tensor
    total: float
    recon_ll: float
    kl_z1: float
    kl_z2: float
    log_prior_mu2: float
    disc_log_prob: float

    def row(self, step: int, wall_ms: float | None = None) -> dict:
        return {"step": step, "total": self.total, "recon_ll": self.recon_ll, "kl_z1": self.kl_z1,
                "kl_z2": self.kl_z2, "log_prior_mu2": self.log_prior_mu2,
                "disc_log_prob": self.disc_log_prob, "wall_ms": wall_ms}


@dataclass
class SegmentTerms:
    bound: Tensor
    recon_ll: Tensor
    kl_z1: Tensor
    kl_z2: Tensor
    log_prior_mu2: Tensor  # divided by N
    q_z2: DiagGaussian


def _check_finite(name: str, t: Tensor):
    if not np.all(np.isfinite(t.data)):
        raise tn.NonFiniteError(f"non-finite value in term '{name}' (first bad op: {tn.first_nonfinite_op()})")


def segment_lower_bound(params: FhvaeParams, x, mu2_hat, n_segments, eps_z2, eps_z1) -> SegmentTerms:
    """Segment-level bound given the cached s-vector, one reparameterized sample.

    Shapes: x (B, T, d_x), mu2_hat (B, d_z2), n_segments (B,), eps_* (B, d_z*).
    """
    c = params.config
    n = np.asarray(n_segments, dtype=np.float64).reshape(-1)
    if np.any(n < 1):
        raise ValueError("segment counts must be >= 1")
    mu2_hat = tn.as_tensor(mu2_hat)

    q2 = encode_z2(params, x)
    z2 = reparam_sample(q2, eps_z2)
    q1 = encode_z1(params, x, z2)
    z1 = reparam_sample(q1, eps_z1)
    px = decode_x(params, z1, z2)

    recon = log_pdf(px, x)
    kl1 = kl(q1, DiagGaussian.standard(q1.mean.shape))
    kl2 = kl(q2, DiagGaussian(mu2_hat, Tensor(c.sigma_sq_z2)))
    prior = tn.div(log_pdf(DiagGaussian.standard(mu2_hat.shape), mu2_hat), Tensor(n))
    for name, t in (("recon_ll", recon), ("kl_z1", kl1), ("kl_z2", kl2), ("log_prior_mu2", prior)):
        _check_finite(name, t)
    bound = tn.add(tn.sub(tn.sub(recon, kl1), kl2), prior)
    return SegmentTerms(bound, recon, kl1, kl2, prior, q2)


def discriminative_logits(z2_mean, table, sigma_sq_z2: float) -> Tensor:
    """Gaussian log-densities of each z2 mean under every cache entry, up to a
    per-row constant (which a log-softmax cancels): (z . mu - |mu|^2/2) / sigma^2."""
    z = tn.as_tensor(z2_mean)
    if z.ndim == 1:
        z = tn.reshape(z, (1, -1))
    table = tn.as_tensor(table)
    half_sq = tn.scale(tn.sum(tn.square(table), axis=1), 0.5)
    cross = tn.matmul(z, tn.transpose(table))
    return tn.scale(tn.sub(cross, half_sq), 1.0 / sigma_sq_z2)


def discriminative_log_prob(z2_mean, cache, slots, sigma_sq_z2: float = 0.25) -> Tensor:
    """log p(z | mu_slot) - logsumexp_j log p(z | mu_j) over the cache entries."""
    table = cache.table if isinstance(cache, SVectorCache) else tn.as_tensor(cache)
    K = table.shape[0]
    scalar = np.ndim(slots) == 0
    slots = np.atleast_1d(np.asarray(slots, dtype=np.intp))
    if slots.min() < 0 or slots.max() >= K:
        raise IndexError(f"slot out of range for a cache of {K} entries")
    logits = discriminative_logits(z2_mean, table, sigma_sq_z2)
    out = tn.sub(tn.pick(logits, slots), tn.logsumexp(logits, axis=1))
    return tn.reshape(out, ()) if scalar else out


def draw_noise(rng: np.random.Generator, batch: int, config) -> tuple[np.ndarray, np.ndarray]:
    eps_z2 = rng.standard_normal((batch, config.z2_dim))
    eps_z1 = rng.standard_normal((batch, config.z1_dim))
    return eps_z2, eps_z1


def total_loss(params: FhvaeParams, cache: SVectorCache, batch: SegmentBatch, alpha: float,
               rng: np.random.Generator) -> LossBreakdown:
    """Batch mean of -(segment bound + alpha * discriminative term).

    With alpha == 0 the discriminative term is not built at all and is
    reported as NaN.
    """
    c = params.config
    slots = cache.slots_for(batch.seq_ids)
    B = len(slots)
    eps_z2, eps_z1 = draw_noise(rng, B, c)
    mu2_hat = tn.take_rows(cache.table, slots)
    terms = segment_lower_bound(params, batch.frames, mu2_hat, cache.seg_counts[slots], eps_z2, eps_z1)
    objective = terms.bound
    disc_value = math.nan
    if alpha != 0:
        disc = discriminative_log_prob(terms.q_z2.mean, cache.table, slots, c.sigma_sq_z2)
        _check_finite("disc_log_prob", disc)
        objective = tn.add(objective, tn.scale(disc, alpha))
        disc_value = float(disc.data.mean())
    loss = tn.neg(tn.mean(objective))
    return LossBreakdown(
        loss=loss,
        total=float(loss.data),
        recon_ll=float(terms.recon_ll.data.mean()),
        kl_z1=float(terms.kl_z1.data.mean()),
        kl_z2=float(terms.kl_z2.data.mean()),
        log_prior_mu2=float(terms.log_prior_mu2.data.mean()),
        disc_log_prob=disc_value,
    )
