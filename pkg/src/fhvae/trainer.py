"""Hierarchical-sampling training, the flat baseline, Adam and early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import DataError, SegmentDataset
from .model import FhvaeParams, ModelConfig, init_params, map_svector, z2_means
from .objective import SegmentBatch, SVectorCache, draw_noise, segment_lower_bound, total_loss

log = logging.getLogger(__name__)

CACHE_PARAM = "cache.table"

# independent named random streams derived from one seed
STREAMS = {"data": 0, "init": 1, "sequence": 2, "segment": 3, "noise": 4, "eval": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class TrainConfig:
    K: int = 2000
    bs: int = 64
    B_seg: int = 100
    alpha: float = 10.0
    max_steps: int = 20000
    patience_steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.K < 1 or self.bs < 1 or self.B_seg < 1:
            raise ValueError("K, bs and B_seg must all be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.max_steps < 0 or self.patience_steps < 0 or self.eval_every < 1:
            raise ValueError("max_steps and patience_steps must be >= 0, eval_every >= 1")

    @classmethod
    def full_scale(cls, large_corpus: bool = False) -> "TrainConfig":
        return cls(K=5000 if large_corpus else 2000, max_steps=500_000, patience_steps=50_000)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)  # per-parameter step counters

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)


def adam_update(name: str, param: np.ndarray, grad: np.ndarray, state: OptimizerState, lr: float,
                beta1: float, beta2: float, epsilon: float) -> None:
    if name not in state.m:
        state.m[name] = np.zeros_like(param)
        state.v[name] = np.zeros_like(param)
        state.t[name] = 0
    state.t[name] += 1
    t = state.t[name]
    m, v = state.m[name], state.v[name]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + epsilon)


def adam_step(params: FhvaeParams, cache: SVectorCache | None, state: OptimizerState, config: TrainConfig,
              grads: dict | None = None) -> None:
    """One bias-corrected Adam update of every model tensor and the cache table.

    Gradients come from each tensor's ``.grad`` unless ``grads`` is given.
    All gradients are checked before anything is modified.
    """
    named = dict(params.named())
    if cache is not None:
        named[CACHE_PARAM] = cache.table
    if grads is None:
        grads = {k: t.grad for k, t in named.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for '{k}'; step aborted")
    for k, t in named.items():
        adam_update(k, t.data, grads[k], state, config.lr, config.beta1, config.beta2, config.epsilon)


# ---------------------------------------------------------------------------
# sampling and cache handling


def sample_sequence_batch(seq_ids: Sequence, K: int, rng: np.random.Generator) -> list:
    """K ids drawn uniformly, without replacement when possible."""
    M = len(seq_ids)
    if M == 0:
        raise DataError("cannot sample sequences from an empty dataset")
    if M >= K:
        idx = rng.choice(M, size=K, replace=False)
    else:
        idx = rng.choice(M, size=K, replace=True)
    return [seq_ids[i] for i in idx]


def map_estimates(params: FhvaeParams, dataset: SegmentDataset, seq_ids: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """MAP s-vectors and segment counts for ``seq_ids``, encoded in one batched pass."""
    arrays = [dataset.segments(s) for s in seq_ids]
    counts = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    if np.any(counts == 0):
        raise DataError("sequence with zero segments")
    means = z2_means(params, np.concatenate(arrays, axis=0))
    sums = np.add.reduceat(means, np.concatenate([[0], np.cumsum(counts)[:-1]]), axis=0)
    return map_svector(sums, counts[:, None], params.config.sigma_sq_z2), counts


def reset_cache(params: FhvaeParams, cache: SVectorCache | None, dataset: SegmentDataset, sequences: Sequence,
                state: OptimizerState | None = None) -> SVectorCache:
    """Overwrite every slot with the MAP estimate of its newly assigned sequence.

    Reuses the cache's storage when K matches; cache moments are discarded.
    """
    values, counts = map_estimates(params, dataset, sequences)
    if cache is not None and cache.K == len(sequences):
        cache.table.data[...] = values
        cache.table.zero_grad()
        cache.slot_to_seq = list(sequences)
        cache.seg_counts = counts
        cache.seq_to_slot = {s: k for k, s in enumerate(cache.slot_to_seq)}
        if len(cache.seq_to_slot) != cache.K:
            raise ValueError("slot_to_seq must be injective")
    else:
        cache = SVectorCache.from_values(values, sequences, counts)
    if state is not None:
        state.reset(CACHE_PARAM)
    return cache


class SegmentSampler:
    """Cycles through a pool of segments in reshuffled passes (no replacement within a pass)."""

    def __init__(self, pool_size: int, rng: np.random.Generator):
        self.pool_size = pool_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.intp)
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = []
        need = n
        while need > 0:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.pool_size)
                self._pos = 0
            chunk = self._order[self._pos:self._pos + need]
            self._pos += len(chunk)
            need -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)


@dataclass
class SegmentPool:
    frames: np.ndarray  # (P, T, d_x)
    seq_ids: list
    indices: np.ndarray

    @classmethod
    def build(cls, dataset: SegmentDataset, seq_ids: Sequence) -> "SegmentPool":
        # enumerate in dataset order so the draw does not depend on slot order
        order = _dataset_order(dataset, seq_ids)
        arrays, ids, idx = [], [], []
        for s in order:
            a = dataset.segments(s)
            arrays.append(a)
            ids.extend([s] * a.shape[0])
            idx.append(np.arange(a.shape[0]))
        return cls(np.concatenate(arrays), ids, np.concatenate(idx))

    def batch(self, rows: np.ndarray) -> SegmentBatch:
        return SegmentBatch(self.frames[rows], [self.seq_ids[i] for i in rows], self.indices[rows])


def _dataset_order(dataset: SegmentDataset, seq_ids: Sequence) -> list:
    pos = {s: i for i, s in enumerate(dataset.seq_ids)}
    return sorted(seq_ids, key=pos.__getitem__)


# ---------------------------------------------------------------------------
# validation


def validation_bound(params: FhvaeParams, dataset: SegmentDataset, seed: int, chunk: int = 256) -> float:
    """Mean segment bound (no discriminative term) over held-out segments, MAP s-vector per sequence.

    Noise comes from a fresh ``eval`` stream, so repeated calls are comparable.
    """
    rng = stream(seed, "eval")
    mu2, counts = map_estimates(params, dataset, dataset.seq_ids)
    frames = np.concatenate([dataset.segments(s) for s in dataset.seq_ids])
    rows = np.repeat(np.arange(len(dataset.seq_ids)), counts)
    total = 0.0
    with tn.no_grad():
        for lo in range(0, len(frames), chunk):
            sel = rows[lo:lo + chunk]
            eps2, eps1 = draw_noise(rng, len(sel), params.config)
            terms = segment_lower_bound(params, frames[lo:lo + chunk], mu2[sel], counts[sel], eps2, eps1)
            total += float(terms.bound.data.sum())
    return total / len(frames)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: FhvaeParams
    log: list  # LossBreakdown rows (dicts)
    val_history: list  # (step, bound)
    best_step: int
    best_val: float
    steps: int
    peak_cache_bytes: int
    cache: SVectorCache
    stopped_early: bool = False


StepHook = Callable[[int, SegmentBatch, SVectorCache], None]


def _resolve_params(dataset: SegmentDataset, config: TrainConfig, params, model_config) -> FhvaeParams:
    if params is not None:
        return params
    mc = model_config or ModelConfig(frame_dim=dataset.frame_dim, seg_len=dataset.seg_len)
    if mc.frame_dim != dataset.frame_dim or mc.seg_len != dataset.seg_len:
        raise DataError(f"model expects ({mc.seg_len}, {mc.frame_dim}) segments, "
                        f"data has ({dataset.seg_len}, {dataset.frame_dim})")
    return init_params(mc, stream(config.seed, "init"))


def _run(dataset: SegmentDataset, config: TrainConfig, params: FhvaeParams, valid: SegmentDataset | None,
         flat: bool, on_step: StepHook | None, timing: bool) -> TrainResult:
    if len(dataset) == 0:
        raise DataError("training set has no usable sequences")
    early = config.patience_steps > 0
    if early and (valid is None or len(valid) == 0):
        raise DataError("validation set empty while early stopping is enabled")

    seq_rng = stream(config.seed, "sequence")
    seg_rng = stream(config.seed, "segment")
    noise_rng = stream(config.seed, "noise")
    state = OptimizerState()
    K = len(dataset) if flat else min(config.K, len(dataset))
    if not flat and K < config.K:
        log.warning("K=%d exceeds the %d training sequences; using K=%d", config.K, len(dataset), K)

    rows, val_history = [], []
    best_val, best_step, best_params = -math.inf, 0, None
    cache, pool, sampler = None, None, None
    peak = 0
    since_reset = 0
    stopped = False

    def evaluate(step):
        nonlocal best_val, best_step, best_params
        v = validation_bound(params, valid, config.seed)
        val_history.append((step, v))
        if v > best_val:
            best_val, best_step, best_params = v, step, params.copy()
        log.info("step %d validation bound %.4f (best %.4f @ %d)", step, v, best_val, best_step)

    if valid is not None and len(valid):
        evaluate(0)

    step = 0
    while step < config.max_steps:
        if cache is None or (not flat and since_reset >= config.B_seg):
            seqs = list(dataset.seq_ids) if flat else sample_sequence_batch(dataset.seq_ids, K, seq_rng)
            cache = reset_cache(params, cache, dataset, seqs, state)
            pool = SegmentPool.build(dataset, seqs)
            sampler = SegmentSampler(len(pool.seq_ids), seg_rng)
            since_reset = 0
            peak = max(peak, cache.nbytes)

        batch = pool.batch(sampler.take(config.bs))
        if on_step is not None:
            on_step(step, batch, cache)
        t0 = time.perf_counter() if timing else None
        params.zero_grad()
        cache.table.zero_grad()
        br = total_loss(params, cache, batch, config.alpha, noise_rng)
        br.loss.backward()
        adam_step(params, cache, state, config)
        wall = (time.perf_counter() - t0) * 1000.0 if timing else None
        step += 1
        since_reset += 1
        rows.append(br.row(step, wall))

        if valid is not None and len(valid) and step % config.eval_every == 0:
            evaluate(step)
            if early and step - best_step >= config.patience_steps:
                stopped = True
                break

    final = best_params if best_params is not None else params
    return TrainResult(final, rows, val_history, best_step, best_val, step, peak, cache, stopped)


def train_hierarchical(dataset: SegmentDataset, config: TrainConfig, valid: SegmentDataset | None = None,
                       params: FhvaeParams | None = None, model_config: ModelConfig | None = None,
                       on_step: StepHook | None = None, timing: bool = False) -> TrainResult:
    """Sample K sequences, MAP-reset a K-entry cache, run B_seg segment-batch steps; repeat."""
    params = _resolve_params(dataset, config, params, model_config)
    return _run(dataset, config, params, valid, False, on_step, timing)


def train_flat(dataset: SegmentDataset, config: TrainConfig, valid: SegmentDataset | None = None,
               params: FhvaeParams | None = None, model_config: ModelConfig | None = None,
               on_step: StepHook | None = None, timing: bool = False) -> TrainResult:
    """Original scheme: one cache entry per training sequence, segments drawn from the global pool."""
    params = _resolve_params(dataset, config, params, model_config)
    return _run(dataset, config, params, valid, True, on_step, timing)
