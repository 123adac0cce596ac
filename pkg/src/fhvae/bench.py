"""Wall-time of one optimization step as a function of the cache size K."""

from __future__ import annotations

import csv
import gc
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import SegmentDataset, SynthSpec, synth_generate
from .model import ModelConfig, init_params
from .objective import SegmentBatch, total_loss
from .trainer import OptimizerState, SegmentPool, TrainConfig, adam_step, reset_cache, stream

BENCH_COLUMNS = ("K", "median_ms", "p10_ms", "p90_ms", "alpha_zero_median_ms")


@dataclass
class BenchRow:
    K: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    alpha_zero_median_ms: float
    samples: np.ndarray
    alpha_zero_samples: np.ndarray

    def as_list(self) -> list:
        return [self.K, f"{self.median_ms:.3f}", f"{self.p10_ms:.3f}", f"{self.p90_ms:.3f}",
                f"{self.alpha_zero_median_ms:.3f}"]


def _time_steps(params, cache, batches: list, alpha: float, config: TrainConfig, warmup: int,
                rng: np.random.Generator) -> np.ndarray:
    state = OptimizerState()
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()  # collector pauses otherwise land on whichever step allocates past the threshold
    try:
        lead = [batches[i % len(batches)] for i in range(warmup)]
        out = _timed_loop(params, cache, lead + batches, alpha, config, warmup, rng, state)
    finally:
        if was_enabled:
            gc.enable()
    return np.array(out)


def _timed_loop(params, cache, batches: list, alpha: float, config: TrainConfig, warmup: int,
                rng: np.random.Generator, state: OptimizerState) -> list:
    out = []
    for i, batch in enumerate(batches):
        t0 = time.perf_counter()
        params.zero_grad()
        cache.table.zero_grad()
        br = total_loss(params, cache, batch, alpha, rng)
        br.loss.backward()
        adam_step(params, cache, state, config)
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            out.append(dt)
    return out


def bench_step_time(K_list: Sequence[int], model_config: ModelConfig | None = None, bs: int = 64, reps: int = 20,
                    warmup: int = 3, alpha: float = 10.0, seed: int = 0, segs_per_seq: int = 2,
                    blocks: int = 4) -> list:
    """Median full-step time (loss + backward + Adam) for each K, with and without the discriminative term.

    Each K gets a synthetic set of exactly K sequences and a MAP-reset cache
    over all of them. Timing runs in ``blocks`` rounds; every round visits
    every K in a shuffled order and times alpha then alpha=0, so slow drifts of the machine are
    spread over the whole grid instead of landing on one K.
    """
    mc = model_config or ModelConfig()
    config = TrainConfig(K=max(K_list), bs=bs, alpha=alpha, seed=seed)
    setups = []
    for K in K_list:
        data = synth_generate(SynthSpec(M=K, segs_per_seq=segs_per_seq, frame_dim=mc.frame_dim,
                                        seg_len=mc.seg_len, seed=seed))
        ds = SegmentDataset(data.records, mc.seg_len)
        params = init_params(mc, stream(seed, "init"))
        cache = reset_cache(params, None, ds, ds.seq_ids)
        pool = SegmentPool.build(ds, ds.seq_ids)
        pick = stream(seed, "segment")
        batches = [pool.batch(pick.integers(0, len(pool.seq_ids), size=bs)) for _ in range(reps)]
        setups.append((params, cache, batches, stream(seed, "noise"), [], []))
    size = -(-reps // max(1, blocks))
    order = stream(seed, "eval")
    for lo in range(0, reps, size):
        for j in order.permutation(len(setups)):
            params, cache, batches, rng, full, ablate = setups[j]
            part = batches[lo:lo + size]
            full.append(_time_steps(params, cache, part, alpha, config, warmup, rng))
            ablate.append(_time_steps(params, cache, part, 0.0, config, warmup, rng))
    rows = []
    for K, (*_, full, ablate) in zip(K_list, setups):
        full, ablate = np.concatenate(full), np.concatenate(ablate)
        p10, med, p90 = np.percentile(full, [10, 50, 90])
        rows.append(BenchRow(K, float(med), float(p10), float(p90), float(np.median(ablate)), full, ablate))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
