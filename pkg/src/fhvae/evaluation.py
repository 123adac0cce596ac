"""Verification EER, latent dumps, recombination and the denominator-scaling experiment."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import SegmentDataset
from .gaussian import reparam_sample
from .model import FhvaeParams, as_batch, decode_x, encode_z1, encode_z2, map_svector, z2_means


@dataclass
class TrialSet:
    scores: np.ndarray
    same: np.ndarray  # bool
    pairs: list  # (id_a, id_b)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.same = np.asarray(self.same, dtype=bool)
        if self.scores.shape != self.same.shape:
            raise ValueError("scores and labels differ in length")
        if not self.same.any() or self.same.all():
            raise ValueError("trial set needs at least one positive and one negative trial")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq_a", "seq_b", "same", "score"])
            for (a, b), s, y in zip(self.pairs, self.scores, self.same):
                w.writerow([a, b, int(y), repr(float(s))])


def eer(trials: TrialSet) -> float:
    """Equal error rate from a threshold sweep over the sorted scores.

    A trial is accepted when score >= threshold. False-reject rate rises and
    false-accept rate falls with the threshold; between the two sweep points
    where they cross, the rate is linearly interpolated.
    """
    if not np.all(np.isfinite(trials.scores)):
        raise ValueError("scores must be finite")
    pos = np.sort(trials.scores[trials.same])
    neg = np.sort(trials.scores[~trials.same])
    thresholds = np.append(np.unique(trials.scores), np.inf)
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    far = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    diff = frr - far
    i = int(np.argmax(diff >= 0))  # last point always has frr=1, far=0
    if i == 0:
        return float((frr[0] + far[0]) / 2)
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return float(frr[i - 1] + w * (frr[i] - frr[i - 1]))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def svectors(params: FhvaeParams, dataset: SegmentDataset) -> dict:
    """MAP s-vector for every sequence in ``dataset``."""
    out = {}
    for sid in dataset.seq_ids:
        frames = dataset.segments(sid)
        means = z2_means(params, frames)
        out[sid] = map_svector(means.sum(axis=0), len(frames), params.config.sigma_sq_z2)
    return out


def score_trials(params: FhvaeParams, dataset: SegmentDataset, label: str = "factor", max_trials: int = 0,
                 seed: int = 0) -> TrialSet:
    """Cosine-score all cross-sequence pairs; same-source means equal ``label``.

    ``max_trials`` > 0 keeps a seeded random subset of the pairs.
    """
    if len(dataset) < 2:
        raise ValueError("need at least two sequences to form trials")
    vecs = svectors(params, dataset)
    pairs = list(itertools.combinations(dataset.seq_ids, 2))
    if max_trials and len(pairs) > max_trials:
        keep = np.sort(np.random.default_rng(seed).choice(len(pairs), max_trials, replace=False))
        pairs = [pairs[i] for i in keep]
    scores = [cosine(vecs[a], vecs[b]) for a, b in pairs]
    same = [dataset.label(a, label) == dataset.label(b, label) for a, b in pairs]
    return TrialSet(np.array(scores), np.array(same), pairs)


# ---------------------------------------------------------------------------
# latent dumps and simple probes


@dataclass
class EmbeddingDump:
    seq_ids: list
    indices: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    labels: dict  # name -> per-row array

    def __len__(self) -> int:
        return len(self.seq_ids)

    def write_csv(self, path) -> None:
        names = sorted(self.labels)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq_id", "index"] + [f"z1_{i}" for i in range(self.z1.shape[1])]
                       + [f"z2_{i}" for i in range(self.z2.shape[1])] + names)
            for r in range(len(self)):
                w.writerow([self.seq_ids[r], int(self.indices[r]), *map(repr, self.z1[r].tolist()),
                            *map(repr, self.z2[r].tolist()), *[self.labels[n][r] for n in names]])


def posterior_means(params: FhvaeParams, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z1 and z2 posterior means; the z1 encoder is conditioned on the z2 mean."""
    with tn.no_grad():
        q2 = encode_z2(params, frames)
        q1 = encode_z1(params, frames, q2.mean)
    return q1.mean.data, q2.mean.data


def dump_embeddings(params: FhvaeParams, dataset: SegmentDataset, seq_labels: Sequence[str] = ("factor",),
                    segment_labels: Sequence[str] = ()) -> EmbeddingDump:
    ids, idx, z1s, z2s = [], [], [], []
    labels = {k: [] for k in (*seq_labels, *segment_labels)}
    for sid in dataset.seq_ids:
        frames = dataset.segments(sid)
        z1, z2 = posterior_means(params, frames)
        n = len(frames)
        ids.extend([sid] * n)
        idx.append(np.arange(n))
        z1s.append(z1)
        z2s.append(z2)
        for k in seq_labels:
            labels[k].extend([dataset.label(sid, k)] * n)
        for k in segment_labels:
            labels[k].extend(dataset.segment_label(sid, k).tolist())
    return EmbeddingDump(ids, np.concatenate(idx), np.concatenate(z1s), np.concatenate(z2s),
                         {k: np.array(v) for k, v in labels.items()})


def class_centroids(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes = np.unique(y)
    return classes, np.stack([x[y == c].mean(axis=0) for c in classes])


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Fit class means on the training rows and classify test rows by the nearest one."""
    classes, cents = class_centroids(np.asarray(train_x), np.asarray(train_y))
    d = ((np.asarray(test_x)[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(axis=1)] == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# recombination


def recombine(params: FhvaeParams, xA, xB, rng: np.random.Generator) -> np.ndarray:
    """Decoder mean frames for z1 sampled from xA and z2 sampled from xB.

    Accepts single segments (returns (T, d_x)) or equal-size batches.
    """
    c = params.config
    single = np.ndim(getattr(xA, "frames", xA)) == 2
    a = as_batch(xA, c)
    b = as_batch(xB, c)
    if a.shape != b.shape:
        raise ValueError(f"recombine: batch shapes differ {a.shape} vs {b.shape}")
    n = a.shape[0]
    with tn.no_grad():
        qa2 = encode_z2(params, a)
        za2 = reparam_sample(qa2, rng.standard_normal((n, c.z2_dim)))
        za1 = reparam_sample(encode_z1(params, a, za2), rng.standard_normal((n, c.z1_dim)))
        zb2 = reparam_sample(encode_z2(params, b), rng.standard_normal((n, c.z2_dim)))
        frames = decode_x(params, za1, zb2).mean.data
    return frames[0] if single else frames


@dataclass
class LinearProbe:
    """Least-squares affine map from model latents to ground-truth coordinates."""

    W: np.ndarray
    b: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray) -> "LinearProbe":
        X = np.hstack([x, np.ones((x.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return cls(coef[:-1], coef[-1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.W + self.b


def svector_probe(params: FhvaeParams, dataset: SegmentDataset, truth_mu2: dict) -> LinearProbe:
    """Fit segment z2 means onto the true s-vector of their sequence."""
    xs, ys = [], []
    for sid in dataset.seq_ids:
        m = z2_means(params, dataset.segments(sid))
        xs.append(m)
        ys.append(np.repeat(np.asarray(truth_mu2[sid])[None], len(m), axis=0))
    return LinearProbe.fit(np.concatenate(xs), np.concatenate(ys))


@dataclass
class Recombination:
    pairs: list  # (seq_a, index_a, seq_b, index_b)
    frames: np.ndarray  # (P, T, d_x) decoder means
    dist_a: np.ndarray | None = None  # re-encoded z2, mapped to truth space, to mu2 of A
    dist_b: np.ndarray | None = None

    @property
    def fraction_nearer_b(self) -> float:
        return float(np.mean(self.dist_b < self.dist_a))


def draw_pairs(dataset: SegmentDataset, n_pairs: int, rng: np.random.Generator, label: str | None = None) -> list:
    """Random (seq_a, index_a, seq_b, index_b) with distinct sequences (and distinct ``label`` if given)."""
    ids = dataset.seq_ids
    if label is not None and len({dataset.label(s, label) for s in ids}) < 2:
        raise ValueError(f"need two distinct values of {label!r} to draw pairs")
    pairs = []
    while len(pairs) < n_pairs:
        a, b = rng.choice(len(ids), size=2, replace=False)
        sa, sb = ids[a], ids[b]
        if label is not None and dataset.label(sa, label) == dataset.label(sb, label):
            continue
        pairs.append((sa, int(rng.integers(dataset.n_segments(sa))), sb, int(rng.integers(dataset.n_segments(sb)))))
    return pairs


def recombine_pairs(params: FhvaeParams, dataset: SegmentDataset, pairs: list, rng: np.random.Generator,
                    truth_mu2: dict | None = None, probe: LinearProbe | None = None) -> Recombination:
    """Recombine every pair; with ground truth, also score factor transfer.

    The recombined segment is re-encoded, its z2 mean mapped into the
    generator's s-vector space by a linear probe and compared with the true
    s-vectors of both sources.
    """
    xa = np.stack([dataset.segments(sa)[ia] for sa, ia, _, _ in pairs])
    xb = np.stack([dataset.segments(sb)[ib] for _, _, sb, ib in pairs])
    frames = recombine(params, xa, xb, rng)
    out = Recombination(list(pairs), frames)
    if truth_mu2 is not None:
        probe = probe or svector_probe(params, dataset, truth_mu2)
        z = probe(z2_means(params, frames))
        out.dist_a = np.linalg.norm(z - np.stack([truth_mu2[p[0]] for p in pairs]), axis=1)
        out.dist_b = np.linalg.norm(z - np.stack([truth_mu2[p[2]] for p in pairs]), axis=1)
    return out


# ---------------------------------------------------------------------------
# denominator scaling


@dataclass
class DenominatorScaling:
    M_list: list
    means: np.ndarray  # mean log-denominator per M
    samples: np.ndarray  # (len(M_list), draws)
    var: float

    @property
    def slope(self) -> float:
        return float(np.polyfit(np.log(self.M_list), self.means, 1)[0])

    def histograms(self, bins: int = 40) -> tuple[np.ndarray, np.ndarray]:
        edges = np.linspace(self.samples.min(), self.samples.max(), bins + 1)
        counts = np.stack([np.histogram(s, edges)[0] for s in self.samples])
        return edges, counts

    def write_csv(self, means_path, hist_path, bins: int = 40) -> None:
        with open(means_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["M", "mean_log_denominator"])
            for M, m in zip(self.M_list, self.means):
                w.writerow([M, repr(float(m))])
        edges, counts = self.histograms(bins)
        with open(hist_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", *[f"M={M}" for M in self.M_list]])
            for b in range(bins):
                w.writerow([repr(float(edges[b])), repr(float(edges[b + 1])), *counts[:, b].tolist()])


def log_denominators(z: np.ndarray, mu: np.ndarray, var: float, chunk: int = 2000) -> np.ndarray:
    """log sum_j N(z_i; mu_j, var I) for every row of ``z``."""
    d = z.shape[1]
    zz = (z ** 2).sum(1)[:, None]
    const = -0.5 * d * np.log(2 * np.pi * var)
    out = np.full(z.shape[0], -np.inf)
    for lo in range(0, mu.shape[0], chunk):
        m = mu[lo:lo + chunk]
        sq = np.maximum(zz - 2.0 * z @ m.T + (m ** 2).sum(1)[None, :], 0.0)
        lp = const - sq / (2.0 * var)
        mx = lp.max(axis=1)
        part = mx + np.log(np.exp(lp - mx[:, None]).sum(axis=1))
        out = np.logaddexp(out, part)
    return out


def denominator_scaling(d: int, M_list: Sequence[int], draws: int = 1000, seed: int = 0,
                        var: float = 2.0) -> DenominatorScaling:
    """Monte-Carlo distribution of the discriminative denominator vs cache size.

    z and every cache entry are iid N(0, I_d); each draw uses a fresh z and a
    fresh set of M entries. ``var`` is the density's variance; the default
    matches the variance of z - mu under this draw.
    """
    M_list = [int(M) for M in M_list]
    if M_list != sorted(M_list):
        raise ValueError("M_list must be ascending")
    rng = np.random.default_rng(seed)
    samples = np.empty((len(M_list), draws))
    for k, M in enumerate(M_list):
        per = max(1, min(draws, 4_000_000 // (M * d)))
        filled = 0
        while filled < draws:
            n = min(per, draws - filled)
            z = rng.standard_normal((n, d))
            mu = rng.standard_normal((n, M, d))
            for i in range(n):
                samples[k, filled + i] = log_denominators(z[i:i + 1], mu[i], var)[0]
            filled += n
    return DenominatorScaling(M_list, samples.mean(axis=1), samples, var)
