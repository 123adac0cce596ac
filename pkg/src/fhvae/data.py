"""Feature extraction, segmentation, dataset manifests and synthetic data."""

from __future__ import annotations

import csv
import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Segment

FBNK_MAGIC = b"FBNK"


class DataError(Exception):
    """Raised for missing, malformed or unusable input data."""


@dataclass
class SequenceRecord:
    seq_id: str
    features: np.ndarray  # (frames, d_x)
    labels: dict = field(default_factory=dict)  # sequence-level labels
    segment_labels: dict = field(default_factory=dict)  # name -> per-segment array

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# log-Mel filter bank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_filters: int, rate: int) -> np.ndarray:
    """n_filters + 2 edge frequencies (Hz), equally spaced on the Mel scale from 0 to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(rate / 2.0), n_filters + 2))


def triangle_response(freqs, edges: np.ndarray) -> np.ndarray:
    """Weights of every triangular filter at arbitrary frequencies, (n_filters, len(freqs))."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_filterbank(n_filters: int, n_fft: int, rate: int) -> np.ndarray:
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    return triangle_response(bins, mel_edges(n_filters, rate))


def fbank(samples, rate: int, n_filters: int = 80, win_ms: float = 25.0, hop_ms: float = 10.0,
          floor: float = 1e-10) -> np.ndarray:
    """Log Mel filter-bank energies, shape (frames, n_filters).

    ``samples`` are 16-bit PCM values (int16 array or equivalent integers).
    """
    x = np.asarray(samples)
    if x.ndim != 1:
        raise DataError("fbank expects mono audio")
    if x.dtype.kind == "f":
        raise DataError("fbank expects 16-bit PCM samples, got floating-point audio")
    if x.size and (x.min() < -32768 or x.max() > 32767):
        raise DataError("samples out of 16-bit range")
    win = int(round(rate * win_ms / 1000.0))
    hop = int(round(rate * hop_ms / 1000.0))
    if x.size < win:
        raise DataError(f"audio shorter than one {win_ms} ms window")
    n_frames = (x.size - win) // hop + 1
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x.astype(np.float64)[idx] * np.hanning(win + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_filters, n_fft, rate).T
    return np.log(np.maximum(energies, floor))


def read_wav(path) -> tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise DataError(f"{path}: only 16-bit PCM mono WAV is supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        raise DataError(f"{path}: {e}") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    if samples.size == 0:
        raise DataError(f"{path}: empty audio")
    return samples, rate


def write_wav(path, samples, rate: int) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def wav_fbank(path, expected_rate: int = 16000, **kw) -> np.ndarray:
    samples, rate = read_wav(path)
    if rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} != configured {expected_rate} (no resampling)")
    return fbank(samples, rate, **kw)


# ---------------------------------------------------------------------------
# feature files


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise DataError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FBNK_MAGIC + struct.pack("<II", *feats.shape))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from None
    if buf[:4] != FBNK_MAGIC:
        raise DataError(f"{path}: not an FBNK feature file")
    n, d = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * n * d:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype="<f4", offset=12).astype(np.float64).reshape(n, d)


# ---------------------------------------------------------------------------
# segmentation


def segment_sequence(seq: SequenceRecord, T: int, shift: int) -> list[Segment]:
    if T < 1 or shift < 1:
        raise ValueError("segment length and shift must be >= 1")
    n = 0 if seq.n_frames < T else (seq.n_frames - T) // shift + 1
    return [Segment(seq.features[i * shift:i * shift + T], seq.seq_id, i) for i in range(n)]


class SegmentDataset:
    """Sequences cut into fixed-length segments, addressed by sequence id.

    ``audit`` (a list) records every sequence id whose segments are read.
    """

    def __init__(self, records: Sequence[SequenceRecord], seg_len: int, shift: int | None = None):
        self.seg_len = seg_len
        self.shift = shift or seg_len
        self.records = {}
        self._segments = {}
        self.seq_ids = []
        self.audit: list | None = None
        for rec in records:
            segs = segment_sequence(rec, seg_len, self.shift)
            if not segs:
                continue
            self.records[rec.seq_id] = rec
            self._segments[rec.seq_id] = np.stack([s.frames for s in segs])
            self.seq_ids.append(rec.seq_id)

    def __len__(self) -> int:
        return len(self.seq_ids)

    @property
    def frame_dim(self) -> int:
        return next(iter(self._segments.values())).shape[2]

    def n_segments(self, seq_id) -> int:
        return self._segments[seq_id].shape[0]

    def segments(self, seq_id) -> np.ndarray:
        if self.audit is not None:
            self.audit.append(seq_id)
        return self._segments[seq_id]

    def segment_list(self, seq_id) -> list[Segment]:
        arr = self.segments(seq_id)
        return [Segment(arr[i], seq_id, i) for i in range(arr.shape[0])]

    def label(self, seq_id, key: str):
        return self.records[seq_id].labels[key]

    def segment_label(self, seq_id, key: str) -> np.ndarray:
        return np.asarray(self.records[seq_id].segment_labels[key])[: self.n_segments(seq_id)]

    def subset(self, seq_ids: Iterable) -> "SegmentDataset":
        return SegmentDataset([self.records[s] for s in seq_ids], self.seg_len, self.shift)


# ---------------------------------------------------------------------------
# manifests


def save_manifest(records: Sequence[SequenceRecord], out_dir, feature_dir: str = "features") -> Path:
    """Write FBNK files, manifest.csv (sequence level) and labels.csv (segment level)."""
    out = Path(out_dir)
    (out / feature_dir).mkdir(parents=True, exist_ok=True)
    seq_keys = sorted({k for r in records for k in r.labels})
    seg_keys = sorted({k for r in records for k in r.segment_labels})
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "feature_path", "n_frames", *seq_keys])
        for r in records:
            rel = f"{feature_dir}/{r.seq_id}.fbnk"
            write_features(out / rel, r.features)
            w.writerow([r.seq_id, rel, r.n_frames, *[r.labels.get(k, "") for k in seq_keys]])
    if seg_keys:
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seq_id", "index", *seg_keys])
            for r in records:
                n = min(len(r.segment_labels[k]) for k in seg_keys)
                for i in range(n):
                    w.writerow([r.seq_id, i, *[r.segment_labels[k][i] for k in seg_keys]])
    return out / "manifest.csv"


def _parse_label(v: str):
    try:
        return int(v)
    except ValueError:
        return v


def load_manifest(path) -> list[SequenceRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"seq_id", "feature_path", "n_frames"} <= set(reader.fieldnames):
            raise DataError(f"{path}: manifest must have seq_id, feature_path, n_frames columns")
        for row in reader:
            feats = read_features(base / row["feature_path"])
            if feats.shape[0] != int(row["n_frames"]):
                raise DataError(f"{row['seq_id']}: manifest says {row['n_frames']} frames, file has {feats.shape[0]}")
            labels = {k: _parse_label(v) for k, v in row.items()
                      if k not in ("seq_id", "feature_path", "n_frames") and v != ""}
            records.append(SequenceRecord(row["seq_id"], feats, labels))
    lab_path = base / "labels.csv"
    if lab_path.exists():
        by_id = {r.seq_id: r for r in records}
        seg = {}
        with open(lab_path, newline="") as fh:
            reader = csv.DictReader(fh)
            keys = [k for k in reader.fieldnames if k not in ("seq_id", "index")]
            for row in reader:
                seg.setdefault(row["seq_id"], []).append(row)
        for sid, rows in seg.items():
            if sid in by_id:
                rows.sort(key=lambda r: int(r["index"]))
                by_id[sid].segment_labels = {k: np.array([_parse_label(r[k]) for r in rows]) for k in keys}
    return records


def split_records(records: Sequence[SequenceRecord], key: str = "split") -> dict[str, list[SequenceRecord]]:
    out: dict[str, list] = {}
    for r in records:
        out.setdefault(str(r.labels.get(key, "train")), []).append(r)
    return out


def feature_stats(records: Sequence[SequenceRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation over every frame (std floored at 1e-8)."""
    if not records:
        raise DataError("no records to compute feature statistics from")
    x = np.concatenate([r.features for r in records])
    return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8)


def standardize(records: Sequence[SequenceRecord], mean, std) -> list[SequenceRecord]:
    mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    return [SequenceRecord(r.seq_id, (r.features - mean) / std, dict(r.labels), dict(r.segment_labels))
            for r in records]


# ---------------------------------------------------------------------------
# synthetic hierarchical data


@dataclass(frozen=True)
class SynthSpec:
    M: int = 60
    segs_per_seq: int = 25
    z1_dim: int = 4
    z2_dim: int = 4
    frame_dim: int = 8
    seg_len: int = 20
    n_factors: int = 4
    n_classes: int = 4
    noise: float = 0.1
    anchor_scale: float = 3.0
    mu2_std: float = 0.1
    sigma_sq_z2: float = 0.25
    n_valid: int = 0
    n_test: int = 0
    seed: int = 0
    identity_map: bool = False

    def __post_init__(self):
        if self.n_factors > self.M:
            raise ValueError("n_factors must not exceed M")


@dataclass
class SynthData:
    records: list
    factor_anchors: np.ndarray  # (F, z2_dim)
    class_anchors: np.ndarray  # (C, z1_dim)
    mixing: np.ndarray  # (z1_dim + z2_dim, frame_dim)
    mu2: dict  # seq_id -> s-vector

    def split(self, name: str) -> list[SequenceRecord]:
        return [r for r in self.records if r.labels["split"] == name]


def synth_generate(spec: SynthSpec) -> SynthData:
    """Sample sequences from the two-level generative model.

    Per sequence: mu2 = factor anchor + N(0, mu2_std^2 I). Per segment:
    z2 ~ N(mu2, sigma_sq_z2 I), z1 = class anchor + N(0, I)/2, and every frame
    is [z1 || z2] @ mixing + noise. Factors and classes cycle so every value
    appears in each split.
    """
    rng = np.random.default_rng(spec.seed)
    F, C = spec.n_factors, spec.n_classes
    factor_anchors = _spread_anchors(rng, F, spec.z2_dim, spec.anchor_scale)
    class_anchors = _spread_anchors(rng, C, spec.z1_dim, spec.anchor_scale)
    d_lat = spec.z1_dim + spec.z2_dim
    if spec.identity_map:
        mixing = np.eye(d_lat, spec.frame_dim)
    else:
        mixing = rng.standard_normal((d_lat, spec.frame_dim)) / np.sqrt(d_lat)
    records, mu2s = [], {}
    total = spec.M + spec.n_valid + spec.n_test
    for i in range(total):
        split = "train" if i < spec.M else ("valid" if i < spec.M + spec.n_valid else "test")
        sid = f"s{i:05d}"
        factor = i % F
        mu2 = factor_anchors[factor] + spec.mu2_std * rng.standard_normal(spec.z2_dim)
        n = spec.segs_per_seq
        classes = rng.integers(0, C, size=n)
        z2 = mu2 + np.sqrt(spec.sigma_sq_z2) * rng.standard_normal((n, spec.z2_dim))
        z1 = class_anchors[classes] + 0.5 * rng.standard_normal((n, spec.z1_dim))
        lat = np.concatenate([z1, z2], axis=1) @ mixing  # (n, d_x)
        frames = np.repeat(lat[:, None, :], spec.seg_len, axis=1)
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
        feats = frames.reshape(n * spec.seg_len, spec.frame_dim).astype(np.float32).astype(np.float64)
        records.append(SequenceRecord(sid, feats, {"factor": int(factor), "split": split},
                                      {"seg_class": classes.astype(np.int64)}))
        mu2s[sid] = mu2
    return SynthData(records, factor_anchors, class_anchors, mixing, mu2s)


def _spread_anchors(rng: np.random.Generator, n: int, dim: int, scale: float) -> np.ndarray:
    """``n`` anchors of norm ``scale``; the best-separated of a few random draws."""
    best, best_gap = None, -1.0
    for _ in range(64):
        a = rng.standard_normal((n, dim))
        a *= scale / np.linalg.norm(a, axis=1, keepdims=True)
        gap = np.inf if n == 1 else min(np.linalg.norm(a[i] - a[j]) for i in range(n) for j in range(i + 1, n))
        if gap > best_gap:
            best, best_gap = a, gap
    return best


def save_truth(data: SynthData, out_dir) -> Path:
    path = Path(out_dir) / "truth.json"
    payload = {
        "factor_anchors": data.factor_anchors.tolist(),
        "class_anchors": data.class_anchors.tolist(),
        "mixing": data.mixing.tolist(),
        "mu2": {s: data.mu2[s].tolist() for s in sorted(data.mu2)},
    }
    path.write_text(json.dumps(payload, sort_keys=True))
    return path


def load_truth(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "truth.json"
    raw = json.loads(path.read_text())
    return {"factor_anchors": np.array(raw["factor_anchors"]), "class_anchors": np.array(raw["class_anchors"]),
            "mixing": np.array(raw["mixing"]), "mu2": {k: np.array(v) for k, v in raw["mu2"].items()}}
