"""FHVAE encoders, decoder and s-vector inference.

Three stacked-LSTM pre-networks share one layout:

* ``z2_enc`` reads the segment and feeds the last-step hidden states of all
  layers to ``z2_head``;
* ``z1_enc`` reads the segment with the sampled z2 appended to every frame
  and feeds ``z1_head`` the same way;
* ``dec`` reads [z1 || z2] at every step; its top-layer output goes through
  ``x_head`` frame by frame.

Heads emit mean || log-variance; predicted variances get a small floor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .gaussian import DiagGaussian, PriorConfig
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    frame_dim: int = 8
    seg_len: int = 20
    z1_dim: int = 16
    z2_dim: int = 16
    hidden: int = 64
    layers: int = 1
    sigma_sq_z2: float = 0.25
    var_floor: float = 1e-6

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(frame_dim=80, seg_len=20, z1_dim=32, z2_dim=32, hidden=256, layers=2)

    @property
    def prior(self) -> PriorConfig:
        return PriorConfig(self.sigma_sq_z2)


@dataclass
class Segment:
    frames: np.ndarray  # (T, d_x)
    seq_id: str
    index: int


@dataclass
class FhvaeParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def copy(self) -> "FhvaeParams":
        return FhvaeParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                         for k, v in self.tensors.items()})

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))


def _net_shapes(prefix: str, n_in: int, hidden: int, layers: int) -> dict[str, tuple]:
    shapes = {}
    for layer in range(layers):
        fan_in = n_in if layer == 0 else hidden
        shapes[f"{prefix}.l{layer}.W"] = (fan_in, 4 * hidden)
        shapes[f"{prefix}.l{layer}.U"] = (hidden, 4 * hidden)
        shapes[f"{prefix}.l{layer}.b"] = (4 * hidden,)
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    c = config
    shapes = {}
    shapes.update(_net_shapes("z2_enc", c.frame_dim, c.hidden, c.layers))
    shapes["z2_head.W"] = (c.layers * c.hidden, 2 * c.z2_dim)
    shapes["z2_head.b"] = (2 * c.z2_dim,)
    shapes.update(_net_shapes("z1_enc", c.frame_dim + c.z2_dim, c.hidden, c.layers))
    shapes["z1_head.W"] = (c.layers * c.hidden, 2 * c.z1_dim)
    shapes["z1_head.b"] = (2 * c.z1_dim,)
    shapes.update(_net_shapes("dec", c.z1_dim + c.z2_dim, c.hidden, c.layers))
    shapes["x_head.W"] = (c.hidden, 2 * c.frame_dim)
    shapes["x_head.b"] = (2 * c.frame_dim,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> FhvaeParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gates at 1."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
            if ".l" in name:
                H = shape[0] // 4
                data[H:2 * H] = 1.0
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return FhvaeParams(config, tensors)


def zero_params(config: ModelConfig) -> FhvaeParams:
    return FhvaeParams(config, {name: Tensor(np.zeros(shape), requires_grad=True)
                                for name, shape in param_shapes(config).items()})


# ---------------------------------------------------------------------------
# networks


def as_batch(x, config: ModelConfig) -> Tensor:
    """Accept a Segment, a list of Segments, a (T, d) or (B, T, d) array, or a Tensor."""
    if isinstance(x, Segment):
        x = x.frames[None]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], Segment):
        x = np.stack([s.frames for s in x])
    t = tn.as_tensor(x)
    if t.ndim == 2:
        t = tn.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[1:] != (config.seg_len, config.frame_dim):
        raise DimensionError(
            f"segment batch must be (B, {config.seg_len}, {config.frame_dim}), got {t.shape}")
    return t


def run_stack(params: FhvaeParams, prefix: str, x: Tensor) -> list[Tensor]:
    """Stacked LSTM; returns every layer's (B, T, H) output."""
    outs = []
    h = x
    for layer in range(params.config.layers):
        p = f"{prefix}.l{layer}"
        h = tn.lstm(h, params[f"{p}.W"], params[f"{p}.U"], params[f"{p}.b"])
        outs.append(h)
    return outs


def _last_step(outs: list[Tensor]) -> Tensor:
    T = outs[0].shape[1]
    finals = [tn.select(h, 1, T - 1) for h in outs]
    return finals[0] if len(finals) == 1 else tn.concat(finals, axis=1)


def _affine_gaussian(params: FhvaeParams, head: str, h: Tensor, dim: int) -> DiagGaussian:
    out = tn.add(tn.matmul(h, params[f"{head}.W"]), params[f"{head}.b"])
    mean = tn.slice(out, 1, 0, dim)
    logvar = tn.slice(out, 1, dim, 2 * dim)
    return DiagGaussian.from_logvar(mean, logvar, params.config.var_floor)


def encode_z2(params: FhvaeParams, x) -> DiagGaussian:
    c = params.config
    x = as_batch(x, c)
    return _affine_gaussian(params, "z2_head", _last_step(run_stack(params, "z2_enc", x)), c.z2_dim)


def encode_z1(params: FhvaeParams, x, z2_sample) -> DiagGaussian:
    c = params.config
    x = as_batch(x, c)
    z2 = tn.as_tensor(z2_sample)
    if z2.ndim == 1:
        z2 = tn.reshape(z2, (1, -1))
    if z2.shape != (x.shape[0], c.z2_dim):
        raise DimensionError(f"encode_z1: z2 sample shape {z2.shape} does not match batch {x.shape[0]}x{c.z2_dim}")
    if not np.all(np.isfinite(z2.data)):
        raise tn.NonFiniteError("encode_z1: z2 sample is not finite")
    inp = tn.concat([x, tn.repeat(z2, c.seg_len, axis=1)], axis=2)
    return _affine_gaussian(params, "z1_head", _last_step(run_stack(params, "z1_enc", inp)), c.z1_dim)


def decode_x(params: FhvaeParams, z1, z2) -> DiagGaussian:
    """Per-frame p(x_t | z1, z2) as one (B, T, d_x) distribution; ``per_frame()`` splits it."""
    c = params.config
    z1, z2 = tn.as_tensor(z1), tn.as_tensor(z2)
    if z1.ndim == 1:
        z1 = tn.reshape(z1, (1, -1))
    if z2.ndim == 1:
        z2 = tn.reshape(z2, (1, -1))
    if z1.shape[1] != c.z1_dim or z2.shape[1] != c.z2_dim or z1.shape[0] != z2.shape[0]:
        raise DimensionError(f"decode_x: latent shapes {z1.shape}, {z2.shape} do not match config")
    B, T = z1.shape[0], c.seg_len
    inp = tn.repeat(tn.concat([z1, z2], axis=1), T, axis=1)
    top = run_stack(params, "dec", inp)[-1]
    g = _affine_gaussian(params, "x_head", tn.reshape(top, (B * T, c.hidden)), c.frame_dim)
    return DiagGaussian(tn.reshape(g.mean, (B, T, c.frame_dim)), tn.reshape(g.var, (B, T, c.frame_dim)))


def z2_means(params: FhvaeParams, frames: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Posterior means of z2 for a stack of segments, without recording a graph."""
    frames = np.asarray(frames, dtype=np.float64)
    out = []
    with tn.no_grad():
        for lo in range(0, len(frames), chunk):
            out.append(encode_z2(params, frames[lo:lo + chunk]).mean.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.z2_dim))


def map_svector(sum_of_means: np.ndarray, n_segments: int, sigma_sq_z2: float) -> np.ndarray:
    return np.asarray(sum_of_means) / (n_segments + sigma_sq_z2)


def infer_svector_map(params: FhvaeParams, segments: Sequence[Segment]) -> np.ndarray:
    """MAP posterior mean of the s-vector: sum of z2 means over (N + sigma^2)."""
    if not segments:
        raise ValueError("infer_svector_map: empty segment list")
    ids = {s.seq_id for s in segments}
    if len(ids) > 1:
        raise ValueError(f"infer_svector_map: segments from several sequences {sorted(ids)}")
    means = z2_means(params, np.stack([s.frames for s in segments]))
    return map_svector(means.sum(axis=0), len(segments), params.config.sigma_sq_z2)


# ---------------------------------------------------------------------------
# checkpoints: "FHCK", u32 header length, JSON header, concatenated TNSR records

CKPT_MAGIC = b"FHCK"


def checkpoint_bytes(params: FhvaeParams, extra: dict | None = None) -> bytes:
    blobs = []
    manifest = {}
    offset = 0
    for name in sorted(params.tensors):
        blob = tn.to_bytes(params.tensors[name])
        manifest[name] = [offset, len(blob)]
        blobs.append(blob)
        offset += len(blob)
    header = {"config": asdict(params.config), "tensors": manifest, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def save_checkpoint(params: FhvaeParams, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, extra))


def load_checkpoint(path) -> tuple[FhvaeParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an FHVAE checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n])
    base = 8 + n
    config = ModelConfig(**header["config"])
    tensors = {}
    for name, (off, _) in header["tensors"].items():
        t, _ = tn.from_bytes(buf, base + off)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
        tensors[name] = t
    return FhvaeParams(config, tensors), header.get("extra", {})
