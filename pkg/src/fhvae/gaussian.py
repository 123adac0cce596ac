"""Diagonal Gaussians: log-density, closed-form KL and reparameterized draws.

Distributions may be batched: the leading axis of a rank >= 2 mean is the
batch, and densities/KLs sum over every remaining axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PriorConfig:
    sigma_sq_z2: float = 0.25

    def __post_init__(self):
        if not self.sigma_sq_z2 > 0:
            raise ValueError(f"sigma_sq_z2 must be positive, got {self.sigma_sq_z2}")


@dataclass
class DiagGaussian:
    mean: Tensor
    var: Tensor

    def __post_init__(self):
        self.mean = tn.as_tensor(self.mean)
        self.var = tn.as_tensor(self.var)
        if self.var.shape != self.mean.shape and self.var.data.size != 1:
            raise DimensionError(f"variance shape {self.var.shape} does not match mean {self.mean.shape}")
        if not np.all(self.var.data > 0):
            raise ValueError("DiagGaussian variance must be strictly positive")

    @classmethod
    def from_logvar(cls, mean, logvar, floor: float = 0.0) -> "DiagGaussian":
        var = tn.exp(logvar)
        if floor:
            var = tn.add(var, floor)
        return cls(mean, var)

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(1.0))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def per_frame(self) -> list["DiagGaussian"]:
        """Split a (B, T, d) distribution into T distributions over (B, d)."""
        if self.mean.ndim != 3:
            raise DimensionError(f"per_frame needs a (B, T, d) distribution, got {self.mean.shape}")
        T = self.mean.shape[1]
        var = self.var if self.var.data.size == 1 else None
        return [
            DiagGaussian(tn.select(self.mean, 1, t), var if var is not None else tn.select(self.var, 1, t))
            for t in range(T)
        ]


def _event_sum(t: Tensor) -> Tensor:
    if t.ndim <= 1:
        return tn.sum(t)
    if t.ndim > 2:
        t = tn.reshape(t, (t.shape[0], -1))
    return tn.sum(t, axis=1)


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def _full_var(g: DiagGaussian) -> Tensor:
    if g.var.shape == g.mean.shape:
        return g.var
    return tn.mul(Tensor(np.ones(g.mean.shape)), g.var)


def log_pdf(g: DiagGaussian, x) -> Tensor:
    """Sum over event dims of -0.5*ln(2*pi*var) - (x - mean)^2 / (2*var)."""
    x = tn.as_tensor(x)
    _check_same(x, g.mean, "log_pdf")
    var = _full_var(g)
    sq = tn.square(tn.sub(x, g.mean))
    terms = tn.add(tn.log(var), tn.div(sq, var))
    return tn.scale(tn.add(_event_sum(terms), _event_count(x) * LOG_2PI), -0.5)


def _event_count(t: Tensor) -> int:
    if t.ndim <= 1:
        return t.data.size
    return t.data.size // t.shape[0]


def kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over event dims."""
    _check_same(q.mean, p.mean, "kl")
    qv = _full_var(q)
    pv = _full_var(p)
    sq = tn.square(tn.sub(q.mean, p.mean))
    terms = tn.add(tn.sub(tn.log(pv), tn.log(qv)), tn.div(tn.add(qv, sq), pv))
    return tn.scale(tn.sub(_event_sum(terms), float(_event_count(q.mean))), 0.5)


def reparam_sample(g: DiagGaussian, eps) -> Tensor:
    """mean + sqrt(var) * eps; ``eps`` is treated as a constant."""
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != g.mean.shape:
        raise DimensionError(f"reparam_sample: eps shape {eps.shape} does not match {g.mean.shape}")
    return tn.add(g.mean, tn.mul(tn.sqrt(_full_var(g)), Tensor(eps)))
