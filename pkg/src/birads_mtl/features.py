"""Differentiable morphology features of a soft mask and the EMA min-max normalizer.

All feature functions accept a single mask ``(H, W)`` or a stack ``(N, H, W)``
(numpy array or :class:`~birads_mtl.autodiff.Tensor`) and return a Tensor of
shape ``()`` or ``(N,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, UninitializedNormalizerError

EPS = 1e-6


def area(mask) -> ad.Tensor:
    return ad.as_tensor(mask).mean(axis=(-2, -1))


def perimeter(mask) -> ad.Tensor:
    return ad.edge_magnitude(ad.as_tensor(mask)).sum(axis=(-2, -1))


def roughness_raw(mask) -> tuple[ad.Tensor, ad.Tensor]:
    """Return ``(P, R_raw)`` with ``R_raw = P / sqrt(sum(mask) + EPS)``."""
    mask = ad.as_tensor(mask)
    p = perimeter(mask)
    return p, p / ad.sqrt(mask.sum(axis=(-2, -1)) + EPS)


def compactness(mask, p: ad.Tensor | None = None) -> ad.Tensor:
    mask = ad.as_tensor(mask)
    if p is None:
        p = perimeter(mask)
    ratio = (4.0 * math.pi) * mask.sum(axis=(-2, -1)) / (ad.square(p) + EPS)
    return ad.clip(ratio, 0.0, 1.0)


def texture(mask, image) -> ad.Tensor:
    """Mask-weighted variance of the raw grayscale image."""
    mask = ad.as_tensor(mask)
    image = np.asarray(image.data if isinstance(image, ad.Tensor) else image, dtype=mask.data.dtype)
    if image.shape != mask.shape:
        raise InvalidInputError(f"mask shape {mask.shape} does not match image {image.shape}")
    denom = mask.sum(axis=(-2, -1)) + EPS
    mu = (mask * image).sum(axis=(-2, -1)) / denom
    centred = image - mu.reshape(mu.shape + (1, 1))
    return (mask * ad.square(centred)).sum(axis=(-2, -1)) / denom


@dataclass
class EmaNormalizer:
    """Running min/max statistics; batch-norm style update, frozen outside training."""

    momentum: float = 0.99
    running_min: float = 0.0
    running_max: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in (0, 1)")

    def update(self, batch_values) -> "EmaNormalizer":
        values = np.asarray(batch_values.data if isinstance(batch_values, ad.Tensor)
                            else batch_values, dtype=np.float64).ravel()
        if values.size == 0:
            raise InvalidInputError("cannot update a normalizer from an empty batch")
        lo, hi = float(values.min()), float(values.max())
        if not self.initialized:
            self.running_min, self.running_max = lo, hi
            self.initialized = True
        else:
            m = self.momentum
            self.running_min = m * self.running_min + (1.0 - m) * lo
            self.running_max = m * self.running_max + (1.0 - m) * hi
        return self

    def apply(self, value):
        """Scale into [0, 1] with the running statistics treated as constants."""
        if not self.initialized:
            raise UninitializedNormalizerError("normalizer has not seen a training batch")
        span = self.running_max - self.running_min + EPS
        scaled = (ad.as_tensor(value) - self.running_min) * (1.0 / span)
        out = ad.clip(scaled, 0.0, 1.0)
        return out if isinstance(value, ad.Tensor) else float(out.data) if out.size == 1 else out.data

    def state(self) -> list[float]:
        return [self.running_min, self.running_max, self.momentum, float(self.initialized)]

    @classmethod
    def from_state(cls, state) -> "EmaNormalizer":
        lo, hi, momentum, init = (float(v) for v in state)
        return cls(momentum=momentum, running_min=lo, running_max=hi, initialized=bool(init))


def ema_update(norm: EmaNormalizer, batch_values) -> EmaNormalizer:
    return norm.update(batch_values)


def ema_apply(norm: EmaNormalizer, value):
    return norm.apply(value)


@dataclass
class FeatureVector:
    area: float
    roughness: float
    compactness: float
    texture: float
    perimeter: float
    roughness_raw: float = field(default=float("nan"))
    texture_raw: float = field(default=float("nan"))

    def prior_input(self) -> np.ndarray:
        return np.array([self.area, self.roughness, 1.0 - self.compactness, self.texture])


@dataclass
class FeatureTensors:
    """Tape-level features for a batch; ``R`` and ``T`` already normalized."""

    A: ad.Tensor
    R: ad.Tensor
    C: ad.Tensor
    T: ad.Tensor
    P: ad.Tensor
    R_raw: ad.Tensor
    T_raw: ad.Tensor

    def prior_input(self) -> ad.Tensor:
        return ad.stack([self.A, self.R, 1.0 - self.C, self.T], axis=-1)

    def vectors(self) -> list[FeatureVector]:
        cols = [np.atleast_1d(t.data) for t in
                (self.A, self.R, self.C, self.T, self.P, self.R_raw, self.T_raw)]
        return [FeatureVector(*(float(c[i]) for c in cols)) for i in range(cols[0].size)]


def compute_features(mask, image, norm_r: EmaNormalizer, norm_t: EmaNormalizer,
                     training: bool = False) -> FeatureTensors:
    """All four features; in training mode the batch's raw R and T update the normalizers first."""
    mask = ad.as_tensor(mask)
    a = area(mask)
    p, r_raw = roughness_raw(mask)
    c = compactness(mask, p)
    t_raw = texture(mask, image)
    if training:
        norm_r.update(r_raw.data)
        norm_t.update(t_raw.data)
    return FeatureTensors(A=a, R=norm_r.apply(r_raw), C=c, T=norm_t.apply(t_raw),
                          P=p, R_raw=r_raw, T_raw=t_raw)


def feature_vector(mask, image, norm_r: EmaNormalizer, norm_t: EmaNormalizer,
                   mode: str = "eval") -> FeatureVector:
    """Single-image convenience wrapper returning plain floats."""
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = compute_features(mask, image, norm_r, norm_t, training=(mode == "train"))
    return feats.vectors()[0]


def raw_features(mask, image=None) -> dict[str, float]:
    """Un-normalized features of one mask, as plain floats."""
    mask = np.asarray(mask, dtype=np.float64)
    p, r_raw = roughness_raw(mask)
    out = {
        "A": float(area(mask).data),
        "R_raw": float(r_raw.data),
        "C": float(compactness(mask, p).data),
        "P": float(p.data),
    }
    if image is not None:
        out["T_raw"] = float(texture(mask, image).data)
    return out
