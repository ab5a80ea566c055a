"""Composite malignancy prior: softmax-weighted combination of [A, R, 1-C, T]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError
from .features import FeatureTensors, FeatureVector

# (w_A, w_R, w_C, w_T)
BIRADS_INIT = (0.15, 0.35, 0.25, 0.25)
WEIGHT_NAMES = ("w_A", "w_R", "w_C", "w_T")


@dataclass
class PriorWeights:
    u: ad.Tensor

    @property
    def w(self) -> np.ndarray:
        return ad.softmax(self.u).data

    def weights(self) -> ad.Tensor:
        return ad.softmax(self.u)


def init_weights(target_w=BIRADS_INIT) -> PriorWeights:
    """Zero-mean logits whose softmax reproduces ``target_w``."""
    target = np.asarray(target_w, dtype=np.float64)
    if target.shape != (4,):
        raise InvalidInputError("target weights must have four entries")
    if np.any(target <= 0) or abs(target.sum() - 1.0) > 1e-9:
        raise InvalidInputError("target weights must be positive and sum to 1")
    logs = np.log(target)
    return PriorWeights(u=ad.parameter(logs - logs.mean(), name="prior_u"))


@dataclass
class PriorScore:
    phi: float
    f: np.ndarray


def composite_tensor(f: ad.Tensor, pw: PriorWeights) -> ad.Tensor:
    """phi = softmax(u) . f over the last axis of ``f``."""
    return (f * pw.weights()).sum(axis=-1)


def composite_score(fv, pw: PriorWeights):
    """Prior score for a :class:`FeatureVector` (floats) or :class:`FeatureTensors` (tape)."""
    if isinstance(fv, FeatureTensors):
        return composite_tensor(fv.prior_input(), pw)
    if isinstance(fv, FeatureVector):
        f = fv.prior_input()
    else:
        a, r, c, t = (float(v) for v in fv)
        f = np.array([a, r, 1.0 - c, t])
    return PriorScore(phi=float(np.dot(pw.w, f)), f=f)


def weight_penalty(pw: PriorWeights) -> ad.Tensor:
    return ad.square(pw.u).sum()
