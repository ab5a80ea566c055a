"""Finite-difference verification of every differentiable quantity in the objective.

Each target is a scalar function of (segmentation logits, malignancy logit, prior
logits u). EMA statistics are frozen before probing, which makes the
normalized features plain functions of the logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import features as F
from .autodiff import FiniteDiffReport, finite_diff_check
from .losses import LossHyper, batch_objective
from .prior import BIRADS_INIT, PriorWeights, composite_tensor

TARGETS = ("A", "R_raw", "C", "T_raw", "phi", "L_seg", "L_cls", "L_cons", "NTP", "total")
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7


@dataclass
class Instance:
    logits: np.ndarray
    cls_logit: float
    u: np.ndarray
    image: np.ndarray
    mask_gt: np.ndarray
    label: int
    norm_r: F.EmaNormalizer
    norm_t: F.EmaNormalizer


def _random_mask(rng, size):
    yy, xx = np.mgrid[:size, :size]
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
    r = rng.uniform(size * 0.15, size * 0.35)
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)


def make_instance(seed: int, size: int = 16, tumor_free: bool = False) -> Instance:
    rng = np.random.default_rng(seed)
    mask_gt = np.zeros((size, size)) if tumor_free else _random_mask(rng, size)
    logits = 4.0 * (mask_gt - 0.5) + rng.normal(scale=1.5, size=(size, size))
    image = rng.uniform(size=(size, size))
    u = np.log(BIRADS_INIT) - np.mean(np.log(BIRADS_INIT)) + rng.normal(scale=0.3, size=4)
    # freeze normalizers on raw values from this instance and a few perturbed copies
    soft = ad.sigmoid(logits[None] + rng.normal(scale=1.0, size=(6, size, size)))
    _, r_raw = F.roughness_raw(soft)
    t_raw = F.texture(soft, np.broadcast_to(image, soft.shape))
    norm_r = F.EmaNormalizer().update(r_raw.data)
    norm_t = F.EmaNormalizer().update(t_raw.data)
    return Instance(logits, float(rng.normal()), u, image, mask_gt,
                    int(rng.integers(2)), norm_r, norm_t)


def target_fn(name: str, inst: Instance, hyper: LossHyper = LossHyper()) -> Callable:
    """Scalar function ``f(s, m, u)`` for one target on a fixed instance."""
    if name not in TARGETS:
        raise KeyError(f"unknown gradcheck target {name!r}")

    def fn(s, m, u):
        pw = PriorWeights(u=u)
        soft = ad.sigmoid(s)
        if name == "A":
            return F.area(soft)
        if name == "R_raw":
            return F.roughness_raw(soft)[1]
        if name == "C":
            return F.compactness(soft)
        if name == "T_raw":
            return F.texture(soft, inst.image)
        if name == "phi":
            feats = F.compute_features(soft, inst.image, inst.norm_r, inst.norm_t)
            return composite_tensor(feats.prior_input(), pw)
        obj = batch_objective(s.reshape((1,) + s.shape), m.reshape((1,)), inst.image[None],
                              inst.mask_gt[None], [inst.label], pw, inst.norm_r, inst.norm_t,
                              hyper, training=False)
        if name == "total":
            return obj.total
        return {
            "L_seg": lambda: ad.bce_with_logits(s, inst.mask_gt),
            "L_cls": lambda: ad.bce_with_logits(m, float(inst.label)),
            "L_cons": lambda: ad.square(ad.sigmoid(m) - composite_tensor(
                obj.features.prior_input(), pw)).sum(),
            "NTP": lambda: obj.features.A.sum() * float(inst.mask_gt.sum() == 0),
        }[name]()

    return fn


def check_target(name: str, inst: Instance, probes: int = 20, seed: int = 0,
                 step: float = 1e-5, hyper: LossHyper = LossHyper()) -> FiniteDiffReport:
    return finite_diff_check(target_fn(name, inst, hyper),
                             [inst.logits, np.array(inst.cls_logit), inst.u],
                             step=step, probes=probes, seed=seed, exhaustive=(1, 2))


def run_suite(seed: int = 0, instances: int = 10, probes: int = 20, size: int = 16,
              step: float = 1e-5, targets=TARGETS) -> dict[str, FiniteDiffReport]:
    """Worst-case report per target over ``instances`` seeded random instances.

    Every other instance is tumor-free so the no-tumor penalty is not identically zero.
    """
    worst: dict[str, FiniteDiffReport] = {}
    for i in range(instances):
        inst = make_instance(seed * 1000 + i, size=size, tumor_free=(i % 2 == 1))
        for name in targets:
            if name == "NTP" and inst.mask_gt.sum() > 0:
                continue
            rep = check_target(name, inst, probes=probes, seed=seed * 1000 + i, step=step)
            worst[name] = worst[name].merge(rep) if name in worst else rep
    return worst


def network_check(seed: int = 0, probes: int = 20, size: int = 8, widths=(2, 4, 4),
                  hyper: LossHyper = LossHyper(), batch: int = 2) -> FiniteDiffReport:
    """Finite-difference check of the full objective w.r.t. toy-network parameters and u."""
    from .model import Checkpoint, NetConfig

    rng = np.random.default_rng(seed)
    ckpt = Checkpoint.fresh(NetConfig(widths=widths, dtype="float64"), seed=seed)
    images = rng.uniform(size=(batch, size, size))
    masks = np.stack([_random_mask(rng, size) for _ in range(batch)])
    masks[-1] = 0.0
    labels = rng.integers(2, size=batch).astype(float)
    ckpt.norm_r.update([rng.uniform(5, 10), rng.uniform(20, 40)])
    ckpt.norm_t.update([0.0, rng.uniform(0.05, 0.1)])
    names = list(ckpt.net.params)
    values = [p.data.copy() for p in ckpt.net.params.values()] + [ckpt.prior.u.data.copy()]

    def fn(*tensors):
        for key, t in zip(names, tensors[:-1]):
            ckpt.net.params[key] = t
        ckpt.prior = PriorWeights(u=tensors[-1])
        return ckpt.objective(images, masks, labels, hyper).total

    return finite_diff_check(fn, values, probes=probes, seed=seed, exhaustive=(len(values) - 1,))


__all__ = ["TARGETS", "Instance", "make_instance", "target_fn", "check_target", "run_suite",
           "network_check"]
