"""Multi-task objective: segmentation and classification BCE, prior consistency, no-tumor penalty, L2 on u."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError
from .features import EmaNormalizer, FeatureTensors, area, compute_features
from .prior import PriorWeights, composite_tensor, weight_penalty

CONSISTENCY_MODES = ("both", "classifier", "prior")


@dataclass(frozen=True)
class LossHyper:
    w_seg: float = 0.9
    w_cls: float = 0.1
    alpha: float = 0.17
    lambda_nt: float = 0.5
    beta: float = 0.001

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise InvalidInputError(f"hyperparameter {name} must be non-negative, got {value}")


@dataclass
class SampleTargets:
    mask_gt: np.ndarray
    label: int

    @property
    def has_tumor(self) -> bool:
        return bool(np.asarray(self.mask_gt).sum() > 0)


@dataclass
class LossBreakdown:
    L_seg: float
    L_cls: float
    L_cons: float
    NTP: float
    L2: float
    total: float
    hyper: LossHyper = field(default_factory=LossHyper)

    FIELDS = ("L_seg", "L_cls", "L_cons", "NTP", "L2", "total")

    @classmethod
    def compose(cls, L_seg, L_cls, L_cons, NTP, L2, hyper: LossHyper) -> "LossBreakdown":
        total = (hyper.w_seg * L_seg + hyper.w_cls * L_cls + hyper.alpha * L_cons
                 + hyper.alpha * hyper.lambda_nt * NTP + hyper.beta * L2)
        return cls(L_seg, L_cls, L_cons, NTP, L2, total, hyper)

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}


def bce_with_logits(logits, targets, axis=None) -> ad.Tensor:
    return ad.bce_with_logits(logits, targets, axis=axis)


def consistency_loss(p_hat, phi):
    if isinstance(p_hat, ad.Tensor) or isinstance(phi, ad.Tensor):
        return ad.square(ad.as_tensor(p_hat) - phi)
    return (float(p_hat) - float(phi)) ** 2


def no_tumor_penalty(mask, targets: SampleTargets):
    if targets.has_tumor:
        return 0.0
    value = area(mask)
    return value if isinstance(mask, ad.Tensor) else float(value.data)


@dataclass
class BatchObjective:
    total: ad.Tensor
    breakdown: LossBreakdown
    p_hat: np.ndarray
    phi: np.ndarray
    features: FeatureTensors
    soft_mask: np.ndarray


def batch_objective(seg_logits, cls_logits, images, mask_gt, labels, pw: PriorWeights,
                    norm_r: EmaNormalizer, norm_t: EmaNormalizer, hyper: LossHyper,
                    training: bool = False, consistency_grad: str = "both") -> BatchObjective:
    """Batch-mean objective for logits ``(N, H, W)`` and malignancy logits ``(N,)``.

    Data terms are averaged over samples; the L2 term on ``u`` enters once.
    """
    if consistency_grad not in CONSISTENCY_MODES:
        raise InvalidInputError(f"consistency_grad must be one of {CONSISTENCY_MODES}")
    s = ad.as_tensor(seg_logits)
    m = ad.as_tensor(cls_logits)
    mask_gt = np.asarray(mask_gt, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != mask_gt.shape or s.ndim != 3:
        raise InvalidInputError(f"segmentation logits {s.shape} vs targets {mask_gt.shape}")
    n = s.shape[0]
    if m.shape != (n,) or labels.shape != (n,):
        raise InvalidInputError("need one malignancy logit and one label per sample")
    tumor_free = (mask_gt.reshape(n, -1).sum(axis=1) == 0).astype(np.float64)

    soft = ad.sigmoid(s)
    l_seg = bce_with_logits(s, mask_gt, axis=(1, 2))
    l_cls = bce_with_logits(m.reshape(n, 1), labels.reshape(n, 1), axis=1)
    feats = compute_features(soft, images, norm_r, norm_t, training=training)
    phi = composite_tensor(feats.prior_input(), pw)
    p_hat = ad.sigmoid(m)
    if consistency_grad == "classifier":
        l_cons = consistency_loss(p_hat, phi.detach())
    elif consistency_grad == "prior":
        l_cons = consistency_loss(p_hat.detach(), phi)
    else:
        l_cons = consistency_loss(p_hat, phi)
    ntp = feats.A * tumor_free
    l2 = weight_penalty(pw)

    per_sample = (hyper.w_seg * l_seg + hyper.w_cls * l_cls + hyper.alpha * l_cons
                  + (hyper.alpha * hyper.lambda_nt) * ntp)
    total = per_sample.mean() + hyper.beta * l2
    breakdown = LossBreakdown(
        L_seg=float(l_seg.data.mean()), L_cls=float(l_cls.data.mean()),
        L_cons=float(l_cons.data.mean()), NTP=float(ntp.data.mean()),
        L2=float(l2.data), total=float(total.data), hyper=hyper)
    return BatchObjective(total=total, breakdown=breakdown, p_hat=p_hat.data.copy(),
                          phi=phi.data.copy(), features=feats, soft_mask=soft.data)


def total_loss(image, targets: SampleTargets, seg_logits, cls_logit, pw: PriorWeights,
               hyper: LossHyper, norm_r: EmaNormalizer, norm_t: EmaNormalizer,
               training: bool = False, consistency_grad: str = "both") -> BatchObjective:
    """Single-sample objective; shapes ``(H, W)`` for the grids and a scalar logit."""
    s = ad.as_tensor(seg_logits)
    return batch_objective(
        s.reshape((1,) + s.shape), ad.as_tensor(cls_logit).reshape((1,)),
        np.asarray(image, dtype=np.float64)[None], np.asarray(targets.mask_gt)[None],
        [targets.label], pw, norm_r, norm_t, hyper, training, consistency_grad)
