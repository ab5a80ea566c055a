"""Toy encoder-decoder with a segmentation head and a malignancy head, and its checkpoint container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError
from .features import EmaNormalizer
from .losses import BatchObjective, LossHyper, batch_objective
from .prior import PriorWeights, init_weights


@dataclass(frozen=True)
class NetConfig:
    widths: tuple[int, int, int] = (8, 16, 32)
    in_channels: int = 1  # 3 replicates the grayscale image for the encoder
    zero_final: bool = False
    dtype: str = "float64"  # "float32" for training speed


class ToyNet:
    """Three conv/ReLU/avg-pool stages, a bilinear-upsampling decoder with skips,
    a 1x1 segmentation head and a pooled-bottleneck linear classifier."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0):
        if config.in_channels not in (1, 3):
            raise InvalidInputError("in_channels must be 1 or 3")
        if config.dtype not in ("float32", "float64"):
            raise InvalidInputError("dtype must be 'float32' or 'float64'")
        dtype = np.dtype(config.dtype)
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        w1, w2, w3 = config.widths
        shapes = {
            "enc1": (w1, config.in_channels, 3, 3),
            "enc2": (w2, w1, 3, 3),
            "enc3": (w3, w2, 3, 3),
            "dec3": (w2, w3 + w3, 3, 3),
            "dec2": (w1, w2 + w2, 3, 3),
            "dec1": (w1, w1 + w1, 3, 3),
            "head": (1, w1, 1, 1),
        }
        self.params: dict[str, ad.Tensor] = {}
        for name, shape in shapes.items():
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            if name == "head" and config.zero_final:
                w = np.zeros(shape)
            self.params[f"{name}.w"] = ad.parameter(w, f"{name}.w", dtype)
            self.params[f"{name}.b"] = ad.parameter(np.zeros(shape[0]), f"{name}.b", dtype)
        bound = np.sqrt(6.0 / w3)
        cls_w = np.zeros(w3) if config.zero_final else rng.uniform(-bound, bound, size=w3)
        self.params["cls.w"] = ad.parameter(cls_w, "cls.w", dtype)
        self.params["cls.b"] = ad.parameter(np.zeros(()), "cls.b", dtype)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _conv(self, name, x, act=True):
        out = ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        return ad.relu(out) if act else out

    def forward(self, images) -> tuple[ad.Tensor, ad.Tensor]:
        """Images ``(N, H, W)`` or ``(H, W)`` -> logits ``(N, H, W)`` and malignancy logits ``(N,)``."""
        x = np.asarray(images, dtype=self.config.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise InvalidInputError(f"expected (N, H, W) images, got shape {x.shape}")
        n, h, w = x.shape
        if h % 8 or w % 8:
            raise InvalidInputError(f"image dimensions must be divisible by 8, got {h}x{w}")
        x = np.repeat(x[:, None], self.config.in_channels, axis=1)
        p = self.params
        skip1 = self._conv("enc1", x)
        skip2 = self._conv("enc2", ad.avg_pool2(skip1))
        skip3 = self._conv("enc3", ad.avg_pool2(skip2))
        bottleneck = ad.avg_pool2(skip3)

        d = self._conv("dec3", ad.concat([ad.upsample2(bottleneck), skip3], axis=1))
        d = self._conv("dec2", ad.concat([ad.upsample2(d), skip2], axis=1))
        d = self._conv("dec1", ad.concat([ad.upsample2(d), skip1], axis=1))
        seg = self._conv("head", d, act=False).reshape((n, h, w))

        pooled = bottleneck.mean(axis=(2, 3))
        cls = (pooled * p["cls.w"]).sum(axis=1) + p["cls.b"]
        return seg, cls


@dataclass
class Checkpoint:
    net: ToyNet
    prior: PriorWeights
    norm_r: EmaNormalizer
    norm_t: EmaNormalizer
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: NetConfig = NetConfig(), seed: int = 0, prior_init=None) -> "Checkpoint":
        prior = init_weights() if prior_init is None else init_weights(prior_init)
        return cls(ToyNet(config, seed), prior, EmaNormalizer(), EmaNormalizer(), 0, seed)

    def trainable(self) -> list[ad.Tensor]:
        return self.net.parameters() + [self.prior.u]

    def objective(self, images, mask_gt, labels, hyper: LossHyper, training=False,
                  consistency_grad="both") -> BatchObjective:
        seg, cls = self.net.forward(images)
        return batch_objective(seg, cls, images, mask_gt, labels, self.prior, self.norm_r,
                               self.norm_t, hyper, training, consistency_grad)

    def copy(self) -> "Checkpoint":
        return from_bytes(to_bytes(self))

    def save(self, path) -> None:
        Path(path).write_bytes(to_bytes(self))


def parameter_gradients(ckpt: Checkpoint, images, mask_gt, labels, hyper: LossHyper,
                        training=False, consistency_grad="both"):
    """Batch objective plus its gradient for every network parameter and for ``u``."""
    obj = ckpt.objective(images, mask_gt, labels, hyper, training, consistency_grad)
    params = ckpt.trainable()
    grads = ad.backward(obj.total, params)
    names = list(ckpt.net.params) + ["prior.u"]
    return obj, dict(zip(names, grads))


# --------------------------------------------------------------------------- binary container
#
# little-endian layout:
#   magic  b"BRMTLCK\0"            8 bytes
#   version                        uint32
#   block count                    uint32
#   per block:
#     name length, name (utf-8)    uint16, bytes
#     kind                         uint8   (0 = float64 array, 1 = utf-8 JSON)
#     kind 0: ndim uint8, dims uint32 * ndim, float64 data (C order)
#     kind 1: byte length uint32, bytes

MAGIC = b"BRMTLCK\0"
VERSION = 1


def _pack_array(name: str, values: np.ndarray) -> bytes:
    arr = np.array(values, dtype="<f8", order="C")
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", 0, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def _pack_json(name: str, obj) -> bytes:
    key = name.encode("utf-8")
    data = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<H", len(key)) + key + struct.pack("<BI", 1, len(data)) + data


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.net.config
    meta = {"widths": list(cfg.widths), "in_channels": cfg.in_channels, "dtype": cfg.dtype,
            "step": ckpt.step,
            "seed": ckpt.seed, "net_seed": ckpt.net.seed, **ckpt.meta}
    blocks = [_pack_json("meta", meta)]
    blocks += [_pack_array(f"param/{k}", v.data) for k, v in ckpt.net.params.items()]
    blocks.append(_pack_array("prior/u", ckpt.prior.u.data))
    blocks.append(_pack_array("ema/R", np.array(ckpt.norm_r.state())))
    blocks.append(_pack_array("ema/T", np.array(ckpt.norm_t.state())))
    return MAGIC + struct.pack("<II", VERSION, len(blocks)) + b"".join(blocks)


def from_bytes(data: bytes) -> Checkpoint:
    try:
        return _from_bytes(data)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"corrupt checkpoint: {exc}") from exc


def _from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise InvalidInputError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    pos = 16
    arrays, jsons = {}, {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode("utf-8")
        pos += klen
        (kind,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if kind == 0:
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count_vals = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count_vals,
                                         offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count_vals
        elif kind == 1:
            (length,) = struct.unpack_from("<I", data, pos)
            pos += 4
            jsons[name] = json.loads(data[pos:pos + length].decode("utf-8"))
            pos += length
        else:
            raise InvalidInputError(f"unknown block kind {kind} in checkpoint")
    meta = dict(jsons["meta"])
    config = NetConfig(widths=tuple(meta.pop("widths")), in_channels=meta.pop("in_channels"),
                       dtype=meta.pop("dtype"))
    net = ToyNet(config, seed=meta.pop("net_seed"))
    for key, param in net.params.items():
        stored = arrays[f"param/{key}"]
        if stored.shape != param.shape:
            raise InvalidInputError(f"checkpoint parameter {key} has shape {stored.shape}")
        param.data = stored.astype(config.dtype)
    prior = PriorWeights(u=ad.parameter(arrays["prior/u"], name="prior_u"))
    step, seed = meta.pop("step"), meta.pop("seed")
    return Checkpoint(net, prior, EmaNormalizer.from_state(arrays["ema/R"]),
                      EmaNormalizer.from_state(arrays["ema/T"]), step, seed, meta)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return from_bytes(data)
