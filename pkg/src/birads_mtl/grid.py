"""Dense 2-D grid kernels: stable sigmoid, Sobel responses and their adjoints, reductions, image I/O.

Every kernel works on the last two axes, so a stack of shape ``(N, H, W)``
is processed image by image without a Python loop.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidInputError

EDGE_EPS = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("grid contains non-finite values")


def _check_min_size(values: np.ndarray) -> None:
    if values.ndim < 2 or values.shape[-1] < 3 or values.shape[-2] < 3:
        raise InvalidInputError(f"grid must be at least 3x3, got shape {values.shape}")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Sign-split logistic; never overflows for finite input. float32 stays float32."""
    x = np.asarray(x)
    if x.dtype != np.float32:
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grid(logits) -> np.ndarray:
    """Soft mask from segmentation logits."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits)
    return stable_sigmoid(logits)


def _pad_replicate(values: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (values.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(values, pad, mode="edge")


def correlate3x3(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with clamp-to-edge borders (same output shape)."""
    padded = _pad_replicate(values)
    h, w = values.shape[-2:]
    out = np.zeros(values.shape, dtype=np.result_type(values.dtype, np.float32))
    for di in range(3):
        for dj in range(3):
            k = float(kernel[di, dj])
            if k != 0.0:
                out += k * padded[..., di:di + h, dj:dj + w]
    return out


def correlate3x3_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`correlate3x3`: maps an output cotangent back to the input grid."""
    h, w = grad.shape[-2:]
    padded = np.zeros(grad.shape[:-2] + (h + 2, w + 2), dtype=np.result_type(grad.dtype, np.float32))
    for di in range(3):
        for dj in range(3):
            k = float(kernel[di, dj])
            if k != 0.0:
                padded[..., di:di + h, dj:dj + w] += k * grad
    # fold the replicated border back onto the edge pixels
    padded[..., 1, :] += padded[..., 0, :]
    padded[..., h, :] += padded[..., h + 1, :]
    padded[..., :, 1] += padded[..., :, 0]
    padded[..., :, w] += padded[..., :, w + 1]
    return padded[..., 1:h + 1, 1:w + 1].copy()


def sobel_xy(mask) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=np.float64)
    _check_min_size(mask)
    return correlate3x3(mask, SOBEL_X), correlate3x3(mask, SOBEL_Y)


def sobel_edge_magnitude(mask) -> np.ndarray:
    """E = sqrt(Gx^2 + Gy^2 + EDGE_EPS) with unnormalized Sobel kernels."""
    gx, gy = sobel_xy(mask)
    return np.sqrt(gx * gx + gy * gy + EDGE_EPS)


def masked_sum(mask) -> np.ndarray | float:
    mask = np.asarray(mask, dtype=np.float64)
    return mask.sum(axis=(-2, -1))


def masked_mean(mask) -> np.ndarray | float:
    mask = np.asarray(mask, dtype=np.float64)
    return mask.mean(axis=(-2, -1))


# ---------------------------------------------------------------------------
# image I/O: 8-bit grayscale, value k -> k/255

def _read_pgm(data: bytes, path: Path) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise OSError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raw = data[pos:pos + width * height]
    if len(raw) != width * height:
        raise OSError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width)


def read_gray(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (P5) or PNG as float64 values in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if data[:2] == b"P5":
        pixels = _read_pgm(data, path)
    else:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("L"))
        except UnidentifiedImageError as exc:
            raise OSError(f"{path}: not a PGM or PNG image") from exc
    return pixels.astype(np.float64) / 255.0


def to_uint8(values) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values) -> None:
    pixels = to_uint8(values)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
