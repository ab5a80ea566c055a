"""Procedural ultrasound-like lesions: smooth homogeneous ellipses (benign), spiky heterogeneous stars (malignant).

Shapes are rasterized with supersampled coverage; the coverage map blends
lesion and background intensity, and the ground-truth mask is that same
coverage thresholded at 0.5.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import grid
from .errors import InvalidInputError, InvalidSpecError

KINDS = ("benign_ellipse", "malignant_star", "no_tumor")
SUPERSAMPLE = 4
MARGIN = 2

# cross-center shift applied to the "shifted" domain
SHIFT_BACKGROUND_OFFSET = 0.15
SHIFT_NOISE_SCALE = 1.5
SHIFT_LESION_SCALE = 0.8


@dataclass(frozen=True)
class LesionSpec:
    kind: str
    center: tuple[float, float] = (32.0, 32.0)
    radii: tuple[float, float] = (12.0, 12.0)
    spike_count: int = 7
    spike_depth: float = 0.35
    interior_noise_sd: float = 0.03
    background_noise_sd: float = 0.05
    intensity: tuple[float, float] = (0.25, 0.55)
    seed: int = 0
    size: int = 64
    angle: float = 0.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown lesion kind {self.kind!r}")
        if self.size < 8:
            raise InvalidSpecError("image size must be at least 8")
        if self.interior_noise_sd < 0 or self.background_noise_sd < 0:
            raise InvalidSpecError("noise standard deviations must be non-negative")
        if not all(0.0 <= v <= 1.0 for v in self.intensity):
            raise InvalidSpecError("intensities must lie in [0, 1]")
        if self.kind == "no_tumor":
            return
        if min(self.radii) <= 0:
            raise InvalidSpecError("radii must be positive")
        if self.kind == "malignant_star":
            if self.spike_count < 5:
                raise InvalidSpecError("stars need at least 5 spikes")
            if not 0.0 < self.spike_depth < 1.0:
                raise InvalidSpecError("spike_depth must lie in (0, 1)")
        reach = max(self.radii)
        cy, cx = self.center
        lo, hi = MARGIN + reach, self.size - MARGIN - reach
        if not (lo <= cy <= hi and lo <= cx <= hi):
            raise InvalidSpecError(
                f"lesion at {self.center} with radius {reach} violates the {MARGIN}-pixel margin")

    @property
    def label(self) -> int:
        return int(self.kind == "malignant_star")


@dataclass
class SyntheticSample:
    image: np.ndarray
    mask_gt: np.ndarray
    label: int
    spec: LesionSpec
    coverage: np.ndarray

    @property
    def soft_mask(self) -> np.ndarray:
        return self.coverage


def star_radius_for_area(disc_radius: float, spike_depth: float) -> float:
    """Outer radius of a star whose area equals that of a disc of ``disc_radius``.

    The star boundary r(t) = r1 (1 - d |sin(k t / 2)|) encloses
    pi r1^2 (1 - 4d/pi + d^2/2) for any spike count k.
    """
    d = spike_depth
    return disc_radius / math.sqrt(1.0 - 4.0 * d / math.pi + d * d / 2.0)


def coverage_map(spec: LesionSpec) -> np.ndarray:
    """Fraction of each pixel inside the lesion, from SUPERSAMPLE^2 subsamples."""
    n, ss = spec.size, SUPERSAMPLE
    if spec.kind == "no_tumor":
        return np.zeros((n, n))
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(n)[:, None] + offs[None, :]).ravel()  # pixel centres at +0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = yy - (spec.center[0] + 0.5), xx - (spec.center[1] + 0.5)
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    u = (ca * dx + sa * dy) / spec.radii[1]
    v = (-sa * dx + ca * dy) / spec.radii[0]
    rho = np.hypot(u, v)
    if spec.kind == "malignant_star":
        theta = np.arctan2(v, u)
        limit = 1.0 - spec.spike_depth * np.abs(np.sin(spec.spike_count * theta / 2.0))
    else:
        limit = 1.0
    inside = (rho <= limit).astype(np.float64)
    return inside.reshape(n, ss, n, ss).mean(axis=(1, 3))


def generate(spec: LesionSpec) -> SyntheticSample:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    cov = coverage_map(spec)
    lesion_mean, background_mean = spec.intensity
    background = background_mean + spec.background_noise_sd * rng.standard_normal((n, n))
    interior = lesion_mean + spec.interior_noise_sd * rng.standard_normal((n, n))
    image = np.clip((1.0 - cov) * background + cov * interior, 0.0, 1.0)
    mask_gt = (cov >= 0.5).astype(np.float64)
    return SyntheticSample(image=image, mask_gt=mask_gt, label=spec.label, spec=spec, coverage=cov)


def disc_star_pair(disc_radius: float, spike_count: int, spike_depth: float, seed: int,
                   size: int = 64, intensity=(0.25, 0.55), benign_noise: float = 0.03,
                   malignant_noise: float = 0.15, background_noise: float = 0.05):
    """Equal-area (disc, star) pair sharing center and intensity settings."""
    c = (size - 1) / 2.0
    base = LesionSpec(kind="benign_ellipse", center=(c, c), radii=(disc_radius, disc_radius),
                      interior_noise_sd=benign_noise, background_noise_sd=background_noise,
                      intensity=tuple(intensity), seed=seed, size=size)
    r_star = star_radius_for_area(disc_radius, spike_depth)
    star = replace(base, kind="malignant_star", radii=(r_star, r_star), spike_count=spike_count,
                   spike_depth=spike_depth, interior_noise_sd=malignant_noise)
    return generate(base), generate(star)


def _allocate(n: int, class_mix) -> list[int]:
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise InvalidInputError("class_mix must be three non-negative proportions summing to 1")
    raw = n * mix
    counts = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def _draw_spec(kind: str, rng: np.random.Generator, seed: int, size: int) -> LesionSpec:
    scale = size / 64.0
    r1 = rng.uniform(9.0, 15.0) * scale
    bg = rng.uniform(0.45, 0.6)
    lesion = rng.uniform(0.15, 0.3)
    angle = rng.uniform(0.0, math.pi)
    if kind == "benign_ellipse":
        radii = (r1, r1 * rng.uniform(0.7, 1.0))
        spikes, depth, interior = 7, 0.35, 0.03
    else:
        depth = rng.uniform(0.3, 0.45)
        radii = (r1, r1 * rng.uniform(0.85, 1.0))
        spikes, interior = int(rng.integers(5, 10)), 0.15
    reach = max(radii)
    lo, hi = MARGIN + reach + 1.0, size - MARGIN - reach - 1.0
    center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    return LesionSpec(kind=kind, center=center, radii=radii, spike_count=spikes, spike_depth=depth,
                      interior_noise_sd=interior, background_noise_sd=0.05,
                      intensity=(lesion, bg), seed=seed, size=size, angle=angle)


def shift_domain(spec: LesionSpec) -> LesionSpec:
    lesion, bg = spec.intensity
    return replace(
        spec,
        radii=(spec.radii[0] * SHIFT_LESION_SCALE, spec.radii[1] * SHIFT_LESION_SCALE),
        intensity=(lesion, min(bg + SHIFT_BACKGROUND_OFFSET, 1.0)),
        interior_noise_sd=spec.interior_noise_sd * SHIFT_NOISE_SCALE,
        background_noise_sd=spec.background_noise_sd * SHIFT_NOISE_SCALE,
    )


def make_specs(n: int, class_mix=(0.5, 0.4, 0.1), domain: str = "source", seed: int = 0,
               size: int = 64) -> list[LesionSpec]:
    if n <= 0:
        raise InvalidInputError("dataset size must be positive")
    if domain not in ("source", "shifted"):
        raise InvalidInputError(f"domain must be 'source' or 'shifted', got {domain!r}")
    counts = _allocate(n, class_mix)
    kinds = [k for k, c in zip(KINDS, counts) for _ in range(c)]
    order = np.random.default_rng([seed, 0]).permutation(n)
    specs = []
    for i, idx in enumerate(order):
        kind = kinds[idx]
        sample_seed = int(np.random.default_rng([seed, 1, i]).integers(2**31))
        spec = _draw_spec(kind, np.random.default_rng([seed, 2, i]), sample_seed, size)
        if domain == "shifted":
            spec = shift_domain(spec)
        specs.append(spec)
    return specs


def make_dataset(n: int, class_mix=(0.5, 0.4, 0.1), domain: str = "source", seed: int = 0,
                 size: int = 64) -> list[SyntheticSample]:
    return [generate(spec) for spec in make_specs(n, class_mix, domain, seed, size)]


MANIFEST_FIELDS = ("filename", "mask", "label", "kind", "seed")


def write_dataset(samples: list[SyntheticSample], out_dir) -> Path:
    """Write image/mask PGM pairs and a manifest CSV; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for i, sample in enumerate(samples):
            name, mask_name = f"img_{i:04d}.pgm", f"mask_{i:04d}.pgm"
            grid.write_pgm(out / name, sample.image)
            grid.write_pgm(out / mask_name, sample.mask_gt)
            writer.writerow({"filename": name, "mask": mask_name, "label": sample.label,
                             "kind": sample.spec.kind, "seed": sample.spec.seed})
    return manifest


@dataclass
class LoadedSample:
    name: str
    image: np.ndarray
    mask_gt: np.ndarray
    label: int


def read_manifest(path) -> list[LoadedSample]:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        image = grid.read_gray(path.parent / row["filename"])
        mask = (grid.read_gray(path.parent / row["mask"]) >= 0.5).astype(np.float64)
        out.append(LoadedSample(row["filename"], image, mask, int(row["label"])))
    return out
