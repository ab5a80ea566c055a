import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from birads_mtl import features as F
from birads_mtl import synthetic as S
from birads_mtl.errors import InvalidInputError, InvalidSpecError


def raw(sample):
    return F.raw_features(sample.mask_gt, sample.image)


def test_generate_is_deterministic():
    spec = S.LesionSpec("benign_ellipse", seed=7)
    a, b = S.generate(spec), S.generate(spec)
    assert a.image.tobytes() == b.image.tobytes() and a.mask_gt.tobytes() == b.mask_gt.tobytes()


def test_no_tumor_sample():
    s = S.generate(S.LesionSpec("no_tumor", seed=2))
    assert s.mask_gt.sum() == 0 and s.label == 0


def test_labels_follow_kind():
    assert S.generate(S.LesionSpec("malignant_star")).label == 1
    assert S.generate(S.LesionSpec("benign_ellipse")).label == 0


def test_mask_is_thresholded_coverage():
    s = S.generate(S.LesionSpec("malignant_star", center=(30.2, 33.7), radii=(14.0, 12.0), angle=0.4))
    np.testing.assert_array_equal(s.mask_gt, (s.coverage >= 0.5).astype(float))
    assert set(np.unique(s.mask_gt)) == {0.0, 1.0}


@pytest.mark.parametrize("kwargs", [
    dict(kind="benign_ellipse", center=(5.0, 32.0), radii=(12.0, 12.0)),
    dict(kind="malignant_star", spike_count=4),
    dict(kind="malignant_star", spike_depth=1.0),
    dict(kind="cyst"),
    dict(kind="benign_ellipse", intensity=(1.2, 0.5)),
])
def test_invalid_specs(kwargs):
    with pytest.raises(InvalidSpecError):
        S.generate(S.LesionSpec(**kwargs))


def test_equal_area_star_radius():
    for d in (0.2, 0.35, 0.45):
        r1 = S.star_radius_for_area(10.0, d)
        theta = np.linspace(0, 2 * np.pi, 200_001)[:-1]
        r = r1 * (1 - d * np.abs(np.sin(7 * theta / 2)))
        area = 0.5 * np.mean(r ** 2) * 2 * np.pi
        assert area == pytest.approx(np.pi * 100, rel=1e-6)


def test_star_vs_ellipse_ordering():
    disc, star = S.disc_star_pair(11.0, 7, 0.4, seed=5)
    a, b = raw(star), raw(disc)
    assert a["R_raw"] > b["R_raw"] and a["C"] < b["C"] and a["T_raw"] > b["T_raw"]


def test_pairwise_dominance_rate():
    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        disc, star = S.disc_star_pair(rng.uniform(8, 13), int(rng.integers(5, 10)),
                                      rng.uniform(0.3, 0.45), seed=seed)
        a, b = raw(star), raw(disc)
        wins += a["R_raw"] > b["R_raw"] and a["C"] < b["C"] and a["T_raw"] > b["T_raw"]
    assert wins >= 48


def test_dataset_allocation():
    data = S.make_dataset(200, (0.5, 0.4, 0.1), seed=1, size=32)
    kinds = [s.spec.kind for s in data]
    assert kinds.count("benign_ellipse") == 100
    assert kinds.count("malignant_star") == 80
    assert kinds.count("no_tumor") == 20


def test_dataset_repeatable():
    a = S.make_specs(30, seed=4)
    assert a == S.make_specs(30, seed=4) and a != S.make_specs(30, seed=5)


def test_shifted_domain_fields():
    src, sh = S.make_specs(40, seed=9), S.make_specs(40, domain="shifted", seed=9)
    for a, b in zip(src, sh):
        assert (a.kind, a.center, a.spike_count, a.spike_depth, a.angle, a.seed) == \
               (b.kind, b.center, b.spike_count, b.spike_depth, b.angle, b.seed)
        assert b.radii == pytest.approx((a.radii[0] * 0.8, a.radii[1] * 0.8))
        assert b.intensity[1] == pytest.approx(min(a.intensity[1] + 0.15, 1.0))
        assert b.intensity[0] == a.intensity[0]
        assert b.background_noise_sd == pytest.approx(a.background_noise_sd * 1.5)
        assert b.interior_noise_sd == pytest.approx(a.interior_noise_sd * 1.5)


@pytest.mark.parametrize("args", [dict(n=0), dict(n=5, class_mix=(0.5, 0.5, 0.5)),
                                  dict(n=5, domain="other")])
def test_dataset_errors(args):
    with pytest.raises(InvalidInputError):
        S.make_specs(**args)


@given(st.integers(1, 60), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_allocation_sums_to_n(n, w):
    if sum(w) == 0:
        w = [1, 0, 0]
    mix = np.asarray(w) / np.sum(w)
    counts = S._allocate(n, mix)
    assert sum(counts) == n
    assert all(abs(c - n * m) < 1 for c, m in zip(counts, mix))


@given(st.integers(0, 2**20))
def test_random_specs_valid(seed):
    for spec in S.make_specs(6, seed=seed, size=64) + S.make_specs(3, domain="shifted", seed=seed):
        spec.validate()
        assert dataclasses.replace(spec).size == 64


def test_write_and_read_manifest(tmp_path):
    data = S.make_dataset(6, seed=3, size=16)
    manifest = S.write_dataset(data, tmp_path)
    header = manifest.read_text().splitlines()[0]
    assert header == ",".join(S.MANIFEST_FIELDS)
    loaded = S.read_manifest(manifest)
    assert [s.label for s in loaded] == [s.label for s in data]
    for a, b in zip(loaded, data):
        np.testing.assert_array_equal(a.mask_gt, b.mask_gt)
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12


def test_read_manifest_missing(tmp_path):
    with pytest.raises(OSError, match="nothing.csv"):
        S.read_manifest(tmp_path / "nothing.csv")
