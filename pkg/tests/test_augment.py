import numpy as np
import pytest

from normshape import errors
from normshape.augment import AugmentRanges, random_similarity, similarity_transform
from normshape.synth import ShapeGenParams, gen_healthy
from normshape.volume import MaskVolume, dice


def mk(data, spacing=(1.0, 1.0, 1.0)):
    return MaskVolume(data=np.asarray(data, dtype=np.uint8), spacing_mm=spacing)


def test_ranges_validation():
    with pytest.raises(ValueError):
        AugmentRanges(max_translation_voxels=(-1, 0, 0))
    with pytest.raises(ValueError):
        AugmentRanges(scale_range=(1.1, 1.2))


def test_identity_is_bitwise():
    m = gen_healthy(ShapeGenParams(seed=0))
    out = similarity_transform(m)
    assert np.array_equal(out.data, m.data)
    assert out.data is not m.data


def test_integer_translation_exact():
    m = gen_healthy(ShapeGenParams(seed=1))
    out = similarity_transform(m, translation_voxels=(3, 0, 0))
    expect = np.zeros_like(m.data)
    expect[3:, :, :] = m.data[:-3, :, :]
    assert np.array_equal(out.data, expect)


def test_integer_translation_anisotropic_spacing():
    m = gen_healthy(ShapeGenParams(seed=2))  # spacing (1,1,2)
    out = similarity_transform(m, translation_voxels=(0, 2, 1))
    expect = np.zeros_like(m.data)
    expect[:, 2:, 1:] = m.data[:, :-2, :-1]
    assert np.array_equal(out.data, expect)


def test_sphere_rotation_dice():
    dims = (24, 24, 24)
    grids = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    c = (np.array(dims) - 1) / 2.0
    sphere = sum((g - ci) ** 2 for g, ci in zip(grids, c)) <= 64.0
    m = mk(sphere.astype(np.uint8))
    rng = np.random.default_rng(3)
    for _ in range(5):
        angles = rng.uniform(-180, 180, 3)
        out = similarity_transform(m, rotation_deg=tuple(angles))
        assert dice(m, out) >= 0.90


def test_random_similarity_deterministic():
    m = gen_healthy(ShapeGenParams(seed=4))
    r = AugmentRanges()
    a = random_similarity(m, r, rng_seed=11)
    b = random_similarity(m, r, rng_seed=11)
    c = random_similarity(m, r, rng_seed=12)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_output_binary_same_geometry():
    m = gen_healthy(ShapeGenParams(seed=5))
    out = random_similarity(m, AugmentRanges(), rng_seed=0)
    assert out.dims == m.dims
    assert out.spacing_mm == m.spacing_mm
    assert set(np.unique(out.data)).issubset({0, 1})


def test_default_ranges_volume_change_small():
    r = AugmentRanges(max_translation_voxels=(0, 0, 0))  # isolate rot+scale
    for seed in range(20):
        m = gen_healthy(ShapeGenParams(seed=seed))
        out = random_similarity(m, r, rng_seed=seed)
        n0, n1 = m.foreground_count(), out.foreground_count()
        # scale in [0.9,1.1] changes volume by up to ~scale^3 plus voxelization
        assert abs(n1 - n0) / n0 < 0.40


def test_empty_mask_rejected():
    with pytest.raises(errors.EmptyMask):
        similarity_transform(mk(np.zeros((4, 4, 4))), scale=1.1)
