from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfman.image import (
    Degradation,
    DegradationSpec,
    ImageRGB,
    SamplingError,
    add_gaussian_noise,
    apply_dihedral,
    bicubic_resize,
    compose_dihedral,
    cubic,
    degrade,
    downscale,
    gaussian_blur7,
    gaussian_kernel7,
    mod_crop,
    read_png,
    resize_weights,
    rgb_to_y,
    sample_patch_pair,
    write_png,
)

DATA = Path(__file__).parent / "data"


def pattern(h=24, w=24):
    yy, xx = np.mgrid[0:h, 0:w]
    return ImageRGB(np.stack([(xx * 10) % 256, (yy * 7 + xx * 3) % 256, ((xx - yy) * 5) % 256]))


def random_image(seed, h=32, w=40):
    return ImageRGB(np.random.default_rng(seed).uniform(0, 255, size=(3, h, w)))


# ---------------------------------------------------------------- bicubic


def test_bicubic_identity():
    img = random_image(0)
    np.testing.assert_allclose(bicubic_resize(img, img.height, img.width).data, img.data, atol=1e-12)


@pytest.mark.parametrize("out", [(8, 10), (64, 80), (11, 7)])
def test_bicubic_constant(out):
    img = ImageRGB(np.full((3, 32, 40), 77.0))
    np.testing.assert_allclose(bicubic_resize(img, *out).data, 77.0, atol=1e-9)


def test_bicubic_row_direct_summation():
    row = np.arange(8) * 8.0
    img = ImageRGB(np.tile(row, (3, 1, 1)))
    got = bicubic_resize(img, 1, 4).data[0, 0]
    # stretched kernel materialized per output pixel, out-of-range taps clamped to the edge
    expect = []
    for i in range(4):
        u = (i + 0.5) * 2 - 0.5
        acc = wsum = 0.0
        for j in range(-6, 14):
            w = 0.5 * cubic(np.array((u - j) / 2))
            acc += w * row[min(max(j, 0), 7)]
            wsum += w
        expect.append(acc / wsum)
    np.testing.assert_allclose(got, expect, atol=1e-9)


@pytest.mark.parametrize("n_in,n_out", [(8, 4), (9, 3), (5, 10), (48, 6), (7, 7)])
def test_resize_rows_sum_to_one(n_in, n_out):
    np.testing.assert_allclose(resize_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-9)


def test_cubic_kernel_interpolates():
    np.testing.assert_allclose(cubic(np.array([0.0, 1.0, 2.0, -1.0])), [1, 0, 0, 0], atol=1e-15)


# ---------------------------------------------------------------- blur / noise


def test_blur_constant_unchanged():
    img = ImageRGB(np.full((3, 16, 16), 123.0))
    np.testing.assert_allclose(gaussian_blur7(img).data, 123.0, atol=1e-9)


def test_blur_kernel_normalized():
    assert gaussian_kernel7().sum() == pytest.approx(1.0, abs=1e-9)
    assert gaussian_kernel7().shape == (7, 7)


def test_blur_impulse_response():
    data = np.zeros((3, 15, 15))
    data[:, 7, 7] = 255.0
    out = gaussian_blur7(ImageRGB(data)).data
    r = np.arange(7) - 3
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 1.6**2))
    np.testing.assert_allclose(out[0, 4:11, 4:11], 255 * g / g.sum(), atol=1e-9)
    assert out[0, :4].max() == 0.0


def test_noise_level_zero_identity():
    img = random_image(1)
    np.testing.assert_array_equal(add_gaussian_noise(img, 0.0, seed=5).data, img.data)


def test_noise_seeded_determinism():
    img = random_image(2)
    a = add_gaussian_noise(img, 30.0, seed=99).data
    b = add_gaussian_noise(img, 30.0, seed=99).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != add_gaussian_noise(img, 30.0, seed=100).data.tobytes()


def test_noise_empirical_std():
    gray = ImageRGB(np.full((3, 256, 256), 127.5))
    diff = add_gaussian_noise(gray, 30.0, seed=7).data - 127.5
    unclamped = (diff > -127.5) & (diff < 127.5)
    assert abs(diff[unclamped].std() - 30.0) < 0.5


# ---------------------------------------------------------------- degrade


def test_bi_constant():
    out = degrade(ImageRGB(np.full((3, 24, 24), 40.0)), DegradationSpec("BI", 3))
    assert out.data.shape == (3, 8, 8)
    np.testing.assert_allclose(out.data, 40.0, atol=1e-9)


def test_bd_is_blur_then_downscale():
    img = random_image(3, 24, 24)
    np.testing.assert_array_equal(degrade(img, DegradationSpec(Degradation.BD, 2)).data,
                                  downscale(gaussian_blur7(img), 2).data)


def test_dn_golden():
    lr = degrade(pattern(), DegradationSpec("DN", 2, 1234))
    golden = np.load(DATA / "dn_x2_seed1234.npy")
    assert lr.data.tobytes() == golden.tobytes()


def test_mod_crop_centres():
    img = ImageRGB(np.arange(3 * 7 * 9, dtype=float).reshape(3, 7, 9))
    out = mod_crop(img, 2)
    assert out.data.shape == (3, 6, 8)
    np.testing.assert_array_equal(out.data, img.data[:, 0:6, 0:8])
    assert mod_crop(img, 4).data.shape == (3, 4, 8)


def test_degrade_non_divisible_extent():
    out = degrade(random_image(4, 25, 31), DegradationSpec("BI", 3))
    assert out.data.shape == (3, 8, 10)


def test_spec_accepts_lowercase():
    assert DegradationSpec("bd", 3).kind is Degradation.BD
    assert DegradationSpec("dn", 2).tag == "LR_dn_x2"
    with pytest.raises(ValueError):
        DegradationSpec("xx", 2)
    with pytest.raises(ValueError):
        DegradationSpec("bi", 0)


# ---------------------------------------------------------------- luma


def test_rgb_to_y_anchor_points():
    def y_of(v):
        return rgb_to_y(ImageRGB(np.full((3, 1, 1), v)))[0, 0, 0]

    assert y_of(0.0) == pytest.approx(16.0)
    assert y_of(255.0) == pytest.approx(235.0)
    assert y_of(127.5) == pytest.approx(125.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_rgb_to_y_affine(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, 255, (3, 4, 4)), rng.uniform(0, 255, (3, 4, 4))
    lhs = rgb_to_y(a * x + b * y)
    rhs = a * rgb_to_y(x) + b * rgb_to_y(y) - (a + b - 1) * 16
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# ---------------------------------------------------------------- augmentation / patches


def test_dihedral_code_zero_is_identity():
    p = np.random.default_rng(5).normal(size=(3, 4, 5))
    np.testing.assert_array_equal(apply_dihedral(p, 0), p)


def test_flip_is_involution():
    p = np.random.default_rng(6).normal(size=(3, 5, 5))
    np.testing.assert_array_equal(apply_dihedral(apply_dihedral(p, 4), 4), p)


def test_dihedral_group_closed_over_64_pairs():
    p = np.random.default_rng(7).normal(size=(3, 5, 5))
    images = {c: apply_dihedral(p, c) for c in range(8)}
    assert len({v.tobytes() for v in images.values()}) == 8
    for a in range(8):
        for b in range(8):
            both = apply_dihedral(apply_dihedral(p, a), b)
            c = compose_dihedral(a, b)
            np.testing.assert_array_equal(both, images[c])


def test_dihedral_rejects_bad_code():
    with pytest.raises(ValueError):
        apply_dihedral(np.zeros((3, 2, 2)), 8)


def test_patch_pair_code_zero_equals_raw_crop():
    hr = random_image(8, 40, 40)
    spec = DegradationSpec("BI", 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = sample_patch_pair(hr, spec, 8, rng)
        if pair.augmentation == 0:
            y, x = pair.offset
            np.testing.assert_array_equal(pair.lr, degrade(hr, spec).data[:, y:y + 8, x:x + 8])
            np.testing.assert_array_equal(pair.hr, hr.data[:, 2 * y:2 * y + 16, 2 * x:2 * x + 16])
            return
    pytest.fail("no unaugmented sample drawn")


def test_patch_pairs_are_degradation_consistent():
    hr = random_image(9, 48, 48)
    spec = DegradationSpec("BI", 2)
    full_lr = degrade(hr, spec).data
    rng = np.random.default_rng(1)
    for _ in range(20):
        pair = sample_patch_pair(hr, spec, 10, rng, lr=degrade(hr, spec))
        y, x = pair.offset
        undo = [c for c in range(8) if compose_dihedral(pair.augmentation, c) == 0][0]
        np.testing.assert_array_equal(apply_dihedral(pair.lr, undo), full_lr[:, y:y + 10, x:x + 10])
        np.testing.assert_array_equal(apply_dihedral(pair.hr, undo), hr.data[:, 2 * y:2 * y + 20, 2 * x:2 * x + 20])


def test_patch_too_large_raises():
    with pytest.raises(SamplingError):
        sample_patch_pair(random_image(10, 20, 20), DegradationSpec("BI", 2), 48, np.random.default_rng(0))


def test_png_round_trip(tmp_path):
    img = ImageRGB(np.random.default_rng(11).integers(0, 256, size=(3, 9, 7)).astype(float))
    write_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(read_png(tmp_path / "a.png").data, img.data)


def test_degradation_deterministic():
    img = random_image(12)
    for kind in "BI", "BD", "DN":
        spec = DegradationSpec(kind, 2, 42)
        assert degrade(img, spec).data.tobytes() == degrade(img, spec).data.tobytes()
