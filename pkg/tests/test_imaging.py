import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from scribblesod import imaging as im


def test_png_roundtrip_rgb(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(7, 9, 3)).astype(np.uint8)
    im.save_png(arr, tmp_path / "a.png")
    back = im.load_png(tmp_path / "a.png")
    np.testing.assert_array_equal(im.to_uint8(back), arr)


def test_png_roundtrip_gray(tmp_path):
    arr = np.arange(256, dtype=np.uint8).reshape(16, 16)
    im.save_png(arr, tmp_path / "g.png")
    np.testing.assert_array_equal(im.to_uint8(im.load_png(tmp_path / "g.png")), arr)


def test_png_black_pixel(tmp_path):
    im.save_png(np.zeros((1, 1, 3)), tmp_path / "b.png")
    assert im.load_png(tmp_path / "b.png").max() == 0.0


def test_png_truncated(tmp_path):
    im.save_png(np.full((20, 20, 3), 0.3), tmp_path / "t.png")
    data = (tmp_path / "t.png").read_bytes()
    (tmp_path / "t.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(im.ImageIOError, match="malformed"):
        im.load_png(tmp_path / "t.png")


def test_png_missing(tmp_path):
    with pytest.raises(im.ImageIOError, match="missing.png"):
        im.load_png(tmp_path / "missing.png")


def test_png_unsupported_depth(tmp_path):
    from PIL import Image
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(im.ImageIOError, match="unsupported"):
        im.load_png(tmp_path / "d.png")


# ---------------------------------------------------------------- Lab

def test_lab_white():
    np.testing.assert_allclose(im.srgb_to_lab(np.ones(3)), [100, 0, 0], atol=0.01)


def test_lab_black():
    np.testing.assert_allclose(im.srgb_to_lab(np.zeros(3)), [0, 0, 0], atol=1e-12)


def test_lab_mid_gray():
    # reference: sRGB 0.5 -> linear 0.21404 -> Y^(1/3) -> L = 116 f - 16
    lin = ((0.5 + 0.055) / 1.055) ** 2.4
    L_ref = 116 * lin ** (1 / 3) - 16
    lab = im.srgb_to_lab(np.full(3, 0.5))
    assert L_ref == pytest.approx(53.389, abs=1e-3)
    assert lab[0] == pytest.approx(L_ref, abs=1e-3)
    assert abs(lab[1]) < 1e-3 and abs(lab[2]) < 1e-3


def test_lab_roundtrip_grid():
    g = np.linspace(0, 1, 18)
    rgb = np.array(list(itertools.product(g, g, g)))
    back = im.lab_to_srgb(im.srgb_to_lab(rgb))
    assert np.abs(back - rgb).max() < 1e-3


# ---------------------------------------------------------------- skeleton

def no_blocks(sk):
    return not (sk[:-1, :-1] & sk[1:, :-1] & sk[:-1, 1:] & sk[1:, 1:]).any()


def test_skeleton_thin_line_unchanged():
    m = np.zeros((5, 12), np.uint8)
    m[2, 1:11] = 1
    np.testing.assert_array_equal(im.skeletonize(m), m)


def test_skeleton_bar():
    m = np.zeros((9, 26), np.uint8)
    m[3:6, 3:23] = 1
    sk = im.skeletonize(m)
    assert (sk <= m).all()
    assert sk.sum(axis=0).max() == 1  # width one
    assert 15 <= sk.sum() <= 20
    assert set(np.nonzero(sk)[0]) == {4}


def test_skeleton_empty():
    assert not im.skeletonize(np.zeros((6, 6), np.uint8)).any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, (14, 14), elements=st.integers(0, 1)))
def test_skeleton_properties(m):
    m = ndimage.binary_closing(m, structure=np.ones((2, 2))).astype(np.uint8)
    sk = im.skeletonize(m)
    assert (sk <= m).all()
    assert no_blocks(sk)
    _, n_in = im.label_components(m)
    _, n_out = im.label_components(sk)
    assert n_in == n_out


def test_skeleton_pure():
    m = np.zeros((20, 20), np.uint8)
    m[4:16, 5:13] = 1
    assert im.skeletonize(m).tobytes() == im.skeletonize(m).tobytes()


# ---------------------------------------------------------------- blur

@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.7])
def test_blur_constant(sigma):
    img = np.full((9, 11, 3), 0.37)
    np.testing.assert_allclose(im.gaussian_blur(img, sigma), img, atol=1e-15)


def test_blur_impulse():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    out = im.gaussian_blur(img, 1.0)
    x = np.arange(-3, 4)
    g = np.exp(-x ** 2 / 2)
    peak = (1 / g.sum()) ** 2
    assert out[7, 7] == pytest.approx(peak, abs=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    assert im.gaussian_kernel1d(1.3).sum() == pytest.approx(1.0, abs=1e-12)


def test_blur_semigroup():
    rng = np.random.default_rng(3)
    img = ndimage.zoom(rng.random((8, 8)), 6, order=1)
    a = im.gaussian_blur(im.gaussian_blur(img, 1.0), 1.0)
    b = im.gaussian_blur(img, np.sqrt(2.0))
    assert np.abs(a - b)[8:-8, 8:-8].max() < 1e-3


def test_blur_bad_sigma():
    with pytest.raises(ValueError):
        im.gaussian_blur(np.zeros((3, 3)), 0.0)


# ---------------------------------------------------------------- flips

def test_flip_horizontal():
    a = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(im.flip(a, "horizontal"), [[2, 1], [4, 3]])


@given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)))
def test_flip_involution_and_composition(a):
    for mode in ("horizontal", "vertical", "both"):
        np.testing.assert_array_equal(im.flip(im.flip(a, mode), mode), a)
    np.testing.assert_array_equal(im.flip(a, "both"), im.flip(im.flip(a, "horizontal"), "vertical"))


# ---------------------------------------------------------------- window statistics

def test_variance_constant():
    lab = np.full((20, 20, 3), 5.0)
    assert all(im.local_patch_variance(lab, (r, c)) == 0 for r in (0, 7, 19) for c in (0, 10, 19))


def test_variance_two_tone():
    lab = np.zeros((15, 15, 3))
    lab[:, 8:] = [10.0, 4.0, -2.0]
    # 15x15 window centred at (7,7) covers it all: 7 columns of zeros, 8 of the tone
    p = 8 / 15
    expected = sum(v * v * p * (1 - p) for v in (10.0, 4.0, -2.0))
    assert im.local_patch_variance(lab, (7, 7)) == pytest.approx(expected)


def test_variance_corner_clipped():
    rng = np.random.default_rng(1)
    lab = rng.normal(size=(30, 30, 3))
    support = lab[0:8, 0:8].reshape(-1, 3)
    assert im.local_patch_variance(lab, (0, 0)) == pytest.approx(support.var(axis=0).sum())


def test_variance_map_matches_direct():
    rng = np.random.default_rng(2)
    lab = rng.normal(size=(18, 23, 3))
    vm = im.local_variance_map(lab, 15)
    for r in range(0, 18, 3):
        for c in range(0, 23, 4):
            assert vm[r, c] == pytest.approx(im.local_patch_variance(lab, (r, c)), rel=1e-9, abs=1e-9)


def test_similarity():
    rng = np.random.default_rng(4)
    lab = rng.normal(size=(30, 30, 3))
    assert im.patch_similarity(lab, (10, 10), (10, 10)) == 0.0
    assert im.patch_similarity(np.ones((30, 30, 3)), (3, 4), (20, 25)) == 0.0
    a, b = (10, 10), (15, 18)
    diffs = [((lab[a[0] + dy, a[1] + dx] - lab[b[0] + dy, b[1] + dx]) ** 2).sum()
             for dy in range(-7, 8) for dx in range(-7, 8)
             if 0 <= b[0] + dy < 30 and 0 <= b[1] + dx < 30 and 0 <= a[0] + dy < 30 and 0 <= a[1] + dx < 30]
    assert im.patch_similarity(lab, a, b) == pytest.approx(np.mean(diffs))
