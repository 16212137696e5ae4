import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssmn import imaging


def test_edt_matches_quadratic_oracle_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mask = rng.uniform(size=(40, 33)) < rng.uniform(0.001, 0.1)
        mask[rng.integers(40), rng.integers(33)] = True
        np.testing.assert_allclose(imaging.edt(mask), imaging.brute_force_edt(mask), atol=1e-9)


def test_edt_single_pixel_three_four_five():
    mask = np.zeros((10, 10), dtype=bool)
    mask[0, 0] = True
    d = imaging.edt(mask)
    assert d[3, 4] == 5.0 and d[4, 3] == 5.0
    assert d[0, 0] == 0.0


def test_edt_rejects_empty_mask():
    with pytest.raises(ValueError):
        imaging.edt(np.zeros((4, 4), dtype=bool))


@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_edt_property(h, w, data):
    r, c = data.draw(st.integers(0, h - 1)), data.draw(st.integers(0, w - 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[r, c] = True
    extra = data.draw(st.lists(st.tuples(st.integers(0, h - 1), st.integers(0, w - 1)), max_size=5))
    for rr, cc in extra:
        mask[rr, cc] = True
    np.testing.assert_allclose(imaging.edt(mask), imaging.brute_force_edt(mask), atol=1e-9)


def test_distance_transform_is_clipped_and_scaled():
    mask = np.zeros((20, 20), dtype=bool)
    mask[0, 0] = True
    d = imaging.distance_transform(mask, 0.2)
    assert d.max() == 1.0 and d[0, 0] == 0.0
    assert d[0, 2] == pytest.approx(2 / 4)


def test_binarize_threshold():
    img = np.array([[0.0, 0.97, 0.98, 1.0]])
    assert imaging.binarize(img).tolist() == [[True, True, False, False]]
    with pytest.raises(ValueError):
        imaging.binarize(img, 1.0)
    with pytest.raises(ValueError):
        imaging.binarize(np.array([[2.0]]))


def test_luminance_weights():
    rgb = np.zeros((1, 3, 3))
    rgb[0, 0, 0] = rgb[0, 1, 1] = rgb[0, 2, 2] = 1.0
    np.testing.assert_allclose(imaging.luminance(rgb)[0], [0.299, 0.587, 0.114])


def test_patch_corner_by_hand():
    # 4x4 ramp, 2x2 crop (fraction 0.5) resampled to 2x2 centered on the image:
    # samples fall exactly on pixel centres (1,1),(1,2),(2,1),(2,2)
    img = np.arange(16, dtype=float).reshape(4, 4) / 15
    patch = imaging.extract_patch(img, (0.5, 0.5), 0.5, 2)
    np.testing.assert_allclose(patch * 15, [[5, 6], [9, 10]])
    # at the top-left corner samples clamp to the border
    corner = imaging.extract_patch(img, (0.0, 0.0), 0.5, 2)
    np.testing.assert_allclose(corner * 15, [[0, 0], [0, 0]])


def test_patch_translation_consistency():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(64, 64))
    shifted = np.roll(img, (3, 5), axis=(0, 1))
    a = imaging.extract_patch(img, (0.4, 0.45), 0.25, 16)
    b = imaging.extract_patch(shifted, (0.4 + 5 / 64, 0.45 + 3 / 64), 0.25, 16)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_patch_rejects_outside_center():
    with pytest.raises(ValueError):
        imaging.extract_patch(np.ones((8, 8)), (1.2, 0.5))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(7, 11)).astype(float) / 255
    imaging.write_pgm(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n11 7\n255\n")
    np.testing.assert_allclose(imaging.read_pgm(tmp_path / "a.pgm"), img, atol=1e-12)


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        imaging.read_pgm(tmp_path / "x.pgm")
