import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthforge import features
from depthforge.features import FeatureConfig

CFG16 = FeatureConfig(hog_cell=4)


def random_images(n=100, size=16, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size))


def test_vectorised_extractors_match_loop_references():
    for img in random_images():
        np.testing.assert_array_equal(features.lbp_codes(img), features.lbp_codes_reference(img))
        np.testing.assert_allclose(features.hog(img, CFG16), features.hog_reference(img, CFG16), rtol=0, atol=1e-6)
        np.testing.assert_allclose(features.sobel_magnitude(img), features.sobel_magnitude_reference(img),
                                   rtol=0, atol=1e-6)


def test_quantised_images_also_match_references():
    # 8-bit levels create many exact neighbour ties, the edge case for ">=".
    for img in np.round(random_images(20, seed=1) * 4) / 4:
        np.testing.assert_array_equal(features.lbp_codes(img), features.lbp_codes_reference(img))


def test_flat_image_descriptors():
    flat = np.full((16, 16), 0.5)
    assert np.all(features.hog(flat, CFG16) == 0)
    lbp = features.lbp_hist(flat)
    assert lbp.max() == 1.0
    assert features.lbp_codes(flat).ravel().tolist() == [255] * 196
    assert features.sobel_hist(flat)[0] == 1.0
    ih = features.intensity_hist(flat)
    assert ih[32] == 1.0


def test_vertical_edge_votes_in_horizontal_gradient_bin():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0
    cells = features.hog_cells(img, CFG16)
    assert cells[..., 0].sum() / cells.sum() >= 0.8


def test_sobel_step_response_matches_hand_computation():
    img = np.zeros((5, 5))
    img[:, 3:] = 1.0
    mag = features.sobel_magnitude(img)
    # Columns 2 and 3 straddle the step: |gx| = 1 + 2 + 1 = 4, gy = 0.
    np.testing.assert_allclose(mag[:, 2], 4 / (4 * np.sqrt(2)))
    np.testing.assert_allclose(mag[:, 3], 4 / (4 * np.sqrt(2)))
    np.testing.assert_allclose(mag[:, [0, 1, 4]], 0)


def test_two_valued_intensity_histogram():
    img = np.zeros((8, 8))
    img[:, 4:] = 1.0
    h = features.intensity_hist(img)
    assert h[0] == 0.5 and h[-1] == 0.5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-0.2, 0.2))
def test_lbp_is_invariant_to_additive_shift(seed, shift):
    img = np.random.default_rng(seed).uniform(0.25, 0.75, (12, 12))
    np.testing.assert_array_equal(features.lbp_hist(img), features.lbp_hist(img + shift))


def test_uniform_table_has_58_patterns_plus_catch_all():
    table = features.uniform_table(8)
    assert len(set(table.tolist())) == 59
    assert np.bincount(table)[-1] == 256 - 58


def test_fused_vector_layout_and_segment_sums():
    img = random_images(1, 64, seed=4)[0]
    fv = features.fuse(img)
    assert len(fv.values) == 1951 == 1764 + 59 + 64 + 64
    assert features.hog_length(64) == 1764
    offsets = sorted(fv.spans.values())
    assert offsets[0][0] == 0
    assert all(a[0] + a[1] == b[0] for a, b in zip(offsets, offsets[1:]))
    for name in ("lbp", "sobel", "intensity"):
        seg = fv.segment(name)
        assert np.all(seg >= 0)
        assert seg.sum() == pytest.approx(1.0, abs=1e-6)
    h = fv.segment("hog")
    assert h.min() >= 0 and h.max() <= 1
    np.testing.assert_array_equal(features.fuse(img).values, fv.values)


def test_extract_is_order_independent():
    imgs = random_images(5, 32, seed=5)
    X, _ = features.extract(imgs)
    Xr, _ = features.extract(imgs[::-1])
    np.testing.assert_array_equal(X, Xr[::-1])


def test_features_csv_round_trip(tmp_path):
    imgs = random_images(4, 32, seed=6)
    X, spans = features.extract(imgs)
    labels = np.array([0, 2, 1, 0])
    classes = ["neutral", "happy", "fear"]
    features.write_features_csv(tmp_path / "f.csv", X, labels, spans, classes)
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["label", "hog_0"]
    X2, y2, spans2 = features.read_features_csv(tmp_path / "f.csv", classes)
    np.testing.assert_array_equal(X2, X)
    np.testing.assert_array_equal(y2, labels)
    assert spans2 == spans


def test_size_and_config_errors():
    with pytest.raises(ValueError, match="HOG block"):
        features.hog(np.zeros((8, 8)))
    with pytest.raises(ValueError, match="features.sobel_bins"):
        FeatureConfig(sobel_bins=1)
