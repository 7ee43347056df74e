import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handgen.data.crop import BBox, BBoxError, crop_local, square_crop_window


def affine_oracle(bbox: BBox, out_size: int):
    """Global->local map for a square box with no margin: shift, then scale."""
    s = out_size / bbox.w
    return lambda p: (np.asarray(p, float) - [bbox.x, bbox.y]) * s


def test_full_image_bbox_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((3, 64, 64)).astype(np.float32)
    out, tf = crop_local(img, BBox(0, 0, 64, 64), 64, margin=0.0)
    assert tf.scale == 1.0
    assert np.allclose(out, img, atol=1e-6)


def test_full_image_bbox_identity_with_margin_clamped():
    img = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
    out, _ = crop_local(img, BBox(0, 0, 64, 64), 64)
    assert np.allclose(out, img, atol=1e-6)


def test_quarter_box_on_512_maps_like_affine_oracle():
    bbox = BBox(128, 128, 256, 256)
    img = np.zeros((1, 512, 512), np.float32)
    _, tf = crop_local(img, bbox, 512, margin=0.0)
    oracle = affine_oracle(bbox, 512)
    assert tf.scale == pytest.approx(2.0)
    assert np.allclose(tf.to_local([128, 128]), [0, 0])
    for p in ([128, 128], [384, 384], [200.5, 300.25]):
        assert np.allclose(tf.to_local(p), oracle(p))


def test_crop_content_matches_region():
    img = np.zeros((1, 64, 64), np.float32)
    img[0, 16:48, 16:48] = 1.0
    out, _ = crop_local(img, BBox(16, 16, 32, 32), 32, margin=0.0)
    assert np.allclose(out, 1.0)


@pytest.mark.parametrize("w,h", [(0, 10), (10, 0), (-1, 5)])
def test_degenerate_bbox_rejected(w, h):
    with pytest.raises(BBoxError):
        BBox(5, 5, w, h)


def test_margin_expands_square():
    tf = square_crop_window(BBox(20, 20, 10, 20), 64, margin=0.15)
    assert tf.side == pytest.approx(20 * 1.3)
    # centred on the box
    assert tf.origin_x + tf.side / 2 == pytest.approx(25)
    assert tf.origin_y + tf.side / 2 == pytest.approx(30)


def test_window_shifted_inside_image():
    tf = square_crop_window(BBox(0, 50, 10, 14), 64)
    assert tf.origin_x >= 0 and tf.origin_y + tf.side <= 64


boxes = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(2, 40), st.floats(2, 40)
).filter(lambda b: b[0] + b[2] <= 64 and b[1] + b[3] <= 64)


@settings(max_examples=100, deadline=None)
@given(boxes, st.integers(0, 63), st.integers(0, 63), st.floats(0.0, 0.3))
def test_local_global_round_trip(b, u, v, margin):
    tf = square_crop_window(BBox(*b), 64, margin, 64)
    local = np.array([u + 0.5, v + 0.5])
    back = tf.to_local(tf.to_global(local))
    assert np.all(np.abs(back - local) <= 1.0)
    assert np.allclose(back, local, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(boxes, st.floats(0.0, 0.3))
def test_bbox_inside_window(b, margin):
    bbox = BBox(*b)
    tf = square_crop_window(bbox, 64, margin)
    assert 0 <= tf.origin_x and tf.origin_x + tf.side <= 64 + 1e-9
    corners = tf.to_local([[bbox.x, bbox.y], [bbox.x + bbox.w, bbox.y + bbox.h]])
    assert np.all(corners >= -1e-9) and np.all(corners <= 64 + 1e-9)
