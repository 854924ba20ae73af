import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazepref.cascade import FaceLandmarks, Rejection
from gazepref.composer import (CompositionError, PairEyeImage, compose_pair, expand_rect,
                               quality_gate)
from gazepref.imaging import GrayImage, Rect, crop, resize


def frame_with_eyes():
    rng = np.random.default_rng(3)
    px = rng.integers(0, 256, (120, 160), dtype=np.uint8)
    lm = FaceLandmarks(Rect(20, 10, 120, 100), Rect(40, 40, 30, 16), Rect(90, 42, 30, 16))
    return GrayImage(px), lm


def test_pair_image_is_72_square():
    with pytest.raises(CompositionError):
        PairEyeImage(GrayImage(np.zeros((72, 71), np.uint8)))
    p = PairEyeImage(GrayImage(np.zeros((72, 72), np.uint8)), "000315", "P007")
    assert p.file_name(1) == "P007_000315_1.pgm"


def test_uniform_eyes_give_uniform_pair():
    frame = GrayImage(np.full((100, 100), 128, np.uint8))
    lm = FaceLandmarks(Rect(0, 0, 100, 100), Rect(10, 20, 30, 15), Rect(55, 20, 30, 15))
    out = compose_pair(frame, lm)
    assert out.pixels.shape == (72, 72) and (out.pixels == 128).all()


def test_halves_recomputed_independently():
    frame, lm = frame_with_eyes()
    out = compose_pair(frame, lm, "12", "P1")
    for eye, half in ((lm.left_eye, out.pixels[:36]), (lm.right_eye, out.pixels[36:])):
        # 10% margin: 3 px on 30 px, 2 px on 16 px (1.6 rounds half up)
        box = Rect(eye.x - 3, eye.y - 2, eye.w + 6, eye.h + 4)
        assert np.array_equal(half, resize(crop(frame, box), 72, 36).pixels)
    assert (out.frame_id, out.person_id) == ("12", "P1")


def test_swapping_eyes_swaps_halves():
    frame, lm = frame_with_eyes()
    a = compose_pair(frame, lm).pixels
    b = compose_pair(frame, FaceLandmarks(lm.face, lm.right_eye, lm.left_eye)).pixels
    assert np.array_equal(a[:36], b[36:]) and np.array_equal(a[36:], b[:36])


def test_margin_clamped_to_frame():
    assert expand_rect(Rect(0, 0, 30, 20), 32, 21) == Rect(0, 0, 32, 21)
    with pytest.raises(CompositionError):
        expand_rect(Rect(200, 200, 10, 10), 100, 100)


@given(st.integers(0, 60), st.integers(0, 60), st.integers(1, 40), st.integers(1, 40))
def test_any_inside_rect_composes_to_72(x, y, w, h):
    frame = GrayImage(np.random.default_rng(x * 61 + y).integers(0, 256, (100, 100),
                                                                   dtype=np.uint8))
    lm = FaceLandmarks(Rect(0, 0, 100, 100), Rect(x, y, w, h), Rect(x, y, w, h))
    out = compose_pair(frame, lm)
    assert out.pixels.shape == (72, 72)
    assert np.array_equal(out.pixels[:36], out.pixels[36:])
    assert np.array_equal(compose_pair(frame, lm).pixels, out.pixels)


def test_quality_gate():
    assert quality_gate(Rejection("no_face")) == quality_gate(Rejection("no_face"))
    assert quality_gate(Rejection("no_face")).reason == "no_face"
    face = Rect(0, 0, 200, 200)
    small = FaceLandmarks(face, Rect(10, 10, 23, 12), Rect(100, 10, 30, 15))
    assert quality_gate(small).reason == "eye_too_small"
    short = FaceLandmarks(face, Rect(10, 10, 30, 11), Rect(100, 10, 30, 15))
    assert quality_gate(short).reason == "eye_too_small"
    ok = FaceLandmarks(face, Rect(10, 10, 30, 15), Rect(100, 10, 30, 15))
    assert quality_gate(ok).accepted and quality_gate(ok).reason is None
    edge = FaceLandmarks(face, Rect(10, 10, 24, 12), Rect(100, 10, 24, 12))
    assert quality_gate(edge).accepted


def test_real_frame_composes(face_model, eye_model, face_gray):
    from gazepref.cascade import detect_face_then_eyes
    lm = detect_face_then_eyes(face_model, eye_model, face_gray)
    assert quality_gate(lm).accepted
    out = compose_pair(face_gray, lm)
    assert out.pixels.shape == (72, 72)
    # eye crops: dark pupils/lashes on lighter skin, so plenty of contrast
    assert out.pixels.std() > 15
