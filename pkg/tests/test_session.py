import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazepref.cnn import init_state, reference_spec, save_weights
from gazepref.imaging import GrayImage, iter_pnm, write_pnm
from gazepref.session import (FrameDecodeError, FrameRecord, SamplerConfig, benchmark,
                              benchmark_pipeline, classify_frame, classify_stream, sample_frames,
                              summarize)


@pytest.fixture(scope="module")
def state():
    return init_state(reference_spec(3), 0)


def blank(v=128, size=64):
    return GrayImage(np.full((size, size), v, np.uint8))


# -- sampler ----------------------------------------------------------------

def test_sampler_reference_video():
    idx = sample_frames(1810, SamplerConfig(300, 15))
    assert len(idx) == 101 and idx[0] == 300 and idx[-1] == 1800


def test_sampler_edges():
    assert sample_frames(300) == []
    assert sample_frames(301) == [300]
    assert sample_frames(7, SamplerConfig(0, 1)) == list(range(7))
    with pytest.raises(ValueError):
        sample_frames(0)
    with pytest.raises(ValueError):
        SamplerConfig(-1, 15)
    with pytest.raises(ValueError):
        SamplerConfig(0, 0)


@given(st.integers(1, 3000), st.integers(0, 400), st.integers(1, 40))
def test_sampler_agrees_with_keeps(total, skip, stride):
    cfg = SamplerConfig(skip, stride)
    assert sample_frames(total, cfg) == [i for i in range(total) if cfg.keeps(i)]


# -- per-frame classification -----------------------------------------------

def test_face_frame_is_classified(face_model, eye_model, state, face_frame):
    rec = classify_frame(face_model, eye_model, state, face_frame, 3)
    assert rec.accepted and rec.reason is None and rec.label in (0, 1, 2)
    assert sum(rec.probs) == pytest.approx(1.0, abs=1e-6)
    assert rec.to_dict()["frame"] == 3


def test_blank_stream(face_model, eye_model, state):
    recs = classify_stream(face_model, eye_model, state, [blank() for _ in range(10)],
                           SamplerConfig(2, 3))
    assert [r.index for r in recs] == [2, 5, 8]
    assert all(not r.accepted and r.reason == "no_face" for r in recs)
    rep = summarize(recs)
    assert rep.preference_ratio is None and rep.ratio_reason == "no accepted frames"
    assert rep.rejected == {"no_face": 3}


def test_decode_error_keeps_records(face_model, eye_model, state):
    buf = io.BytesIO(b"".join(write_pnm(blank()) for _ in range(3)) + b"P5\n64 64\n255\n\x00")
    with pytest.raises(FrameDecodeError) as ei:
        classify_stream(face_model, eye_model, state, iter_pnm(buf), SamplerConfig(0, 1))
    assert ei.value.frame == 3 and "frame 3" in str(ei.value)
    assert [r.index for r in ei.value.records] == [0, 1, 2]


def test_state_not_mutated(face_model, eye_model, state, face_frame):
    before = save_weights(state)
    classify_stream(face_model, eye_model, state, [face_frame, blank()], SamplerConfig(0, 1))
    assert save_weights(state) == before


def test_record_invariant():
    with pytest.raises(ValueError):
        FrameRecord(0, True)
    with pytest.raises(ValueError):
        FrameRecord(0, False, "no_face", label=1)


# -- summaries --------------------------------------------------------------

def recs(counts, rejected=0):
    out = [FrameRecord(i, True, None, c, (1.0, 0.0, 0.0), 1.0)
           for i, c in enumerate(c for c, n in enumerate(counts) for _ in range(n))]
    return out + [FrameRecord(100 + i, False, "no_face", latency_ms=1.0) for i in range(rejected)]


def test_ratio_examples():
    rep = summarize(recs([6, 6, 3]))
    assert rep.preference_ratio == 0.5
    assert rep.proportions == pytest.approx({0: 0.4, 1: 0.4, 2: 0.2})
    assert summarize(recs([0, 5, 0])).preference_ratio == 1.0
    assert summarize(recs([4, 0, 0])).preference_ratio == 0.0
    only2 = summarize(recs([0, 0, 4]))
    assert only2.preference_ratio is None and only2.ratio_reason == "no class 0 or class 1 frames"
    assert summarize([]).ratio_reason == "no accepted frames"


def test_report_outputs():
    rep = summarize(recs([2, 1, 1], rejected=2))
    d = json.loads(rep.to_json())
    assert d["sampled"] == 6 and d["accepted"] == 4 and d["rejected"] == {"no_face": 2}
    assert d["preference_ratio"] == pytest.approx(1 / 3) and len(d["frames"]) == 6
    text = rep.to_text()
    assert "frames sampled      6" in text and "(right       )" in text
    assert "preference ratio    0.3333" in text


@given(st.lists(st.integers(0, 2), max_size=50), st.integers(0, 10))
def test_summary_conservation(labels, nrej):
    rep = summarize(recs(np.bincount(labels, minlength=3).tolist(), nrej))
    assert rep.sampled == len(labels) + nrej
    assert rep.accepted == len(labels)
    if labels:
        assert sum(rep.proportions.values()) == pytest.approx(1.0)


# -- timing -----------------------------------------------------------------

def test_benchmark(state):
    lat = benchmark(state, 30)
    assert len(lat.samples) == 30 and lat.median_ms > 0 and lat.p95_ms >= lat.median_ms
    with pytest.raises(ValueError):
        benchmark(state, 29)


def test_benchmark_pipeline(face_model, eye_model, state, face_frame):
    lat = benchmark_pipeline(face_model, eye_model, state, face_frame, 3)
    assert len(lat.samples) == 3
