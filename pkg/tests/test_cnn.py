import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gazepref.cnn import (BatchStream, Conv, Dropout, Fc, LayerParams, MaxPool, NetworkSpec, Relu,
                          SoftmaxOut, SpecError, TrainConfig, WeightsChecksumError, WeightsError,
                          WeightsMagicError, WeightsShapeError, backward, forward, init_state,
                          load_weights, param_count, param_shapes, predict, predict_batch,
                          reference_spec, save_weights, sgd_step, train, zero_state)
from gazepref.cnn import layers as L
from gazepref.dataset import synth_generate

from oracles import gradient_check, naive_conv, naive_maxpool

TINY = NetworkSpec((Conv(2, 3), Relu(), MaxPool(2, 2), Fc(8), Relu(), SoftmaxOut(3)),
                   input_shape=(1, 12, 12))


# -- specs ------------------------------------------------------------------

def test_reference_param_counts():
    assert param_count(reference_spec(3)) == 63_233
    assert param_count(reference_spec(2)) == 63_112
    assert 51_000 <= param_count(reference_spec(3)) <= 69_000


def test_reference_shape_chain():
    assert reference_spec(3).shapes() == [(6, 68, 68), (6, 68, 68), (6, 22, 22), (14, 18, 18),
                                          (14, 18, 18), (14, 6, 6), (14, 6, 6), (120,), (120,),
                                          (3,)]
    probs, _ = forward(zero_state(reference_spec(3)), np.zeros((2, 1, 72, 72), np.float32))
    assert probs.shape == (2, 3)


def test_param_count_small_specs():
    assert param_count(NetworkSpec((SoftmaxOut(3),), input_shape=(10,))) == 33
    spec = NetworkSpec((MaxPool(2, 2), Relu(), SoftmaxOut(2)), input_shape=(1, 4, 4))
    assert param_shapes(spec)[:2] == [None, None]
    assert param_count(spec) == 4 * 2 + 2


def test_spec_errors():
    with pytest.raises(SpecError):
        NetworkSpec((Conv(2, 9), SoftmaxOut(3)), input_shape=(1, 8, 8))
    with pytest.raises(SpecError):
        NetworkSpec((Conv(2, 3), Relu()), input_shape=(1, 8, 8))
    with pytest.raises(SpecError):
        reference_spec(4)


# -- forward ----------------------------------------------------------------

def test_zero_network_is_uniform():
    for k in (2, 3):
        probs, _ = forward(zero_state(reference_spec(k)), np.zeros((1, 1, 72, 72), np.float32))
        np.testing.assert_allclose(probs, 1.0 / k, atol=1e-7)
        assert predict(zero_state(reference_spec(k)), np.zeros((72, 72), np.uint8))[0] == 0


def test_infer_is_deterministic():
    st8 = init_state(reference_spec(3), 4)
    x = np.random.default_rng(0).random((3, 1, 72, 72), dtype=np.float32)
    a, _ = forward(st8, x)
    b, _ = forward(st8, x)
    assert a.tobytes() == b.tobytes()


def test_identity_1x1_conv():
    spec = NetworkSpec((Conv(1, 1), SoftmaxOut(2)), input_shape=(1, 5, 5))
    s = zero_state(spec)
    s.params[0].w[...] = 1.0
    x = np.random.default_rng(1).random((2, 1, 5, 5), dtype=np.float32)
    _, cache = forward(s, x)
    feat = cache.entries[1][0]  # flattened input of the output layer
    np.testing.assert_array_equal(feat, x.reshape(2, -1))


@given(arrays(np.float32, (4, 1, 12, 12), elements=st.floats(-50, 50, width=32)),
       st.integers(0, 2**16))
def test_softmax_rows(x, seed):
    probs, _ = forward(init_state(TINY, seed), x)
    assert np.all((probs >= 0) & (probs <= 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("direct", [True, False])
@pytest.mark.parametrize("c,k", [(1, 5), (3, 3), (6, 5)])
def test_conv_matches_loop_oracle(monkeypatch, direct, c, k):
    monkeypatch.setattr(L, "DIRECT_TAPS", 10**6 if direct else 0)
    rng = np.random.default_rng(c * k)
    x = rng.standard_normal((2, c, 11, 9))
    w = rng.standard_normal((4, c, k, k))
    b = rng.standard_normal(4)
    out, cache = L.conv_forward(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), w, b, 1)
    np.testing.assert_allclose(out.transpose(1, 0, 2, 3), naive_conv(x, w, b), atol=1e-10)
    assert (cache[1] is None) == direct


def test_conv_backward_paths_agree(monkeypatch):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 10, 10))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    res = []
    for taps in (10**6, 0):
        monkeypatch.setattr(L, "DIRECT_TAPS", taps)
        out, cache = L.conv_forward(x, w, b, 1)
        dout = np.random.default_rng(6).standard_normal(out.shape)
        res.append(L.conv_backward(dout, cache, w))
    for a, c in zip(res[0], res[1]):
        np.testing.assert_allclose(a, c, atol=1e-10)


def test_maxpool_matches_oracle_and_routes_exactly():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 5, (2, 3, 9, 9)).astype(np.float64)  # many ties
    out, cache = L.maxpool_forward(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), 3, 3)
    np.testing.assert_array_equal(out.transpose(1, 0, 2, 3), naive_maxpool(x, 3, 3))
    dout = rng.integers(1, 100, out.shape).astype(np.float64)
    dx = L.maxpool_backward(dout, cache)
    assert dx.sum() == dout.sum()
    xc = x.transpose(1, 0, 2, 3)
    for yy in range(3):
        for zz in range(3):
            win = dx[:, :, 3 * yy:3 * yy + 3, 3 * zz:3 * zz + 3]
            assert ((win != 0).sum(axis=(2, 3)) == 1).all()
            np.testing.assert_array_equal(win.sum(axis=(2, 3)), dout[:, :, yy, zz])
            # the routed position is a maximum of its window
            picked = np.where(win != 0, xc[:, :, 3 * yy:3 * yy + 3, 3 * zz:3 * zz + 3], -1)
            np.testing.assert_array_equal(picked.max(axis=(2, 3)), out[:, :, yy, zz])


def test_inverted_dropout_expectation():
    rng = np.random.default_rng(3)
    x = rng.random(504) + 0.1
    acc = np.zeros_like(x)
    for _ in range(1000):
        acc += L.dropout_forward(x, 0.5, rng)[0]
    mean = acc / 1000
    assert abs(mean.sum() - x.sum()) / x.sum() < 0.02


def test_dropout_only_in_train_mode():
    spec = reference_spec(3, dropout=0.5)
    s = init_state(spec, 1)
    x = np.random.default_rng(0).random((2, 1, 72, 72), dtype=np.float32)
    a, _ = forward(s, x, "infer")
    b, _ = forward(s, x, "train", np.random.default_rng(0))
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        forward(s, x, "train")
    with pytest.raises(ValueError):
        forward(s, np.zeros((1, 1, 70, 72), np.float32))


# -- backward ---------------------------------------------------------------

def test_label_errors():
    s = init_state(TINY, 0)
    _, cache = forward(s, np.zeros((2, 1, 12, 12)), "train")
    with pytest.raises(ValueError):
        backward(cache, [0, 3])
    with pytest.raises(ValueError):
        backward(cache, [0])


def test_confident_correct_sample_has_no_output_signal():
    spec = NetworkSpec((SoftmaxOut(3),), input_shape=(4,))
    s = zero_state(spec, np.float64)
    s.params[0].b[...] = [0.0, 800.0, 0.0]  # probability of class 1 rounds to exactly 1
    _, cache = forward(s, np.ones((1, 4)), "train")
    g = backward(cache, [1])[0]
    assert not g.w.any() and not g.b.any()


def test_duplicated_samples_keep_mean_gradient():
    s = init_state(TINY, 7, np.float64)
    x = np.random.default_rng(0).random((2, 1, 12, 12))
    _, c1 = forward(s, x, "train")
    g1 = backward(c1, [0, 2])
    _, c2 = forward(s, np.concatenate([x, x]), "train")
    g2 = backward(c2, [0, 2, 0, 2])
    for a, b in zip(g1, g2):
        if a is not None:
            np.testing.assert_allclose(a.w, b.w, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(a.b, b.b, rtol=1e-12, atol=1e-15)


def test_gradient_check_tiny():
    s = init_state(TINY, 11, np.float64)
    for p in s.params:
        if p is not None:
            p.b[...] = np.random.default_rng(1).uniform(-0.1, 0.1, p.b.shape)
    rng = np.random.default_rng(12)
    errs = gradient_check(s, rng.random((4, 1, 12, 12)), np.array([0, 1, 2, 1]))
    assert errs.size == param_count(TINY)
    assert np.mean(errs < 1e-4) >= 0.99
    assert errs.max() < 1e-3


# -- sgd --------------------------------------------------------------------

def _grads_like(s, value):
    return [None if p is None else LayerParams(np.full_like(p.w, value), np.full_like(p.b, value))
            for p in s.params]


def test_sgd_zero_lr_is_identity():
    s = init_state(TINY, 0)
    before = s.copy()
    sgd_step(s, _grads_like(s, 3.0), 0.0, 0.0)
    for a, b in zip(s.params, before.params):
        if a is not None:
            assert a.w.tobytes() == b.w.tobytes() and a.b.tobytes() == b.b.tobytes()


def test_sgd_vanilla():
    s = init_state(TINY, 0, np.float64)
    before = s.copy()
    g = [None if p is None else LayerParams(np.random.default_rng(0).random(p.w.shape),
                                            np.random.default_rng(1).random(p.b.shape))
         for p in s.params]
    sgd_step(s, g, 0.05, 0.0)
    for a, b, gg in zip(s.params, before.params, g):
        if a is not None:
            np.testing.assert_array_equal(a.w, b.w - 0.05 * gg.w)
            np.testing.assert_array_equal(a.b, b.b - 0.05 * gg.b)


def test_sgd_momentum_scalar_recurrence():
    spec = NetworkSpec((SoftmaxOut(2),), input_shape=(1,))
    s = zero_state(spec, np.float64)
    s.params[0].w[...] = 1.0
    g1, g2 = 0.5, -0.25
    sgd_step(s, _grads_like(s, g1), 0.1, 0.9)
    sgd_step(s, _grads_like(s, g2), 0.1, 0.9)
    v1 = -0.1 * g1
    w1 = 1.0 + v1
    v2 = 0.9 * v1 - 0.1 * g2
    assert s.params[0].w[0, 0] == pytest.approx(w1 + v2, abs=1e-15)
    assert s.velocity[0].w[0, 0] == pytest.approx(v2, abs=1e-15)


# -- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_set():
    return synth_generate(3, 200, persons=5)


def test_zero_iterations_returns_initial_state(small_set):
    s, rep = train(reference_spec(3), small_set, None, TrainConfig(iterations=0, seed=9))
    ref = init_state(reference_spec(3), 9)
    assert rep.losses == []
    for a, b in zip(s.params, ref.params):
        if a is not None:
            assert a.w.tobytes() == b.w.tobytes()


def test_loss_decreases(small_set):
    _, rep = train(reference_spec(3), small_set, None, TrainConfig(iterations=150))
    assert len(rep.losses) == 150 and np.isfinite(rep.losses).all()
    assert np.mean(rep.losses[:50]) > np.mean(rep.losses[-50:])


def test_same_seed_bit_identical(small_set):
    cfg = TrainConfig(iterations=20, seed=5, val_every=10)
    a, ra = train(reference_spec(3), small_set, small_set, cfg)
    b, rb = train(reference_spec(3), small_set, small_set, cfg)
    assert save_weights(a) == save_weights(b)
    assert ra.losses == rb.losses and len(ra.val_acc) == 2
    c, _ = train(reference_spec(3), small_set, None, TrainConfig(iterations=20, seed=6))
    assert save_weights(c) != save_weights(a)


def test_train_rejects_bad_inputs(small_set):
    with pytest.raises(ValueError):
        train(reference_spec(2), small_set, None, TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 0.01 and cfg.lr_at(3999) == 0.01
    assert cfg.lr_at(4000) == pytest.approx(0.001)


@given(st.integers(1, 40), st.integers(1, 60), st.integers(0, 1000))
def test_batch_stream_full_batches_cover_epochs(n, batch, seed):
    bs = BatchStream(n, batch, np.random.default_rng(seed))
    drawn = np.concatenate([bs.next() for _ in range(n)])  # n*batch draws = batch epochs
    assert len(drawn) == n * batch
    for e in range(batch):
        assert sorted(drawn[e * n:(e + 1) * n]) == list(range(n))


# -- prediction -------------------------------------------------------------

def test_predict_agrees_with_forward_and_bias_shift():
    s = init_state(reference_spec(3), 2)
    imgs = np.random.default_rng(0).integers(0, 256, (6, 72, 72), dtype=np.uint8)
    cls, probs = predict_batch(s, imgs)
    np.testing.assert_array_equal(cls, probs.argmax(axis=1))
    one, p1 = predict(s, imgs[0])
    assert one == cls[0]
    np.testing.assert_allclose(p1, probs[0], rtol=1e-6)  # batch size changes BLAS blocking
    s.params[-1].b += np.float32(3.5)
    np.testing.assert_array_equal(predict_batch(s, imgs)[0], cls)


# -- weights ----------------------------------------------------------------

def test_weights_round_trip():
    s = init_state(reference_spec(3), 1)
    blob = save_weights(s)
    assert blob.startswith(b"GZCNN1")
    back = load_weights(blob, reference_spec(3))
    assert save_weights(back) == blob
    for a, b in zip(s.params, back.params):
        if a is not None:
            assert a.w.tobytes() == b.w.tobytes() and a.b.tobytes() == b.b.tobytes()


def test_weights_errors():
    blob = save_weights(init_state(reference_spec(3), 1))
    flipped = blob[:-1] + bytes([blob[-1] ^ 0xFF])
    with pytest.raises(WeightsChecksumError):
        load_weights(flipped, reference_spec(3))
    payload_flip = bytearray(blob)
    payload_flip[200] ^= 0x01
    with pytest.raises(WeightsChecksumError):
        load_weights(bytes(payload_flip), reference_spec(3))
    with pytest.raises(WeightsShapeError):
        load_weights(blob, reference_spec(2))
    with pytest.raises(WeightsMagicError):
        load_weights(b"XXCNN1" + blob[6:], reference_spec(3))
    with pytest.raises(WeightsError):
        load_weights(blob[:-10], reference_spec(3))
    with pytest.raises(WeightsError):
        load_weights(blob + b"\0", reference_spec(3))
