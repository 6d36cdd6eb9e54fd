import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchorvoice import diffcore as dc
from anchorvoice.encoders import EncoderConfig, anchoring_loss, encode, init_encoder, window_index
from anchorvoice.sv import init_sv


@pytest.fixture(scope="module")
def twins():
    p = dc.Params()
    init_sv(p.scope("sv"), np.random.default_rng(0))
    init_encoder(p.scope("teacher"), np.random.default_rng(1))
    init_encoder(p.scope("student"), np.random.default_rng(1))
    return p


def _mel(seed, frames):
    return np.random.default_rng(seed).normal(-4, 3, size=(frames, 80))


def test_identical_weights_give_identical_vectors(twins):
    mel = _mel(2, 70)
    a = encode(mel, twins.scope("sv"), twins.scope("teacher")).data
    b = encode(mel, twins.scope("sv"), twins.scope("student")).data
    assert a.tobytes() == b.tobytes()


def test_output_is_128_dim_for_any_length(twins):
    for frames in (1, 5, 31, 32, 33, 64, 200):
        w = encode(_mel(frames, frames), twins.scope("sv"), twins.scope("teacher"))
        assert w.shape == (128,)
        assert np.all(np.isfinite(w.data))


def test_window_index():
    assert window_index(10, 32).shape == (1, 10)
    assert window_index(32, 32).shape == (1, 32)
    idx = window_index(64, 32)
    np.testing.assert_array_equal(idx[:, 0], [0, 16, 32])
    assert idx[-1, -1] == 63
    with pytest.raises(ValueError):
        window_index(0)


def test_batched_encode_matches_single(twins):
    mels = np.stack([_mel(3, 48), _mel(4, 48)])
    batch = encode(mels, twins.scope("sv"), twins.scope("teacher")).data
    for i in range(2):
        single = encode(mels[i], twins.scope("sv"), twins.scope("teacher")).data
        np.testing.assert_allclose(batch[i], single, atol=1e-12)


def test_empty_mel_rejected(twins):
    with pytest.raises(ValueError):
        encode(np.zeros((0, 80)), twins.scope("sv"), twins.scope("teacher"))


def test_anchoring_loss_examples():
    v = np.random.default_rng(5).normal(size=128)
    assert anchoring_loss(v, v).item() == 0.0
    assert anchoring_loss([1.0, 1.0], [0.0, 2.0]).item() == 1.0
    with pytest.raises(dc.ShapeError):
        anchoring_loss(np.zeros(128), np.zeros(64))


def test_anchoring_loss_loop_oracle():
    rng = np.random.default_rng(6)
    ws, wt = rng.normal(size=128), rng.normal(size=128)
    acc = 0.0
    for x, y in zip(ws, wt):
        acc += abs(x - y)
    assert abs(anchoring_loss(ws, wt).item() - acc / 128) < 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30)
def test_anchoring_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=16)
    b = a.copy()
    b[rng.integers(16)] += rng.uniform(0.1, 1)
    assert anchoring_loss(a, b).item() > 0
    assert anchoring_loss(a, a).item() == 0


def test_anchoring_gradient_reaches_student_only(twins):
    twins.zero_grad()
    mel = _mel(7, 64)
    w_t = encode(mel, twins.scope("sv"), twins.scope("teacher"))
    w_s = encode(mel[:16], twins.scope("sv"), twins.scope("student"))
    anchoring_loss(w_s, w_t).backward()
    for name in twins.names("teacher."):
        g = twins[name].grad
        assert g is None or not np.any(g)
    assert np.linalg.norm(twins["student.out.w"].grad) > 0
    assert np.linalg.norm(twins["student.proj.w"].grad) > 0
    twins.zero_grad()


def test_encode_gradient_small_config():
    cfg = EncoderConfig(style_dim=4, hidden=5, layers=2, kernel=3, window=4)
    rng = np.random.default_rng(8)
    p = dc.Params()
    init_sv(p.scope("sv"), rng, n_mels=6, dim=10)
    init_encoder(p.scope("enc"), rng, cfg, embed_dim=10)
    mel = rng.normal(size=(9, 6))
    probe = rng.normal(size=4)

    for name in ("enc.gate0.w", "enc.fc.b"):
        def f(t, name=name):
            saved = p[name]
            p._items[name] = t
            try:
                return dc.sum_all(dc.mul(encode(mel, p.scope("sv"), p.scope("enc"), cfg), dc.Tensor(probe)))
            finally:
                p._items[name] = saved

        assert dc.grad_check(f, p[name]) < 1e-4
