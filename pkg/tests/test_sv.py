import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchorvoice import diffcore as dc
from anchorvoice.sv import (EmbeddingFileError, embed_utterance, import_embeddings, init_sv,
                            speaker_centroid, write_embeddings)


@pytest.fixture(scope="module")
def sv():
    p = dc.Params()
    init_sv(p.scope("sv"), np.random.default_rng(0))
    return p.scope("sv")


def _unit(rng, n=256):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def test_embedding_is_unit_256(sv):
    mel = np.random.default_rng(1).normal(-5, 3, size=(40, 80))
    e = embed_utterance(mel, sv).data
    assert e.shape == (256,)
    assert abs(np.linalg.norm(e) - 1) < 1e-6


def test_embedding_deterministic_and_permutation_invariant(sv):
    rng = np.random.default_rng(2)
    mel = rng.normal(-5, 3, size=(25, 80))
    a = embed_utterance(mel, sv).data
    assert a.tobytes() == embed_utterance(mel.copy(), sv).data.tobytes()
    np.testing.assert_allclose(embed_utterance(mel[rng.permutation(25)], sv).data, a, atol=1e-14)


def test_empty_mel_rejected(sv):
    with pytest.raises(ValueError):
        embed_utterance(np.zeros((0, 80)), sv)


def test_centroid_examples():
    rng = np.random.default_rng(3)
    e = _unit(rng)
    np.testing.assert_allclose(speaker_centroid([e]).values, e, atol=1e-15)
    np.testing.assert_allclose(speaker_centroid([e, e.copy()]).values, e, atol=1e-15)
    with pytest.raises(ValueError):
        speaker_centroid([])


def test_centroid_matches_loop_oracle():
    rng = np.random.default_rng(4)
    vs = [_unit(rng) for _ in range(5)]
    acc = [0.0] * 256
    for v in vs:
        for i in range(256):
            acc[i] += v[i]
    raw = [a / 5 for a in acc]
    norm = sum(a * a for a in raw) ** 0.5
    c = speaker_centroid(vs)
    np.testing.assert_allclose(c.raw_mean, raw, atol=1e-12)
    np.testing.assert_allclose(c.values, [a / norm for a in raw], atol=1e-12)
    assert c.utterance_count == 5


@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
@settings(max_examples=30)
def test_centroid_order_invariance_and_norm_bound(seed, m):
    rng = np.random.default_rng(seed)
    vs = [_unit(rng) for _ in range(m)]
    a = speaker_centroid(vs)
    b = speaker_centroid([vs[i] for i in rng.permutation(m)])
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-15)
    assert np.linalg.norm(a.raw_mean) <= 1 + 1e-12


def test_import_embeddings(tmp_path):
    rng = np.random.default_rng(5)
    p = tmp_path / "emb.tsv"
    write_embeddings(p, [("alice", _unit(rng))])
    got = import_embeddings(p)
    assert list(got) == ["alice"] and got["alice"].values.shape == (256,)

    write_embeddings(p, [("bob", 3.0 * _unit(rng))])
    assert abs(np.linalg.norm(import_embeddings(p)["bob"].values) - 1) < 1e-12

    write_embeddings(p, [("carol", _unit(rng, 128))])
    with pytest.raises(EmbeddingFileError, match="dimension"):
        import_embeddings(p)

    p.write_text("dave 1,2,3\n")
    with pytest.raises(EmbeddingFileError):
        import_embeddings(p)


def test_embed_gradient_wrt_weights():
    rng = np.random.default_rng(6)
    params = dc.Params()
    init_sv(params.scope("sv"), rng, n_mels=6, dim=256)
    mel = rng.normal(-3, 2, size=(5, 6))
    probe = rng.normal(size=256)
    for name in ("sv.proj.w", "sv.out.b"):
        base = params[name].data.copy()

        def f(t, name=name):
            saved = params[name]
            params._items[name] = t
            try:
                return dc.sum_all(dc.mul(embed_utterance(mel, params.scope("sv")), dc.Tensor(probe)))
            finally:
                params._items[name] = saved

        assert dc.grad_check(f, dc.Tensor(base)) < 1e-4
