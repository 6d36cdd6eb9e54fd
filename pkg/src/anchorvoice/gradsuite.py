"""Central-difference verification of every differentiable op and composed path.

Each check builds a small random instance from a seed, reduces the op output
to a scalar with a random probe, and returns grad_check's max relative error.
Composed paths use narrow widths so the whole suite stays fast.
"""
from __future__ import annotations

import time

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig, decode_mel, fuse, init_backbone, length_regulate, text_encode, total_loss
from .encoders import EncoderConfig, anchoring_loss, encode, init_encoder
from .sv import embed_utterance, init_sv

TOLERANCE = 1e-4
SEEDS = 20


def _probe(rng, f):
    """Wrap a tensor->tensor op into a scalar function via a fixed random probe."""
    cache = {}

    def g(t):
        y = f(t)
        if "p" not in cache:
            cache["p"] = rng.normal(size=y.shape)
        return dc.sum_all(dc.mul(y, dc.Tensor(cache["p"])))

    return g


def _swap(params, name, fn):
    """Scalar function of one registry entry, for checking weight gradients."""
    def f(t):
        saved = params._items[name]
        params._items[name] = t
        try:
            return fn()
        finally:
            params._items[name] = saved
    return f


def _unary(op, scale=1.0, shape=(4, 5)):
    def check(seed):
        rng = np.random.default_rng(seed)
        return dc.grad_check(_probe(rng, op), dc.Tensor(scale * rng.normal(size=shape)))
    return check


def _binary(op, shape=(3, 4), other_shape=None):
    def check(seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=shape)
        b = rng.normal(size=other_shape or shape)
        ea = dc.grad_check(_probe(rng, lambda t: op(t, dc.Tensor(b))), dc.Tensor(a))
        eb = dc.grad_check(_probe(rng, lambda t: op(dc.Tensor(a), t)), dc.Tensor(b))
        return max(ea, eb)
    return check


def _check_mae(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ea = dc.grad_check(lambda t: dc.mae(t, dc.Tensor(b)), dc.Tensor(a))
    eb = dc.grad_check(lambda t: dc.mae(dc.Tensor(a), t), dc.Tensor(b))
    return max(ea, eb)


def _check_conv(residual):
    def check(seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 6, 3))
        k = rng.normal(size=(3, 3, 3))
        ex = dc.grad_check(_probe(rng, lambda t: dc.conv1d(t, dc.Tensor(k), residual=residual)), dc.Tensor(x))
        ek = dc.grad_check(_probe(rng, lambda t: dc.conv1d(dc.Tensor(x), t, residual=residual)), dc.Tensor(k))
        return max(ex, ek)
    return check


def _check_take(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, size=(3, 4))
    return dc.grad_check(_probe(rng, lambda t: dc.take(t, idx, axis=1)), dc.Tensor(rng.normal(size=(2, 5, 3))))


# ---------------------------------------------------------------- composed paths

_ENC = EncoderConfig(style_dim=5, hidden=6, layers=2, kernel=3, window=4)
_BB = BackboneConfig(vocab=7, dim=8, style_dim=5, n_mels=6, kernel=3)
_EMB = 12
_MELS = 6


def _small_model(seed):
    rng = np.random.default_rng(seed)
    p = dc.Params()
    init_sv(p.scope("sv"), rng, n_mels=_MELS, dim=_EMB)
    init_encoder(p.scope("teacher"), rng, _ENC, embed_dim=_EMB)
    init_encoder(p.scope("student"), rng, _ENC, embed_dim=_EMB)
    init_backbone(p.scope("backbone"), rng, _BB)
    return p, rng


def _check_embed(seed):
    p, rng = _small_model(seed)
    mel = rng.normal(-2, 2, size=(5, _MELS))
    ex = dc.grad_check(_probe(rng, lambda t: embed_utterance(t, p.scope("sv"))), dc.Tensor(mel))
    ew = dc.grad_check(_swap(p, "sv.proj.w", _probe_call(rng, lambda: embed_utterance(mel, p.scope("sv")))),
                       p["sv.proj.w"])
    return max(ex, ew)


def _probe_call(rng, fn):
    cache = {}

    def g():
        y = fn()
        if "p" not in cache:
            cache["p"] = rng.normal(size=y.shape)
        return dc.sum_all(dc.mul(y, dc.Tensor(cache["p"])))

    return g


def _check_encode(seed):
    p, rng = _small_model(seed)
    mel = rng.normal(-2, 2, size=(2, 9, _MELS))
    run = lambda m: encode(m, p.scope("sv"), p.scope("teacher"), _ENC)
    ex = dc.grad_check(_probe(rng, run), dc.Tensor(mel))
    fn = _probe_call(rng, lambda: run(mel))
    ew = max(dc.grad_check(_swap(p, name, fn), p[name])
             for name in ("teacher.conv0.w", "teacher.gate1.w", "teacher.proj.w", "sv.out.w"))
    return max(ex, ew)


def _check_anchor(seed):
    p, rng = _small_model(seed)
    mel = rng.normal(-2, 2, size=(9, _MELS))
    w_t = encode(mel, p.scope("sv"), p.scope("teacher"), _ENC)
    run = lambda: anchoring_loss(encode(mel[:4], p.scope("sv"), p.scope("student"), _ENC), w_t)
    return max(dc.grad_check(_swap(p, name, run), p[name]) for name in ("student.out.w", "student.fc.w"))


def _check_normalize(seed):
    rng = np.random.default_rng(seed)
    return dc.grad_check(_probe(rng, lambda t: dc.normalize(t, 1e-5)), dc.Tensor(rng.normal(size=(3, 8))))


def _check_fuse(seed):
    p, rng = _small_model(seed)
    bw = p.scope("backbone")
    feats = rng.normal(size=(2, 5, _BB.dim))
    w = rng.normal(size=(2, _BB.style_dim))
    ew = dc.grad_check(_probe(rng, lambda t: fuse(dc.Tensor(feats), t, bw)), dc.Tensor(w))
    ep = dc.grad_check(_probe(rng, lambda t: fuse(t, dc.Tensor(w), bw)), dc.Tensor(feats))
    eg = dc.grad_check(_swap(p, "backbone.fuse.gain.w", _probe_call(rng, lambda: fuse(feats, w, bw))),
                       p["backbone.fuse.gain.w"])
    return max(ew, ep, eg)


def _check_text(seed):
    p, rng = _small_model(seed)
    bw = p.scope("backbone")
    tokens = rng.integers(0, _BB.vocab, size=(2, 4))
    fn = _probe_call(rng, lambda: text_encode(tokens, bw))
    return max(dc.grad_check(_swap(p, n, fn), p[n]) for n in ("backbone.embed", "backbone.text_conv.w"))


def _check_regulate(seed):
    rng = np.random.default_rng(seed)
    durations = np.array([[2, 0, 3], [1, 3, 1]])
    return dc.grad_check(_probe(rng, lambda t: length_regulate(t, durations)), dc.Tensor(rng.normal(size=(2, 3, 4))))


def _check_decode(seed):
    p, rng = _small_model(seed)
    bw = p.scope("backbone")
    feats = rng.normal(size=(5, _BB.dim))
    w = rng.normal(size=_BB.style_dim)
    fn = _probe_call(rng, lambda: decode_mel(feats, w, bw))
    ew = max(dc.grad_check(_swap(p, n, fn), p[n]) for n in ("backbone.dec0.w", "backbone.dec1.b", "backbone.out.w"))
    return max(ew, dc.grad_check(_probe(rng, lambda t: decode_mel(feats, t, bw)), dc.Tensor(w)))


def _check_total(seed):
    rng = np.random.default_rng(seed)
    mel_hat, ref = rng.normal(size=(6, _MELS)), rng.normal(size=(6, _MELS))
    w_s, w_t = rng.normal(size=5), rng.normal(size=5)
    em = dc.grad_check(lambda t: total_loss(t, ref, w_s, w_t, 1.0, 0.7)[0], dc.Tensor(mel_hat))
    ew = dc.grad_check(lambda t: total_loss(mel_hat, ref, t, w_t, 1.0, 0.7)[0], dc.Tensor(w_s))
    return max(em, ew)


CHECKS = {
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul, other_shape=(4,)),
    "scale": _unary(lambda t: dc.scale(t, -1.7)),
    "sum": _unary(dc.sum_all),
    "mean": _unary(lambda t: dc.mean(t, axis=0)),
    "mish": _unary(dc.mish, scale=2.0),
    "relu": _unary(dc.relu),
    "sigmoid": _unary(dc.sigmoid, scale=2.0),
    "glu": _binary(dc.glu),
    "mae": _check_mae,
    "matmul": _binary(dc.matmul, shape=(2, 3, 4), other_shape=(4, 5)),
    "conv1d": _check_conv(False),
    "conv1d_residual": _check_conv(True),
    "normalize": _check_normalize,
    "l2_normalize": _unary(dc.l2_normalize),
    "reshape": _unary(lambda t: dc.reshape(t, (5, 4))),
    "take": _check_take,
    "embed_utterance": _check_embed,
    "encode": _check_encode,
    "anchoring_loss": _check_anchor,
    "fuse": _check_fuse,
    "text_encode": _check_text,
    "length_regulate": _check_regulate,
    "decode_mel": _check_decode,
    "total_loss": _check_total,
}


def run_suite(seeds=SEEDS, checks=None):
    """Returns {name: max relative error over seeds} and elapsed seconds."""
    checks = CHECKS if checks is None else checks
    t0 = time.perf_counter()
    worst = {}
    for name, check in checks.items():
        worst[name] = max(check(seed) for seed in range(seeds))
    return worst, time.perf_counter() - t0
