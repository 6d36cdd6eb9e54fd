"""Toy non-autoregressive text-to-mel model with style-conditioned normalization.

text_encode -> length_regulate (ground-truth durations) -> decode_mel, where
decode_mel fuses the style vector into the frame features as
gain(w) * normalize(p) + bias(w) before two conv+mish layers and a linear
projection to mel bands.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

NORM_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    vocab: int = 32
    dim: int = 256
    style_dim: int = 128
    n_mels: int = 80
    kernel: int = 3


def init_backbone(scope, rng, cfg=BackboneConfig(), mel_mean=None):
    k, d = cfg.kernel, cfg.dim
    scope.add("embed", rng.normal(0.0, 1.0, (cfg.vocab, d)))
    scope.add("text_conv.w", rng.normal(0.0, 1.0 / np.sqrt(k * d), (k, d, d)))
    scope.add("text_conv.b", np.zeros(d))
    scope.add("fuse.gain.w", rng.normal(0.0, 0.1 / np.sqrt(cfg.style_dim), (cfg.style_dim, d)))
    scope.add("fuse.gain.b", np.ones(d))
    scope.add("fuse.bias.w", rng.normal(0.0, 0.1 / np.sqrt(cfg.style_dim), (cfg.style_dim, d)))
    scope.add("fuse.bias.b", np.zeros(d))
    for i in range(2):
        scope.add(f"dec{i}.w", rng.normal(0.0, 1.0 / np.sqrt(k * d), (k, d, d)))
        scope.add(f"dec{i}.b", np.zeros(d))
    scope.add("out.w", rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.n_mels)))
    # starting the output bias at the corpus mean saves thousands of Adam steps
    scope.add("out.b", np.zeros(cfg.n_mels) if mel_mean is None else np.asarray(mel_mean, dtype=np.float64))


def normalize(p, eps=NORM_EPS):
    """Zero-mean, unit-scale features over the last axis."""
    return dc.normalize(p, eps)


def fuse(p, w, fw):
    """gain(w) * normalize(p) + bias(w), broadcast over time positions."""
    p, w = dc.as_tensor(p), dc.as_tensor(w)
    gain_w = fw["fuse.gain.w"]
    if w.shape[-1] != gain_w.shape[0]:
        raise dc.ShapeError(f"style dim {w.shape[-1]} != fusion input {gain_w.shape[0]}")
    if p.shape[-1] != gain_w.shape[1]:
        raise dc.ShapeError(f"feature dim {p.shape[-1]} != fusion output {gain_w.shape[1]}")
    gain = dc.linear(w, gain_w, fw["fuse.gain.b"])
    bias = dc.linear(w, fw["fuse.bias.w"], fw["fuse.bias.b"])
    if w.data.ndim == 2:
        gain = dc.reshape(gain, (gain.shape[0], 1, gain.shape[1]))
        bias = dc.reshape(bias, (bias.shape[0], 1, bias.shape[1]))
    return dc.add(dc.mul(gain, normalize(p)), bias)


def text_encode(tokens, bw):
    """(..., L) integer tokens -> (..., L, K) features."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0 or tokens.shape[-1] == 0:
        raise ValueError("empty token sequence")
    vocab = bw["embed"].shape[0]
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValueError(f"token id outside vocabulary [0, {vocab})")
    e = dc.take(bw["embed"], tokens, axis=0)
    return dc.mish(dc.conv1d(e, bw["text_conv.w"], bias=bw["text_conv.b"]))


def regulate_index(durations):
    durations = np.asarray(durations, dtype=np.int64)
    if np.any(durations < 0):
        raise ValueError("durations must be non-negative")
    return np.repeat(np.arange(durations.size), durations)


def length_regulate(p, durations):
    """Repeat position i durations[i] times.

    p is (L, K) with durations (L,), or (B, L, K) with durations (B, L) whose
    rows all sum to the same frame count.
    """
    p = dc.as_tensor(p)
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != p.shape[:-1]:
        raise dc.ShapeError(f"durations shape {durations.shape} does not match features {p.shape[:-1]}")
    if p.data.ndim == 2:
        return dc.take(p, regulate_index(durations), axis=0)
    b, L, k = p.shape
    rows = [regulate_index(d) for d in durations]
    if len({len(r) for r in rows}) != 1:
        raise dc.ShapeError("batched length_regulate needs equal total durations")
    flat = np.stack([r + i * L for i, r in enumerate(rows)])
    return dc.take(dc.reshape(p, (b * L, k)), flat, axis=0)


def decode_mel(p, w, bw):
    """Frame-aligned features + style vector -> (..., T, n_mels) mel Tensor."""
    h = fuse(p, w, bw)
    for i in range(2):
        h = dc.mish(dc.conv1d(h, bw[f"dec{i}.w"], bias=bw[f"dec{i}.b"]))
    return dc.linear(h, bw["out.w"], bw["out.b"])


def synthesize(tokens, durations, w, bw):
    return decode_mel(length_regulate(text_encode(tokens, bw), durations), w, bw)


def total_loss(mel_hat, mel_ref, w_s=None, w_t=None, mel_weight=1.0, anchor_weight=1.0):
    """Mel reconstruction MAE plus anchoring MAE (teacher detached).

    Returns (total, mel_term, anchor_term); anchor_term is None when no
    student vector is given.
    """
    mel_term = dc.mae(mel_hat, mel_ref)
    total = dc.scale(mel_term, mel_weight)
    anchor = None
    if w_s is not None:
        anchor = dc.mae(w_s, dc.as_tensor(w_t).detach())
        total = dc.add(total, dc.scale(anchor, anchor_weight))
    return total, mel_term, anchor
