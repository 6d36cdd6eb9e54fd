"""Teacher and student speaker encoders (identical architecture).

The mel is cut into W-frame windows with hop W/2; each window gets a
d-vector from the SV stand-in, giving a short embedding sequence. That
sequence goes through projection -> FC+mish -> gated residual convs -> FC
and is averaged over windows into an N-dim style vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .sv import EMBED_DIM, embed_utterance


@dataclass(frozen=True)
class EncoderConfig:
    style_dim: int = 128
    hidden: int = 128
    layers: int = 3
    kernel: int = 3
    window: int = 32


def init_encoder(scope, rng, cfg=EncoderConfig(), embed_dim=EMBED_DIM):
    h = cfg.hidden
    # inputs are unit-norm d-vectors, so unit-variance weights give O(1) features
    scope.add("proj.w", rng.normal(0.0, 1.0, (embed_dim, h)))
    scope.add("proj.b", np.zeros(h))
    scope.add("fc.w", rng.normal(0.0, 1.0 / np.sqrt(h), (h, h)))
    scope.add("fc.b", np.zeros(h))
    for i in range(cfg.layers):
        std = 1.0 / np.sqrt(cfg.kernel * h)
        scope.add(f"conv{i}.w", rng.normal(0.0, std, (cfg.kernel, h, h)))
        scope.add(f"conv{i}.b", np.zeros(h))
        scope.add(f"gate{i}.w", rng.normal(0.0, std, (cfg.kernel, h, h)))
        scope.add(f"gate{i}.b", np.zeros(h))
    scope.add("out.w", rng.normal(0.0, 1.0 / np.sqrt(h), (h, cfg.style_dim)))
    scope.add("out.b", np.zeros(cfg.style_dim))


def window_index(frames, window=32):
    """(n_windows, len) frame indices; clips shorter than one window give one window."""
    if frames < 1:
        raise ValueError("cannot window an empty mel spectrogram")
    if frames <= window:
        return np.arange(frames)[None, :]
    hop = max(1, window // 2)
    starts = np.arange(0, frames - window + 1, hop)
    return starts[:, None] + np.arange(window)[None, :]


def encode(mel, sv, enc, cfg=EncoderConfig()):
    """(..., T, n_mels) mel -> (..., N) style vector Tensor."""
    mel = dc.as_tensor(mel)
    idx = window_index(mel.shape[-2], cfg.window)
    windows = dc.take(mel, idx, axis=-2)            # (..., nW, W, n_mels)
    seq = embed_utterance(windows, sv)               # (..., nW, 256)
    h = dc.linear(seq, enc["proj.w"], enc["proj.b"])
    h = dc.mish(dc.linear(h, enc["fc.w"], enc["fc.b"]))
    for i in range(cfg.layers):
        a = dc.conv1d(h, enc[f"conv{i}.w"], bias=enc[f"conv{i}.b"])
        b = dc.conv1d(h, enc[f"gate{i}.w"], bias=enc[f"gate{i}.b"])
        h = dc.add(h, dc.glu(a, b))
    h = dc.linear(h, enc["out.w"], enc["out.b"])
    return dc.mean(h, axis=-2)


def anchoring_loss(w_s, w_t):
    """MAE between student and teacher style vectors; the teacher side is detached."""
    w_s, w_t = dc.as_tensor(w_s), dc.as_tensor(w_t)
    if w_s.shape != w_t.shape:
        raise dc.ShapeError(f"style vectors differ in shape: {w_s.shape} vs {w_t.shape}")
    return dc.mae(w_s, w_t.detach())
