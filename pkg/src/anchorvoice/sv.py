"""Trainable speaker-verification stand-in and per-speaker centroids.

embed_utterance maps a log-mel matrix to a unit-norm 256-dim d-vector:
per-frame projection, mish, mean over frames, output projection, L2 norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

EMBED_DIM = 256


class EmbeddingFileError(ValueError):
    pass


@dataclass
class SpeakerCentroid:
    speaker_id: str
    values: np.ndarray
    utterance_count: int
    raw_mean: np.ndarray = field(repr=False)


def init_sv(scope, rng, n_mels=80, dim=EMBED_DIM):
    # log-mel inputs sit around -25..5, so the first layer starts small
    scope.add("proj.w", rng.normal(0.0, 0.1 / np.sqrt(n_mels), (n_mels, dim)))
    scope.add("proj.b", np.zeros(dim))
    scope.add("out.w", rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)))
    scope.add("out.b", np.zeros(dim))


def embed_utterance(mel, sv):
    """(..., T, n_mels) -> (..., 256) unit vectors, as a graph Tensor."""
    mel = dc.as_tensor(mel)
    if mel.shape[-2] < 1:
        raise ValueError("cannot embed an empty mel spectrogram")
    h = dc.mish(dc.linear(mel, sv["proj.w"], sv["proj.b"]))
    h = dc.mean(h, axis=-2)
    return dc.l2_normalize(dc.linear(h, sv["out.w"], sv["out.b"]))


def speaker_centroid(embeddings, speaker_id=""):
    """Arithmetic mean of utterance embeddings, then renormalized to unit length."""
    embeddings = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if not embeddings:
        raise ValueError("speaker_centroid needs at least one embedding")
    raw = np.mean(np.stack(embeddings), axis=0)
    norm = np.linalg.norm(raw)
    if norm == 0:
        raise ValueError("centroid has zero norm")
    return SpeakerCentroid(speaker_id, raw / norm, len(embeddings), raw)


def import_embeddings(path, dim=EMBED_DIM):
    """Parse "speaker_id<TAB>v1,...,v256" lines into per-speaker centroids.

    Repeated speaker ids are treated as separate utterances of that speaker.
    """
    path = Path(path)
    groups = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            spk, vec = line.split("\t")
            values = np.array([float(v) for v in vec.split(",")])
        except ValueError:
            raise EmbeddingFileError(f"{path}:{lineno}: malformed line") from None
        if values.size != dim:
            raise EmbeddingFileError(f"{path}:{lineno}: expected dimension {dim}, got {values.size}")
        n = np.linalg.norm(values)
        if not np.isfinite(n) or n == 0:
            raise EmbeddingFileError(f"{path}:{lineno}: zero or non-finite vector")
        groups.setdefault(spk, []).append(values / n)
    return {spk: speaker_centroid(vs, spk) for spk, vs in groups.items()}


def write_embeddings(path, rows):
    """rows: iterable of (speaker_id, vector)."""
    lines = [f"{spk}\t" + ",".join(repr(float(v)) for v in vec) for spk, vec in rows]
    Path(path).write_text("\n".join(lines) + "\n")
