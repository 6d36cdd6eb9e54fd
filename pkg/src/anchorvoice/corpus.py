"""Desk-scale synthetic multi-speaker corpus and manifest I/O.

Every speaker is a harmonic source (pitch on a 62.5 Hz grid, so one period
divides the 256-sample hop exactly) shaped by a speaker-specific formant
scale, tilt and ripple. Tokens are vowel-like formant patterns held for a
whole number of mel frames. Token segments are offset so that mel frame t is
centered on token-frame t, which keeps the frame/duration bookkeeping exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, compute_mel, load_wav, write_wav

SAMPLE_RATE = 16000
HOP = 256
N_FFT = 1024
N_PHONES = 16
TOKENS_PER_UTT = 8
FRAMES_PER_UTT = 64
MIN_DURATION = 4
PITCH_STEP = SAMPLE_RATE / HOP  # 62.5 Hz
_PHONE_SEED = 20240917
FADE = 128
BREATH_LEVEL = 0.01


class ManifestError(ValueError):
    pass


@dataclass
class Entry:
    audio: str
    tokens: list
    durations: list
    speaker: str
    mel: np.ndarray = None

    @property
    def frames(self):
        return int(sum(self.durations))


def phone_table():
    """Formant frequencies, bandwidths and loudness per token id (fixed inventory)."""
    rng = np.random.default_rng(_PHONE_SEED)
    f1 = rng.uniform(300, 900, N_PHONES)
    f2 = rng.uniform(1000, 2400, N_PHONES)
    f3 = rng.uniform(2500, 3400, N_PHONES)
    loud = rng.uniform(0.5, 1.0, N_PHONES)
    return np.stack([f1, f2, f3], axis=1), np.array([90.0, 130.0, 180.0]), loud


def speaker_profile(seed, index):
    rng = np.random.default_rng([int(seed), 7, int(index)])
    return {
        "f0": PITCH_STEP * int(rng.integers(2, 8)),
        "formant_scale": float(rng.uniform(0.85, 1.2)),
        "tilt": float(rng.uniform(-9.0, -3.0)),
        "gain": float(rng.uniform(0.55, 0.9)),
        "ripple": rng.normal(0.0, 0.35, 6),
        "phase_seed": int(rng.integers(1 << 30)),
    }


def _harmonic_amplitudes(profile, token, formants, bandwidths, loud):
    f0 = profile["f0"]
    freqs = f0 * np.arange(1, int(7600 // f0) + 1)
    env = np.zeros_like(freqs)
    for fc, bw in zip(formants[token] * profile["formant_scale"], bandwidths):
        env += 1.0 / (1.0 + ((freqs - fc) / bw) ** 2)
    octaves = np.log2(freqs / 100.0)
    env *= 10.0 ** (profile["tilt"] * octaves / 20.0)
    ripple = profile["ripple"]
    env *= np.exp(sum(r * np.sin((i + 1) * np.pi * freqs / 8000.0) for i, r in enumerate(ripple)))
    env += 1e-3 * env.max()
    amps = env / env.sum() * 0.8 * profile["gain"] * loud[token]
    return freqs, amps


def _fade(n, lo, hi, width):
    """Raised-cosine gate that is 1 on [lo, hi) and crossfades over `width` samples."""
    x = np.arange(n, dtype=np.float64)
    up = np.clip((x - lo + width / 2) / width, 0.0, 1.0)
    down = np.clip((hi + width / 2 - x) / width, 0.0, 1.0)
    return np.sin(0.5 * np.pi * np.minimum(up, down)) ** 2


def render_utterance(profile, tokens, durations, fade=FADE):
    formants, bandwidths, loud = phone_table()
    frames = int(sum(durations))
    n = frames * HOP + (N_FFT - HOP)
    prng = np.random.default_rng(profile["phase_seed"])
    phases = prng.uniform(0, 2 * np.pi, 200)
    # one-hop periodic breath noise keeps every band above the log floor
    breath = np.tile(prng.normal(0.0, 1.0, HOP) + 0.5, n // HOP + 1)[:n]
    out = BREATH_LEVEL * profile["gain"] * breath / np.abs(breath).max()
    t = np.arange(n) / SAMPLE_RATE
    # token-frame t spans samples [t*HOP + offset, (t+1)*HOP + offset)
    offset = N_FFT // 2 - HOP // 2
    bounds = offset + HOP * np.concatenate([[0], np.cumsum(durations)])
    bounds[0], bounds[-1] = -fade, n + fade
    for tok, lo, hi in zip(tokens, bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        a, b = max(0, lo - fade), min(n, hi + fade)
        freqs, amps = _harmonic_amplitudes(profile, tok, formants, bandwidths, loud)
        wave_ = np.sin(2 * np.pi * freqs[None, :] * t[a:b, None] + phases[None, :freqs.size]) @ amps
        out[a:b] += wave_ * _fade(n, lo, hi, fade)[a:b]
    return AudioClip(np.clip(out, -0.99, 0.99), SAMPLE_RATE)


def random_durations(rng, n_tokens=TOKENS_PER_UTT, frames=FRAMES_PER_UTT):
    extra = frames - MIN_DURATION * n_tokens
    return (MIN_DURATION + rng.multinomial(extra, np.full(n_tokens, 1.0 / n_tokens))).tolist()


def make_synthetic_corpus(out_dir, n_speakers=4, n_utts=10, seed=0):
    """Write WAV files plus manifest.jsonl; returns the manifest path."""
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in range(n_speakers):
        profile = speaker_profile(seed, s)
        rng = np.random.default_rng([int(seed), 11, s])
        for u in range(n_utts):
            tokens = rng.integers(0, N_PHONES, TOKENS_PER_UTT).tolist()
            durations = random_durations(rng)
            rel = f"wavs/spk{s}_utt{u:03d}.wav"
            write_wav(out_dir / rel, render_utterance(profile, tokens, durations))
            lines.append(json.dumps({"audio": rel, "tokens": tokens, "durations": durations,
                                     "speaker": f"spk{s}"}))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path, with_mel=True):
    """Parse a JSON-lines manifest; audio paths resolve relative to its folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            e = Entry(str(path.parent / rec["audio"]), [int(x) for x in rec["tokens"]],
                      [int(x) for x in rec["durations"]], str(rec["speaker"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad entry ({exc})") from None
        if len(e.tokens) != len(e.durations) or not e.tokens:
            raise ManifestError(f"{path}:{lineno}: tokens and durations differ in length")
        if not Path(e.audio).is_file():
            raise ManifestError(f"{path}:{lineno}: audio not found: {e.audio}")
        if with_mel:
            e.mel = compute_mel(load_wav(e.audio))
            if e.mel.shape[0] != e.frames:
                raise ManifestError(f"{path}:{lineno}: durations sum to {e.frames} "
                                    f"but audio has {e.mel.shape[0]} frames")
        entries.append(e)
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return entries


def split_entries(entries, holdout=2):
    """Per speaker, the last `holdout` utterances (manifest order) are held out."""
    by_spk = {}
    for i, e in enumerate(entries):
        by_spk.setdefault(e.speaker, []).append(i)
    held = set()
    for idx in by_spk.values():
        if holdout > 0:
            held.update(idx[-holdout:] if len(idx) > holdout else [])
    train = [e for i, e in enumerate(entries) if i not in held]
    test = [e for i, e in enumerate(entries) if i in held]
    return train, test
