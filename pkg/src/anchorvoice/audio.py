"""WAV ingestion and log-mel front end."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUPPORTED_RATES = (16000, 22050)
LOG_FLOOR = 1e-10
MELS_MAGIC = b"MELS"


class AudioError(ValueError):
    pass


class WavNotFoundError(AudioError, FileNotFoundError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class UnsupportedChannelsError(AudioError):
    pass


class UnsupportedRateError(AudioError):
    pass


class ClipTooShortError(AudioError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise UnsupportedChannelsError("unsupported channel count")
        if s.size and np.max(np.abs(s)) > 1 + 1e-6:
            raise AudioError("samples exceed [-1, 1]")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def load_wav(path):
    """Read a mono 16-bit PCM RIFF/WAVE file at 16 or 22.05 kHz."""
    path = Path(path)
    if not path.is_file():
        raise WavNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedEncodingError(f"{path}: not 16-bit PCM WAVE ({exc})") from None
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise UnsupportedChannelsError("unsupported channel count")
    if rate not in SUPPORTED_RATES:
        raise UnsupportedRateError(f"unsupported sample rate {rate}")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioClip(pcm / 32768.0, rate)


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft, n_mels=80, fmin=0.0, fmax=None):
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft//2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (bins[None, :] - lo) / (mid - lo)
    fall = (hi - bins[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def band_centers(sample_rate, n_mels=80, fmin=0.0, fmax=None):
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def n_frames(n_samples, n_fft=1024, hop=256):
    return (n_samples - n_fft) // hop + 1


def compute_mel(clip, n_fft=1024, hop=256, n_mels=80, fmin=0.0, fmax=None):
    """Log-mel spectrogram, shape (frames, n_mels). No edge padding."""
    sr = clip.sample_rate
    fmax = sr / 2 if fmax is None else fmax
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise AudioError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise AudioError(f"hop must be in (0, n_fft], got {hop}")
    if fmax > sr / 2:
        raise AudioError(f"fmax {fmax} above Nyquist {sr / 2}")
    x = clip.samples
    if x.size < n_fft:
        raise ClipTooShortError("clip too short")
    frames = n_frames(x.size, n_fft, hop)
    window = np.hanning(n_fft + 1)[:-1]
    idx = np.arange(n_fft)[None, :] + hop * np.arange(frames)[:, None]
    power = np.abs(np.fft.rfft(x[idx] * window, axis=1)) ** 2
    energy = power @ mel_filterbank(sr, n_fft, n_mels, fmin, fmax).T
    return np.log(np.maximum(energy, LOG_FLOOR))


def write_mels(path, mel):
    mel = np.ascontiguousarray(mel, dtype="<f8")
    if mel.ndim != 2:
        raise AudioError(f"mel matrix must be 2-D, got shape {mel.shape}")
    Path(path).write_bytes(MELS_MAGIC + struct.pack("<II", *mel.shape) + mel.tobytes())


def read_mels(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MELS_MAGIC or len(raw) < 12:
        raise AudioError(f"{path}: not a MELS file")
    frames, bands = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 8 * frames * bands:
        raise AudioError(f"{path}: size does not match header")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(frames, bands).astype(np.float64)
