"""Waveform loading, peak normalization and log-mel features."""

from __future__ import annotations

import wave
from functools import lru_cache
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
N_FFT = 2048
HOP = 256
N_MELS = 128
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-10


def read_wav(path) -> np.ndarray:
    """Read mono 16-bit PCM at 16 kHz as float64 in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        rate = fh.getframerate()
        if rate != SAMPLE_RATE:
            raise ValueError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (resampling is not supported)")
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: {fh.getnchannels()} channels, expected mono")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: {8 * fh.getsampwidth()}-bit samples, expected 16-bit PCM")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def normalize_waveform(w: np.ndarray) -> np.ndarray:
    """Scale so that max |sample| is 1; all-zero input is returned unchanged."""
    w = np.asarray(w, dtype=np.float64)
    peak = np.max(np.abs(w)) if w.size else 0.0
    if peak == 0.0:
        return w.copy()
    return w / peak


def pad_or_crop(w: np.ndarray, n_samples: int = int(SAMPLE_RATE * CLIP_SECONDS)) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if len(w) >= n_samples:
        return w[:n_samples].copy()
    return np.concatenate([w, np.zeros(n_samples - len(w))])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_fft // 2 + 1), unnormalized."""
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    lower, center, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_center_frequencies(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def n_frames(n_samples: int, hop: int = HOP) -> int:
    """Frame count with centered framing."""
    return n_samples // hop + 1


def stft_magnitude(w: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| with a symmetric Hamming window and reflect-padded centered frames.

    Returns (n_fft // 2 + 1, frames).
    """
    w = np.asarray(w, dtype=np.float64)
    pad = n_fft // 2
    mode = "reflect" if len(w) > pad else "constant"
    padded = np.pad(w, pad, mode=mode)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    window = np.hamming(n_fft)
    spec = np.fft.rfft(frames * window, axis=-1)
    return np.abs(spec).T


def logmel(w: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, n_mels: int = N_MELS,
           sample_rate: int = SAMPLE_RATE, floor: float = LOG_FLOOR) -> np.ndarray:
    """Log mel spectrogram, shape (n_mels, frames); ``log(mel(|STFT|) + floor)``."""
    mag = stft_magnitude(w, n_fft, hop)
    fb = mel_filterbank(n_mels, n_fft, sample_rate, F_MIN, min(F_MAX, sample_rate / 2))
    return np.log(fb @ mag + floor)


def features_from_waveform(w: np.ndarray, clip_seconds: float = CLIP_SECONDS) -> np.ndarray:
    """Pad/crop, peak-normalize and extract log-mel; (n_mels, frames)."""
    w = pad_or_crop(w, int(round(SAMPLE_RATE * clip_seconds)))
    return logmel(normalize_waveform(w))


def features_from_file(path, clip_seconds: float = CLIP_SECONDS) -> np.ndarray:
    return features_from_waveform(read_wav(path), clip_seconds)


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer from a batch of waveforms to log-mel features.

    ``transform`` accepts an array (n_clips, n_samples) or a list of 1-d
    waveforms and returns (n_clips, n_mels, frames).
    """

    def __init__(self, clip_seconds: float = CLIP_SECONDS, normalize: bool = True):
        self.clip_seconds = clip_seconds
        self.normalize = normalize

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        from .validation import check_waveforms

        waves = check_waveforms(X)
        n = int(round(SAMPLE_RATE * self.clip_seconds))
        out = []
        for w in waves:
            w = pad_or_crop(w, n)
            if self.normalize:
                w = normalize_waveform(w)
            out.append(logmel(w))
        return np.stack(out)

    def __sklearn_is_fitted__(self):
        return True


def list_wavs(directory) -> list:
    return sorted(Path(directory).glob("*.wav"))
