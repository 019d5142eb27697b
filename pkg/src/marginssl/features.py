"""Log-mel front end: framing, Hamming window, power spectrum, mel filters,
per-utterance instance normalization, plus 16-bit PCM WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def segment(self, start: int, stop: int) -> "Waveform":
        return Waveform(self.samples[start:stop], self.sample_rate)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 40
    n_fft: int = 512
    frame_length: float = 0.025
    frame_shift: float = 0.010
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    norm_eps: float = 1e-5

    @property
    def win_samples(self) -> int:
        return int(round(self.frame_length * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.frame_shift * self.sample_rate))


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    frame_shift: float = 0.010
    frame_length: float = 0.025

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hamming(length: int) -> np.ndarray:
    n = np.arange(length)
    if length == 1:
        return np.ones(1)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (length - 1))


def frame_and_window(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Cut into overlapping frames and apply a Hamming window; shape (T, L)."""
    L, hop = cfg.win_samples, cfg.hop_samples
    x = w.samples
    if x.size < L:
        raise ValueError(f"waveform has {x.size} samples; at least {L} ({cfg.frame_length * 1000:g} ms) are required")
    n_frames = 1 + (x.size - L) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, L)[::hop][:n_frames]
    return frames * hamming(L)


def power_spectrum(frames: np.ndarray, n_fft: int = 512) -> np.ndarray:
    """Squared magnitude of the zero-padded real FFT; shape (T, n_fft // 2 + 1)."""
    frames = np.atleast_2d(frames)
    if frames.shape[1] > n_fft:
        raise ValueError(f"frame length {frames.shape[1]} exceeds n_fft={n_fft}")
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """``n_mels + 2`` filter edge frequencies (Hz), equally spaced in mel."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    f_max = cfg.sample_rate / 2 if cfg.f_max is None else cfg.f_max
    edges = mel_edges(cfg.n_mels, cfg.f_min, f_max)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(spec: np.ndarray, cfg: FeatureConfig = FeatureConfig(), fbank: np.ndarray | None = None) -> np.ndarray:
    fbank = mel_filterbank(cfg) if fbank is None else fbank
    return np.log(spec @ fbank.T + cfg.log_floor)


def instance_normalize(m: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Standardize each mel bin over time within one utterance."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] < 1:
        raise ValueError("need at least one frame")
    centered = m - m.mean(axis=0, keepdims=True)
    centered[:, np.ptp(m, axis=0) == 0] = 0.0  # constant bins: exact zeros, not rounding residue
    return centered / np.sqrt(centered.var(axis=0, keepdims=True) + eps)


class FeatureExtractor:
    """Waveform -> instance-normalized log-mel, caching the filterbank."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        self.fbank = mel_filterbank(cfg)

    def raw_log_mel(self, w: Waveform) -> np.ndarray:
        if w.sample_rate != self.cfg.sample_rate:
            raise ValueError(f"expected {self.cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
        frames = frame_and_window(w, self.cfg)
        return log_mel(power_spectrum(frames, self.cfg.n_fft), self.cfg, self.fbank)

    def __call__(self, w: Waveform) -> MelSpectrogram:
        return MelSpectrogram(
            instance_normalize(self.raw_log_mel(w), self.cfg.norm_eps),
            frame_shift=self.cfg.frame_shift,
            frame_length=self.cfg.frame_length,
        )


def extract(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    return FeatureExtractor(cfg)(w)


# ------------------------------------------------------------------ WAV I/O


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc or 'truncated'})") from None
    if channels != 1:
        raise AudioFormatError(f"{path}: {channels} channels, only mono is supported")
    if width != 2:
        raise AudioFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
