"""Synthetic speaker corpus and the noise/music/babble + reverb augmentation.

Each synthetic speaker is a source-filter voice: a glottal pulse train at a
speaker-specific fundamental, shaped by four parallel formant resonators and
a spectral tilt.  Utterances are strings of "syllables", each a vowel drawn
from a shared inventory, separated by short pauses.  Vowel identity moves
the formants far more than speaker identity does; the speaker shows through
the fundamental, a vocal-tract scale on the formants, bandwidths, formant
gains and tilt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .features import Waveform, read_wav, write_wav
from .seeding import derive_seed

SAMPLE_RATE = 16000
TARGET_RMS = 0.05

# F1..F4 in Hz for a reference vocal tract: /i/ /e/ /a/ /o/ /u/ /schwa/
VOWELS = np.array(
    [
        [270.0, 2290.0, 3010.0, 3700.0],
        [530.0, 1840.0, 2480.0, 3600.0],
        [730.0, 1090.0, 2440.0, 3500.0],
        [570.0, 840.0, 2410.0, 3400.0],
        [300.0, 870.0, 2240.0, 3400.0],
        [500.0, 1500.0, 2500.0, 3500.0],
    ]
)


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    fundamental: float
    formant_scale: np.ndarray  # (4,) multipliers on the vowel formants
    bandwidths: np.ndarray  # (4,) Hz
    amplitudes: np.ndarray  # (4,) linear gains
    tilt: float  # one-pole lowpass coefficient on the source

    @classmethod
    def sample(cls, speaker_id: int, rng: np.random.Generator) -> "SyntheticSpeaker":
        return cls(
            id=speaker_id,
            fundamental=float(rng.uniform(80.0, 300.0)),
            formant_scale=rng.uniform(0.85, 1.25) * rng.uniform(0.95, 1.05, size=4),
            bandwidths=rng.uniform(60.0, 160.0, size=4),
            amplitudes=rng.uniform(0.2, 1.0, size=4),
            tilt=float(rng.uniform(0.3, 0.9)),
        )


@dataclass(frozen=True)
class Utterance:
    speaker_id: int
    waveform: Waveform
    utterance_id: int


def _resonator(freq: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * freq / sr
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def synthesize(speaker: SyntheticSpeaker, n_samples: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Voice-like signal of ``n_samples`` samples, scaled to ``TARGET_RMS``."""
    out = np.zeros(n_samples)
    pos = 0
    while pos < n_samples:
        # pause, then one syllable
        pos += int(rng.uniform(0.03, 0.12) * sr)
        length = int(rng.uniform(0.12, 0.35) * sr)
        stop = min(pos + length, n_samples)
        if stop - pos < 16:
            break
        n = stop - pos
        f0 = speaker.fundamental * rng.uniform(0.92, 1.08) * np.linspace(1.0, rng.uniform(0.9, 1.1), n)
        phase = np.cumsum(f0 / sr)
        source = np.diff(np.floor(phase), prepend=np.floor(phase[0]))
        source = lfilter([1.0 - speaker.tilt], [1.0, -speaker.tilt], source)
        source += 0.02 * rng.standard_normal(n)
        formants = VOWELS[rng.integers(len(VOWELS))] * speaker.formant_scale * rng.uniform(0.97, 1.03, size=4)
        voiced = np.zeros(n)
        for k in range(4):
            b, a = _resonator(min(formants[k], 0.45 * sr), speaker.bandwidths[k], sr)
            voiced += speaker.amplitudes[k] * lfilter(b, a, source)
        out[pos:stop] = voiced * np.hanning(n)
        pos = stop
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= TARGET_RMS / rms
    return out + TARGET_RMS * 10 ** (-40 / 20) * rng.standard_normal(n_samples)


def make_speakers(n_speakers: int, seed: int, first_id: int = 0) -> list[SyntheticSpeaker]:
    return [
        SyntheticSpeaker.sample(sid, np.random.default_rng(derive_seed(seed, "speaker", sid)))
        for sid in range(first_id, first_id + n_speakers)
    ]


def generate_corpus(
    n_speakers: int,
    utts_per_speaker: int | Sequence[int],
    seed: int,
    duration: float = 5.0,
    sample_rate: int = SAMPLE_RATE,
    first_speaker_id: int = 0,
    first_utterance_id: int = 0,
) -> list[Utterance]:
    """Deterministic labeled corpus; a per-speaker count list gives imbalanced data.

    Every utterance draws from its own child seed of ``(seed, utterance_id)``.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if isinstance(utts_per_speaker, (int, np.integer)):
        counts = [int(utts_per_speaker)] * n_speakers
    else:
        counts = [int(c) for c in utts_per_speaker]
        if len(counts) != n_speakers:
            raise ValueError(f"got {len(counts)} utterance counts for {n_speakers} speakers")
    speakers = make_speakers(n_speakers, seed, first_speaker_id)
    n_samples = int(round(duration * sample_rate))
    corpus = []
    uid = first_utterance_id
    for spk, count in zip(speakers, counts):
        for _ in range(count):
            rng = np.random.default_rng(derive_seed(seed, "utterance", uid))
            corpus.append(Utterance(spk.id, Waveform(synthesize(spk, n_samples, rng, sample_rate), sample_rate), uid))
            uid += 1
    return corpus


# ------------------------------------------------------------- two frames


def two_frame_offsets(n_samples: int, frame_len: int, rng: np.random.Generator) -> tuple[int, int]:
    """Start offsets of two non-overlapping windows, uniform over valid placements.

    Placements with the first window earlier correspond one-to-one with
    2-subsets of ``{0, ..., slack + 1}``; the order of the pair is then a coin flip.
    """
    slack = n_samples - 2 * frame_len
    if slack < 0:
        raise ValueError(f"utterance of {n_samples} samples cannot hold two frames of {frame_len}")
    i, j = sorted(rng.choice(slack + 2, size=2, replace=False))
    first, second = int(i), int(j) - 1 + frame_len
    return (first, second) if rng.random() < 0.5 else (second, first)


def extract_two_frames(u: Utterance, frame_seconds: float, rng: np.random.Generator) -> tuple[Waveform, Waveform]:
    w = u.waveform
    length = int(round(frame_seconds * w.sample_rate))
    if w.samples.size < 2 * length:
        raise ValueError(
            f"utterance {u.utterance_id} lasts {w.duration:.3f} s; two {frame_seconds:g} s frames need "
            f"{2 * frame_seconds:g} s"
        )
    a, b = two_frame_offsets(w.samples.size, length, rng)
    return w.segment(a, a + length), w.segment(b, b + length)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    snr_speech_db: tuple[float, float] = (13.0, 20.0)
    snr_music_db: tuple[float, float] = (5.0, 15.0)
    snr_noise_db: tuple[float, float] = (0.0, 15.0)
    noise_prob: float = 1.0
    reverb_prob: float = 0.5
    reverb_decay: tuple[float, float] = (200.0, 1600.0)  # samples
    categories: tuple[str, ...] = field(default=("noise", "music", "speech"))

    def __post_init__(self):
        for name in ("snr_speech_db", "snr_music_db", "snr_noise_db", "reverb_decay"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        for name in ("noise_prob", "reverb_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        unknown = set(self.categories) - {"noise", "music", "speech"}
        if unknown or not self.categories:
            raise ValueError(f"bad noise categories {self.categories}")

    def snr_range(self, category: str) -> tuple[float, float]:
        return {"noise": self.snr_noise_db, "music": self.snr_music_db, "speech": self.snr_speech_db}[category]


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def scale_to_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Noise rescaled so that ``10 log10(P_signal / P_noise) == snr_db``."""
    ps, pn = power(signal), power(noise)
    if pn == 0.0:
        return noise.copy()
    return noise * np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0)))


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def music_noise(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """A few overlapping note streams with slow vibrato and soft harmonics."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    for _ in range(int(rng.integers(2, 5))):
        pos = 0
        while pos < n:
            dur = int(rng.uniform(0.2, 0.6) * sr)
            seg = slice(pos, min(pos + dur, n))
            m = seg.stop - seg.start
            f = 440.0 * 2.0 ** ((rng.integers(40, 80) - 69) / 12.0)
            vib = 1.0 + 0.005 * np.sin(2 * np.pi * rng.uniform(3, 6) * t[seg])
            phase = 2 * np.pi * np.cumsum(f * vib) / sr
            note = sum(0.5**h * np.sin((h + 1) * phase) for h in range(3))
            out[seg] += note * np.hanning(m)
            pos += dur
    return out


def babble_noise(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE, n_talkers: int = 3) -> np.ndarray:
    """Sum of fresh synthetic talkers drawn from ``rng`` (not corpus speakers)."""
    out = np.zeros(n)
    for k in range(n_talkers):
        spk = SyntheticSpeaker.sample(-1 - k, rng)
        out += synthesize(spk, n, rng, sr)
    return out


def synthetic_ir(decay: float, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying white-noise impulse response with unit energy."""
    n = np.arange(int(5 * decay) + 1)
    h = np.exp(-n / decay) * rng.standard_normal(n.size)
    return h / np.sqrt(np.sum(h * h))


def apply_reverb(x: np.ndarray, ir: np.ndarray) -> np.ndarray:
    return fftconvolve(x, ir)[: x.size]


def augment(w: Waveform, p: AugmentPolicy, rng: np.random.Generator) -> Waveform:
    """Add one noise category at a random SNR, then maybe reverberate; clip to [-1, 1]."""
    x = w.samples
    n = x.size
    if rng.random() < p.noise_prob:
        category = p.categories[int(rng.integers(len(p.categories)))]
        lo, hi = p.snr_range(category)
        snr = rng.uniform(lo, hi)
        if category == "noise":
            noise = white_noise(n, rng)
        elif category == "music":
            noise = music_noise(n, rng, w.sample_rate)
        else:
            noise = babble_noise(n, rng, w.sample_rate)
        x = x + scale_to_snr(x, noise, snr)
    if rng.random() < p.reverb_prob:
        x = apply_reverb(x, synthetic_ir(rng.uniform(*p.reverb_decay), rng))
    return Waveform(np.clip(x, -1.0, 1.0), w.sample_rate)


# ------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    speaker_id: int
    path: Path
    duration: float


def write_corpus(corpus: Sequence[Utterance], out_dir, manifest_name: str = "manifest.txt") -> Path:
    """Write one WAV per utterance and a manifest ``utt_id speaker_id path duration``.

    Paths in the manifest are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    lines = []
    for u in corpus:
        rel = Path("wav") / f"spk{u.speaker_id:04d}" / f"utt{u.utterance_id:06d}.wav"
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        write_wav(out_dir / rel, u.waveform)
        lines.append(f"{u.utterance_id} {u.speaker_id} {rel.as_posix()} {u.waveform.duration:.4f}\n")
    manifest = out_dir / manifest_name
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'utt_id speaker_id path duration'")
        wav = Path(parts[2])
        entries.append(ManifestEntry(parts[0], int(parts[1]), wav if wav.is_absolute() else path.parent / wav, float(parts[3])))
    return entries


def load_corpus(manifest) -> list[Utterance]:
    """Read the WAVs listed in a manifest; utterance ids must be integers."""
    return [Utterance(e.speaker_id, read_wav(e.path), int(e.utt_id)) for e in read_manifest(manifest)]
