"""Synthetic voices, augmentation and the log-mel front end."""

import numpy as np

from marginssl import AugmentPolicy, FeatureExtractor, augment, generate_corpus
from marginssl.synthdata import extract_two_frames, power

corpus = generate_corpus(4, 2, seed=1, duration=3.0)
fx = FeatureExtractor()
print(f"{len(corpus)} utterances of {corpus[0].waveform.duration:.1f} s")

for u in corpus[::2]:
    m = fx(u.waveform)
    print(f"  speaker {u.speaker_id}: {m.frames.shape[0]} frames x {m.frames.shape[1]} mels, "
          f"bin means within {np.abs(m.frames.mean(0)).max():.1e} of 0")

rng = np.random.default_rng(0)
u = corpus[0]
a, b = extract_two_frames(u, 1.0, rng)
for name, policy in [
    ("noise", AugmentPolicy(categories=("noise",), reverb_prob=0.0)),
    ("music", AugmentPolicy(categories=("music",), reverb_prob=0.0)),
    ("babble", AugmentPolicy(categories=("speech",), reverb_prob=0.0)),
    ("reverb only", AugmentPolicy(noise_prob=0.0, reverb_prob=1.0)),
]:
    out = augment(a, policy, rng)
    added = out.samples - a.samples
    snr = 10 * np.log10(power(a.samples) / power(added))
    print(f"  {name:<12} signal-to-added ratio {snr:6.2f} dB")

same = [fx.raw_log_mel(x.waveform).mean(0) for x in corpus]
same = [v - v.mean() for v in same]
cos = np.array([[x @ y / np.linalg.norm(x) / np.linalg.norm(y) for y in same] for x in same])
print("\nmean-spectrum cosine (rows/cols by utterance; pairs 0-1, 2-3, ... share a speaker)")
print(np.array2string(cos, precision=2, suppress_small=True))
