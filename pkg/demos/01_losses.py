"""Margin and temperature effects on the NT-Xent family, on toy embeddings."""

import numpy as np

from marginssl import LossConfig, nt_xent, nt_xent_queue, nt_xent_symmetric


def unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


rng = np.random.default_rng(0)
anchors = unit(rng.standard_normal((8, 16)))
positives = unit(anchors + 0.3 * rng.standard_normal((8, 16)))
queue = unit(rng.standard_normal((64, 16)))

print("two orthogonal pairs, tau=1")
E2 = np.eye(2)
print(f"  nt-xent            {nt_xent(E2, E2, LossConfig(1.0)).item():.9f}")
print(f"  nt-xent, m=0.1     {nt_xent(E2, E2, LossConfig(1.0, 0.1)).item():.9f}")
print(f"  symmetric          {nt_xent_symmetric(E2, E2, LossConfig(1.0)).item():.9f}")

print("\nmargin sweep at tau=1/30 (loss grows with m)")
print("  m      plain    symmetric   queue")
for m in (0.0, 0.05, 0.1, 0.2):
    cfg = LossConfig(1 / 30, m)
    row = [nt_xent(anchors, positives, cfg), nt_xent_symmetric(anchors, positives, cfg), nt_xent_queue(anchors, positives, queue, cfg)]
    print(f"  {m:<5}" + "".join(f"{r.item():10.4f}" for r in row))

print("\ntemperature sweep, m=0.1")
for tau in (1.0, 0.2, 1 / 30, 0.01):
    print(f"  tau={tau:<8.4g} {nt_xent_symmetric(anchors, positives, LossConfig(tau, 0.1)).item():.4f}")
