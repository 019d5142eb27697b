"""NT-Xent contrastive losses with an optional additive margin on positives.

All three variants share one shape.  For an anchor with positive cosine
``c_p`` and negative cosines ``c_n``::

    term = -log( e^((c_p - m)/tau) / (e^((c_p - m)/tau) + sum_n e^(c_n/tau)) )
         = log1p( sum_n e^((c_n - c_p + m)/tau) )

and the loss is the mean term over anchors.  ``m = 0`` gives the plain loss.

Writing the denominator as "positive + negatives" rather than as a sum over
the whole batch is the same thing when the margin is zero; only this form is
implemented.

Embeddings must already be l2-normalized; a row that is off the unit sphere
by more than ``UNIT_TOL`` raises :class:`ContractViolation` instead of being
silently renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNIT_TOL = 1e-6


class ContractViolation(ValueError):
    """Inputs break the unit-norm or batch-size contract."""


@dataclass(frozen=True)
class LossConfig:
    """Temperature ``tau`` and additive margin ``margin``.

    ``tau = 1/30`` corresponds to the scale ``s = 30`` of AM-Softmax.
    """

    tau: float = 1.0 / 30.0
    margin: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.margin >= 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")


@dataclass(frozen=True)
class PairSimilarities:
    pos: np.ndarray  # (N,)
    neg: np.ndarray  # (N, n_neg)


def _check_unit(name: str, x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {x.shape}")
    if x.shape[0] == 0:
        return
    dev = np.abs(np.sqrt((x * x).sum(axis=1)) - 1.0)
    if dev.max() > UNIT_TOL:
        raise ContractViolation(f"{name} row {int(dev.argmax())} is not unit-norm (|norm-1| = {dev.max():.3g})")


def _check_pair(Z: Tensor, Zp: Tensor) -> None:
    _check_unit("Z", Z.data)
    _check_unit("Zp", Zp.data)
    if Z.shape != Zp.shape:
        raise ContractViolation(f"views disagree in shape: {Z.shape} vs {Zp.shape}")
    if Z.shape[0] == 0:
        raise ContractViolation("empty batch")


def sim_pos(u, v, cfg: LossConfig) -> float:
    """``exp((cos(u, v) - m) / tau)`` for unit vectors."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    _check_unit("u", u.reshape(1, -1))
    _check_unit("v", v.reshape(1, -1))
    return math.exp((float(u @ v) - cfg.margin) / cfg.tau)


def sim_neg(u, v, cfg: LossConfig) -> float:
    """``exp(cos(u, v) / tau)`` for unit vectors; the margin never applies."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    _check_unit("u", u.reshape(1, -1))
    _check_unit("v", v.reshape(1, -1))
    return math.exp(float(u @ v) / cfg.tau)


def pair_similarities(Z, Zp) -> PairSimilarities:
    """Positive and in-batch negative cosines for the one-directional loss."""
    Z, Zp = np.asarray(getattr(Z, "data", Z)), np.asarray(getattr(Zp, "data", Zp))
    S = Z @ Zp.T
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    return PairSimilarities(pos=np.diag(S).copy(), neg=S[off].reshape(n, n - 1))


def _anchor_terms(logits: Tensor, positive: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    # positive: column of each row's positive; mask: columns that take part at all
    return ad.neg_log_softmax_at(logits, positive, mask)


def nt_xent(Z, Zp, cfg: LossConfig) -> Tensor:
    """One-directional NT-Xent(-AM): anchors from ``Z``, candidates from ``Zp``."""
    Z, Zp = ad.as_tensor(Z), ad.as_tensor(Zp)
    _check_pair(Z, Zp)
    n = Z.shape[0]
    eye = np.eye(n)
    logits = ad.scale(ad.matmul(Z, ad.transpose(Zp)), 1.0 / cfg.tau)
    if cfg.margin:
        logits = ad.sub(logits, eye * (cfg.margin / cfg.tau))
    return ad.mean(_anchor_terms(logits, np.arange(n)))


def nt_xent_symmetric(Z, Zp, cfg: LossConfig) -> Tensor:
    """Symmetric NT-Xent(-AM) over all ``2N`` views.

    Each view is an anchor; its positive is the other view of the same
    utterance and its negatives are the remaining ``2(N - 1)`` views.
    Swapping ``Z`` and ``Zp`` gives a bit-identical value.
    """
    Z, Zp = ad.as_tensor(Z), ad.as_tensor(Zp)
    _check_pair(Z, Zp)
    n = Z.shape[0]
    both = ad.concat_rows([Z, Zp])
    idx = np.arange(2 * n)
    partner = np.zeros((2 * n, 2 * n))
    partner[idx, (idx + n) % (2 * n)] = 1.0
    not_self = ~np.eye(2 * n, dtype=bool)

    logits = ad.scale(ad.pairwise_dots(both, both), 1.0 / cfg.tau)
    if cfg.margin:
        logits = ad.sub(logits, partner * (cfg.margin / cfg.tau))
    return ad.mean(_anchor_terms(logits, (idx + n) % (2 * n), not_self))


def nt_xent_queue(Z, Zp, Q, cfg: LossConfig) -> Tensor:
    """Queue-based NT-Xent(-AM): negatives are the ``K`` rows of ``Q``.

    ``Q`` is treated as a constant; no gradient ever reaches it.
    """
    Z, Zp = ad.as_tensor(Z), ad.as_tensor(Zp)
    _check_pair(Z, Zp)
    Qd = np.asarray(getattr(Q, "data", Q), dtype=np.float64)
    if Qd.size == 0:
        Qd = np.zeros((0, Z.shape[1]))
    _check_unit("Q", Qd)
    if Qd.shape[1] != Z.shape[1]:
        raise ContractViolation(f"queue width {Qd.shape[1]} != embedding width {Z.shape[1]}")
    n, k = Z.shape[0], Qd.shape[0]

    pos = ad.sum_rows(ad.mul(Z, Zp))
    if cfg.margin:
        pos = ad.sub(pos, np.full((n, 1), cfg.margin))
    parts = [pos]
    if k:
        parts.append(ad.matmul(Z, Tensor(Qd.T)))
    logits = ad.scale(ad.concat_cols(parts), 1.0 / cfg.tau)
    return ad.mean(_anchor_terms(logits, np.zeros(n, dtype=int)))
