"""Speaker-verification scoring and metrics.

Each utterance is embedded from ``n_frames`` evenly spaced windows; a trial
scores the mean cosine over all frame pairs.  EER and minDCF are computed on
the operating points given by every distinct score plus +/- infinity, with
FAR(t) = P(non-target >= t) and FRR(t) = P(target < t).
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderParams, embed, encoder_from_tensors, load_checkpoint
from .features import FeatureConfig, FeatureExtractor, Waveform, read_wav
from .synthdata import Utterance, read_manifest


class DataError(ValueError):
    """Evaluation inputs are missing, malformed or inconsistent."""


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        t = np.asarray(self.targets, dtype=bool).ravel()
        if s.size != t.size:
            raise ValueError(f"{s.size} scores but {t.size} labels")
        if s.size == 0:
            raise ValueError("empty score set")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "targets", t)

    def require_both_classes(self) -> None:
        if self.targets.all() or not self.targets.any():
            raise ValueError("EER/minDCF need at least one target and one non-target trial")


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_frames: int = 10
    frame_seconds: float = 3.5
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    @property
    def dcf(self) -> DcfParams:
        return DcfParams(self.p_target, self.c_miss, self.c_fa)


# ----------------------------------------------------------------- scoring


def frame_offsets(n_samples: int, frame_len: int, n_frames: int) -> np.ndarray:
    """Evenly spaced window starts over ``[0, n_samples - frame_len]``; windows may overlap."""
    if n_samples < frame_len:
        raise ValueError(f"utterance has {n_samples} samples, evaluation frames need {frame_len}")
    if n_frames == 1:
        return np.zeros(1, dtype=int)
    return np.round(np.linspace(0, n_samples - frame_len, n_frames)).astype(int)


def utterance_embeddings(
    w: Waveform,
    params: EncoderParams,
    n_frames: int = 10,
    frame_seconds: float = 3.5,
    extractor: FeatureExtractor | None = None,
) -> np.ndarray:
    """l2-normalized embeddings of ``n_frames`` windows, shape (n_frames, D)."""
    extractor = extractor or FeatureExtractor(FeatureConfig(sample_rate=w.sample_rate))
    L = int(round(frame_seconds * w.sample_rate))
    if w.samples.size < L:
        raise ValueError(f"utterance lasts {w.duration:.3f} s; evaluation needs at least {frame_seconds:g} s")
    E = np.stack([embed(extractor(w.segment(o, o + L)), params) for o in frame_offsets(w.samples.size, L, n_frames)])
    return E / np.linalg.norm(E, axis=1, keepdims=True)


def score_embeddings(Ea: np.ndarray, Eb: np.ndarray) -> float:
    """Mean cosine over every (row of Ea, row of Eb) pair; rows must be unit-norm."""
    # elementwise dots + sorted sum: swapping Ea and Eb gives the same bits
    cos = (Ea[:, None, :] * Eb[None, :, :]).sum(axis=-1)
    return float(np.sort(cos.ravel()).sum() / cos.size)


def score_trial(
    utt_a,
    utt_b,
    encoder: EncoderParams,
    n_frames: int = 10,
    eval_frame_seconds: float = 3.5,
    extractor: FeatureExtractor | None = None,
) -> float:
    wa = utt_a.waveform if isinstance(utt_a, Utterance) else utt_a
    wb = utt_b.waveform if isinstance(utt_b, Utterance) else utt_b
    Ea = utterance_embeddings(wa, encoder, n_frames, eval_frame_seconds, extractor)
    Eb = utterance_embeddings(wb, encoder, n_frames, eval_frame_seconds, extractor)
    return score_embeddings(Ea, Eb)


# ----------------------------------------------------------------- metrics


def error_rates(s: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (with +/- inf), FAR and FRR at each."""
    tgt = np.sort(s.scores[s.targets])
    non = np.sort(s.scores[~s.targets])
    thresholds = np.concatenate([[-np.inf], np.unique(s.scores), [np.inf]])
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, far, frr


def compute_eer(s: ScoreSet) -> float:
    """Equal error rate, linearly interpolated between adjacent operating points."""
    s.require_both_classes()
    _, far, frr = error_rates(s)
    d = far - frr  # +1 at -inf, -1 at +inf, non-increasing
    k = int(np.argmax(d <= 0))
    if d[k] == 0:
        return float(far[k])
    alpha = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def compute_min_dcf(s: ScoreSet, p: DcfParams = DcfParams()) -> float:
    s.require_both_classes()
    _, far, frr = error_rates(s)
    dcf = p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far
    best = float(dcf.min())
    if p.normalize:
        best /= min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target))
    return best


@dataclass(frozen=True)
class ScoreDistribution:
    edges: np.ndarray
    count_target: np.ndarray
    count_nontarget: np.ndarray
    mean_target: float
    mean_nontarget: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count_target", "count_nontarget"])
        for lo, hi, ct, cn in zip(self.edges[:-1], self.edges[1:], self.count_target, self.count_nontarget):
            w.writerow([f"{lo:.9g}", f"{hi:.9g}", int(ct), int(cn)])
        buf.write(f"# mean_target={self.mean_target:.9g}\n# mean_nontarget={self.mean_nontarget:.9g}\n")
        return buf.getvalue()


def export_score_distribution(s: ScoreSet, n_bins: int = 50) -> ScoreDistribution:
    """Per-class histogram over a shared range plus per-class means."""
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    lo, hi = float(s.scores.min()), float(s.scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    ct, _ = np.histogram(s.scores[s.targets], bins=edges)
    cn, _ = np.histogram(s.scores[~s.targets], bins=edges)
    mt = float(s.scores[s.targets].mean()) if s.targets.any() else float("nan")
    mn = float(s.scores[~s.targets].mean()) if (~s.targets).any() else float("nan")
    return ScoreDistribution(edges, ct, cn, mt, mn)


# ----------------------------------------------------------------- file I/O


def read_trials(path) -> list[Trial]:
    """``<label 0|1> <enroll_id> <test_id>`` per line."""
    path = Path(path)
    trials = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: expected '<0|1> <enroll_id> <test_id>'")
        trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


def write_trials(path, trials: Sequence[Trial]) -> None:
    Path(path).write_text("".join(f"{int(t.target)} {t.enroll} {t.test}\n" for t in trials))


def format_score(x: float) -> str:
    return f"{x:.9g}"


def write_scores(path, trials: Sequence[Trial], scores: Sequence[float]) -> None:
    Path(path).write_text("".join(f"{format_score(s)} {t.enroll} {t.test}\n" for t, s in zip(trials, scores)))


def read_scores(path) -> list[tuple[float, str, str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            s, a, b = line.split()
            out.append((float(s), a, b))
    return out


# ----------------------------------------------------------------- protocol


@dataclass(frozen=True)
class EvalReport:
    eer: float
    min_dcf: float
    n_trials: int
    p_target: float
    scores: ScoreSet
    trials: tuple[Trial, ...]

    def text(self) -> str:
        return (
            f"trials: {self.n_trials}\n"
            f"EER: {100 * self.eer:.4f}%\n"
            f"minDCF({self.p_target:g}): {self.min_dcf:.4f}\n"
        )

    def metrics_csv(self) -> str:
        return f"eer,min_dcf_{self.p_target:g},n_trials\n{self.eer:.9g},{self.min_dcf:.9g},{self.n_trials}\n"


def evaluate(
    checkpoint,
    manifest,
    trial_list,
    cfg: EvalConfig = EvalConfig(),
    features: FeatureConfig = FeatureConfig(),
    out_dir=None,
    scores_path=None,
    workers: int = 1,
) -> EvalReport:
    """Score every trial, compute EER and minDCF, optionally write the report files.

    Metrics are computed on scores rounded to the 9 significant digits of the
    score file, so re-reading that file reproduces them exactly.
    """
    for p in (checkpoint, manifest, trial_list):
        if not Path(p).is_file():
            raise DataError(f"missing file: {p}")
    tensors, _ = load_checkpoint(checkpoint)
    params = encoder_from_tensors(tensors)
    paths = {e.utt_id: e.path for e in read_manifest(manifest)}
    trials = read_trials(trial_list)
    if not trials:
        raise DataError(f"{trial_list}: no trials")
    needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
    missing = [u for u in needed if u not in paths]
    if missing:
        raise DataError(f"utterance ids not in manifest: {' '.join(missing)}")

    extractor = FeatureExtractor(features)

    def embed_one(utt_id):
        return utt_id, utterance_embeddings(read_wav(paths[utt_id]), params, cfg.n_frames, cfg.frame_seconds, extractor)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cache = dict(pool.map(embed_one, needed))
    else:
        cache = dict(map(embed_one, needed))

    raw = [score_embeddings(cache[t.enroll], cache[t.test]) for t in trials]
    rounded = np.array([float(format_score(x)) for x in raw])
    s = ScoreSet(rounded, [t.target for t in trials])
    report = EvalReport(compute_eer(s), compute_min_dcf(s, cfg.dcf), len(trials), cfg.p_target, s, tuple(trials))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(report.text())
        (out_dir / "metrics.csv").write_text(report.metrics_csv())
    if scores_path is not None:
        write_scores(scores_path, trials, rounded)
    return report
