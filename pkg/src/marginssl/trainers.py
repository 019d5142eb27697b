"""SimCLR and MoCo training loops.

SimCLR: two non-overlapping frames per utterance, each independently
augmented, encoded by the same network; the loss is NT-Xent(-AM), symmetric
or one-directional.

MoCo: the first view goes through the query encoder, the second through a
key encoder that gets no gradient and trails the query encoder by an
exponential moving average.  Negatives come from a FIFO queue of past keys.
Order within one step: loss and backward, Adam update of the query encoder,
EMA update of the key encoder, then the keys used in this step's loss are
enqueued.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, adam_step, lr_schedule
from .encoder import (
    SAP_FORMULA,
    EncoderParams,
    encode_batch,
    encoder_from_tensors,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .features import FeatureConfig, FeatureExtractor, MelSpectrogram
from .losses import LossConfig, nt_xent, nt_xent_queue, nt_xent_symmetric
from .seeding import derive_seed, rng_for
from .synthdata import AugmentPolicy, Utterance, augment, extract_two_frames

log = logging.getLogger(__name__)

FRAMEWORKS = ("simclr", "moco")
LOSSES = ("nt-xent", "nt-xent-am")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None, seed: int | None = None):
        super().__init__(message)
        self.epoch, self.step, self.seed = epoch, step, seed


@dataclass
class TrainConfig:
    framework: str = "simclr"
    loss: str = "nt-xent-am"
    symmetric: bool = True
    margin: float = 0.1  # only used by nt-xent-am
    tau: float = 1.0 / 30.0
    batch_size: int = 32
    epochs: int = 20
    frame_seconds: float = 2.0
    queue_size: int = 512
    ema: float = 0.999
    lr: float = 1e-3
    lr_decay: float = 0.95
    lr_decay_every: int = 5
    weight_decay: float = 0.0
    hidden: int = 64
    embed_dim: int = 32
    prevent_collisions: bool = False
    cap_per_speaker: int | None = None
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"framework must be one of {FRAMEWORKS}, got {self.framework!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.framework == "simclr" and self.batch_size < 2:
            raise ConfigError("in-batch negatives need batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.queue_size < 0:
            raise ConfigError("batch_size must be >= 1, epochs and queue_size >= 0")
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigError("ema must lie in [0, 1]")
        if self.cap_per_speaker is not None and self.cap_per_speaker < 1:
            raise ConfigError("cap_per_speaker must be >= 1")
        if self.frame_seconds <= 0 or self.lr <= 0 or self.tau <= 0 or self.margin < 0:
            raise ConfigError("frame_seconds, lr and tau must be positive; margin non-negative")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, margin=self.margin if self.loss == "nt-xent-am" else 0.0)


# ------------------------------------------------------------ queue and EMA


class MemoryQueue:
    """Circular FIFO of ``size`` unit-norm key embeddings."""

    def __init__(self, size: int, dim: int):
        self.size = int(size)
        self.buffer = np.zeros((self.size, dim))
        self.write_head = 0
        self.filled = 0

    def enqueue(self, rows) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != self.buffer.shape[1]:
            raise ValueError(f"row width {rows.shape[1]} != queue width {self.buffer.shape[1]}")
        dev = np.abs(np.linalg.norm(rows, axis=1) - 1.0) if rows.size else np.zeros(0)
        if dev.size and dev.max() > 1e-9:
            raise ValueError(f"queue rows must be unit-norm (deviation {dev.max():.3g})")
        if self.size == 0:
            return
        rows = rows[-self.size :]
        idx = (self.write_head + np.arange(rows.shape[0])) % self.size
        self.buffer[idx] = rows
        self.write_head = int((self.write_head + rows.shape[0]) % self.size)
        self.filled = min(self.size, self.filled + rows.shape[0])

    def negatives(self) -> np.ndarray:
        """Rows currently usable as negatives (only the filled part)."""
        return self.buffer[: self.filled]

    def ordered(self) -> np.ndarray:
        """Filled rows from oldest to newest."""
        if self.filled < self.size:
            return self.buffer[: self.filled].copy()
        return np.roll(self.buffer, -self.write_head, axis=0)


@dataclass
class EmaEncoder:
    params: EncoderParams
    momentum: float = 0.999

    @classmethod
    def from_query(cls, query: EncoderParams, momentum: float = 0.999) -> "EmaEncoder":
        return cls(EncoderParams.from_dict({k: v.copy() for k, v in query.as_dict().items()}), momentum)

    def updated(self, query: EncoderParams) -> "EmaEncoder":
        m = self.momentum
        k, q = self.params.as_dict(), query.as_dict()
        return EmaEncoder(EncoderParams.from_dict({n: m * k[n] + (1.0 - m) * q[n] for n in k}), m)


# ----------------------------------------------------------------- batching


@dataclass(frozen=True)
class SpeakerLabelOracle:
    """utterance id -> speaker id; only used by the collision/imbalance controls."""

    labels: Mapping[int, int]

    @classmethod
    def from_corpus(cls, corpus: Sequence[Utterance]) -> "SpeakerLabelOracle":
        return cls({u.utterance_id: u.speaker_id for u in corpus})

    def __getitem__(self, utt_id: int) -> int:
        return self.labels[utt_id]


def count_collisions(speaker_ids: Sequence[int]) -> int:
    """Number of same-speaker pairs in a batch."""
    _, counts = np.unique(np.asarray(speaker_ids), return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def epoch_pool(corpus: Sequence[Utterance], cfg: TrainConfig, labels, rng) -> list[Utterance]:
    if cfg.cap_per_speaker is None:
        return list(corpus)
    by_spk: dict[int, list[int]] = {}
    for i, u in enumerate(corpus):
        by_spk.setdefault(labels[u.utterance_id], []).append(i)
    keep = set()
    for spk in sorted(by_spk):
        idx = by_spk[spk]
        if len(idx) > cfg.cap_per_speaker:
            idx = rng.choice(idx, size=cfg.cap_per_speaker, replace=False).tolist()
        keep.update(idx)
    return [u for i, u in enumerate(corpus) if i in keep]


def build_batches(
    corpus: Sequence[Utterance],
    cfg: TrainConfig,
    labels: SpeakerLabelOracle | None,
    rng: np.random.Generator,
) -> Iterator[list[Utterance]]:
    """One epoch of batches, sampling utterances without replacement.

    A final partial batch is emitted when it holds at least two utterances.
    With ``prevent_collisions`` every batch holds ``batch_size`` distinct
    speakers, and the epoch ends when fewer speakers than that remain.
    """
    if not corpus:
        raise ConfigError("empty corpus")
    if (cfg.prevent_collisions or cfg.cap_per_speaker is not None) and labels is None:
        raise ConfigError("prevent_collisions / cap_per_speaker need speaker labels")
    pool = epoch_pool(corpus, cfg, labels, rng)
    N = cfg.batch_size

    if not cfg.prevent_collisions:
        order = rng.permutation(len(pool))
        for lo in range(0, len(order), N):
            chunk = order[lo : lo + N]
            if len(chunk) == N or (len(chunk) >= 2 and lo + N >= len(order)):
                yield [pool[i] for i in chunk]
        return

    by_spk: dict[int, list[Utterance]] = {}
    for u in pool:
        by_spk.setdefault(labels[u.utterance_id], []).append(u)
    if len(by_spk) < N:
        raise ConfigError(f"prevent_collisions needs at least batch_size={N} speakers, corpus has {len(by_spk)}")
    speakers = sorted(by_spk)
    stacks = {s: [by_spk[s][i] for i in rng.permutation(len(by_spk[s]))] for s in speakers}
    while True:
        alive = [s for s in speakers if stacks[s]]
        if len(alive) < N:
            return
        weights = np.array([len(stacks[s]) for s in alive], dtype=np.float64)
        chosen = rng.choice(len(alive), size=N, replace=False, p=weights / weights.sum())
        yield [stacks[alive[i]].pop() for i in chosen]


# ------------------------------------------------------------------ steps


def make_views(
    batch: Sequence[Utterance],
    frame_seconds: float,
    extractor: FeatureExtractor,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    workers: int = 1,
) -> tuple[list[MelSpectrogram], list[MelSpectrogram]]:
    """Two independently augmented, non-overlapping views per utterance.

    Each utterance gets its own child generator, so results do not depend on
    ``workers``.
    """
    seeds = rng.integers(0, 2**63, size=len(batch))

    def one(args):
        u, seed = args
        r = np.random.default_rng(int(seed))
        a, b = extract_two_frames(u, frame_seconds, r)
        return extractor(augment(a, policy, r)), extractor(augment(b, policy, r))

    items = list(zip(batch, seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(one, items))
    else:
        pairs = [one(it) for it in items]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def contrastive_loss(views_a, views_b, params_a, params_b, cfg: TrainConfig) -> ad.Tensor:
    """SimCLR loss with (possibly distinct) parameter tensors per branch."""
    za = encode_batch(views_a, params_a).normalized
    zb = encode_batch(views_b, params_b).normalized
    if cfg.symmetric:
        return nt_xent_symmetric(za, zb, cfg.loss_config)
    return nt_xent(za, zb, cfg.loss_config)


def _grads(P: Mapping[str, ad.Tensor]) -> dict[str, np.ndarray]:
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in P.items()}


def _finite_loss(loss: ad.Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    return value


def simclr_step(
    batch: Sequence[Utterance],
    params: EncoderParams,
    opt: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    extractor: FeatureExtractor | None = None,
    policy: AugmentPolicy = AugmentPolicy(),
) -> tuple[float, EncoderParams]:
    if len(batch) < 2:
        raise ConfigError("SimCLR step needs at least two utterances")
    extractor = extractor or FeatureExtractor()
    views_a, views_b = make_views(batch, cfg.frame_seconds, extractor, policy, rng, cfg.workers)
    P = params.tensors(requires_grad=True)
    loss = contrastive_loss(views_a, views_b, P, P, cfg)
    value = _finite_loss(loss)
    loss.backward()
    return value, EncoderParams.from_dict(adam_step(params.as_dict(), _grads(P), opt))


def queue_loss(views_q, views_k, params_q, key: EncoderParams, queue: MemoryQueue, cfg: TrainConfig):
    """Queue loss and the (constant) key embeddings it used."""
    zq = encode_batch(views_q, params_q).normalized
    zk = ad.detach(encode_batch(views_k, key).normalized)
    return nt_xent_queue(zq, zk, queue.negatives(), cfg.loss_config), zk.data


def moco_step(
    batch: Sequence[Utterance],
    params: EncoderParams,
    opt: AdamState,
    key: EmaEncoder,
    queue: MemoryQueue,
    cfg: TrainConfig,
    rng: np.random.Generator,
    extractor: FeatureExtractor | None = None,
    policy: AugmentPolicy = AugmentPolicy(),
) -> tuple[float, EncoderParams, EmaEncoder, MemoryQueue]:
    """One MoCo step; ``queue`` is updated in place and also returned."""
    if len(batch) < 1:
        raise ConfigError("MoCo step needs at least one utterance")
    extractor = extractor or FeatureExtractor()
    views_q, views_k = make_views(batch, cfg.frame_seconds, extractor, policy, rng, cfg.workers)
    P = params.tensors(requires_grad=True)
    loss, keys = queue_loss(views_q, views_k, P, key.params, queue, cfg)
    value = _finite_loss(loss)
    loss.backward()
    new_params = EncoderParams.from_dict(adam_step(params.as_dict(), _grads(P), opt))
    new_key = key.updated(new_params)
    queue.enqueue(keys)
    return value, new_params, new_key, queue


# ------------------------------------------------------------------- train

METRICS_HEADER = ["epoch", "mean_loss", "lr", "wall_seconds"]


@dataclass
class TrainState:
    params: EncoderParams
    opt: AdamState
    key: EmaEncoder | None = None
    queue: MemoryQueue | None = None
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    t = {f"encoder.{k}": v for k, v in state.params.as_dict().items()}
    for k in sorted(state.opt.m):
        t[f"adam.m.{k}"] = state.opt.m[k]
        t[f"adam.v.{k}"] = state.opt.v[k]
    if state.key is not None:
        t.update({f"key.{k}": v for k, v in state.key.params.as_dict().items()})
    if state.queue is not None:
        t["queue.buffer"] = state.queue.buffer
    return t


def save_train_state(path, state: TrainState, cfg: TrainConfig) -> None:
    meta = {
        "sap": SAP_FORMULA,
        "hidden": state.params.hidden,
        "embed_dim": state.params.embed_dim,
        "n_mels": state.params.n_mels,
        "epochs_done": state.epochs_done,
        "adam": {k: getattr(state.opt, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")},
        "config": asdict(cfg),
        "history": state.history,
    }
    if state.queue is not None:
        meta["queue"] = {"size": state.queue.size, "write_head": state.queue.write_head, "filled": state.queue.filled}
    if state.key is not None:
        meta["ema"] = state.key.momentum
    save_checkpoint(path, _state_tensors(state), meta)


def load_train_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    params = encoder_from_tensors(tensors)
    opt = AdamState(**meta["adam"])
    for name in params.names():
        if f"adam.m.{name}" in tensors:
            opt.m[name] = tensors[f"adam.m.{name}"]
            opt.v[name] = tensors[f"adam.v.{name}"]
    key = queue = None
    if any(k.startswith("key.") for k in tensors):
        key = EmaEncoder(encoder_from_tensors(tensors, "key."), meta["ema"])
    if "queue.buffer" in tensors:
        q = meta["queue"]
        queue = MemoryQueue(q["size"], tensors["queue.buffer"].shape[1])
        queue.buffer = tensors["queue.buffer"].copy()
        queue.write_head, queue.filled = q["write_head"], q["filled"]
    return TrainState(params, opt, key, queue, meta["epochs_done"], meta.get("history", []))


def init_state(cfg: TrainConfig, n_mels: int = 40) -> TrainState:
    params = init_params(derive_seed(cfg.seed, "init"), cfg.hidden, cfg.embed_dim, n_mels)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    state = TrainState(params, opt)
    if cfg.framework == "moco":
        state.key = EmaEncoder.from_query(params, cfg.ema)
        state.queue = MemoryQueue(cfg.queue_size, cfg.embed_dim)
    return state


def _write_metrics(path: Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["epoch"], f"{row['mean_loss']:.12g}", f"{row['lr']:.12g}", f"{row['wall_seconds']:.3f}"])


def train(
    cfg: TrainConfig,
    corpus: Sequence[Utterance],
    out_dir,
    features: FeatureConfig = FeatureConfig(),
    policy: AugmentPolicy = AugmentPolicy(),
    resume: bool = True,
    max_epochs: int | None = None,
) -> TrainState:
    """Run (or continue) training, checkpointing after every epoch.

    Writes ``out_dir/checkpoint.bin`` (latest), ``out_dir/epoch_XXX.bin`` and
    ``out_dir/metrics.csv``.  Every epoch and step draws from generators
    derived from ``(cfg.seed, epoch, step)``, so a resumed run reproduces an
    uninterrupted one.  ``max_epochs`` stops early after that many epochs in
    this call (used to simulate interruption).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "checkpoint.bin"
    if resume and latest.exists():
        state = load_train_state(latest)
        log.info("resuming from %s after epoch %d", latest, state.epochs_done)
    else:
        state = init_state(cfg, features.n_mels)

    extractor = FeatureExtractor(features)
    labels = SpeakerLabelOracle.from_corpus(corpus)
    use_labels = labels if (cfg.prevent_collisions or cfg.cap_per_speaker is not None) else None
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epochs_done + max_epochs)

    for epoch in range(state.epochs_done, stop):
        started = time.perf_counter()
        state.opt.lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every)
        losses = []
        for step, batch in enumerate(build_batches(corpus, cfg, use_labels, rng_for(cfg.seed, "batches", epoch))):
            step_seed = derive_seed(cfg.seed, "step", epoch, step)
            rng = np.random.default_rng(step_seed)
            try:
                if cfg.framework == "simclr":
                    loss, state.params = simclr_step(batch, state.params, state.opt, cfg, rng, extractor, policy)
                else:
                    loss, state.params, state.key, state.queue = moco_step(
                        batch, state.params, state.opt, state.key, state.queue, cfg, rng, extractor, policy
                    )
            except (NonFiniteError, TrainingDivergedError) as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {step} (seed {step_seed}): {exc}", epoch, step, step_seed
                ) from exc
            losses.append(loss)
        if not losses:
            raise ConfigError("an epoch produced no batches; corpus too small for batch_size")
        state.epochs_done = epoch + 1
        state.history.append(
            {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": state.opt.lr,
             "wall_seconds": time.perf_counter() - started}
        )  # fmt: skip
        log.info("epoch %d  loss %.4f  lr %.6g", epoch, state.history[-1]["mean_loss"], state.opt.lr)
        save_train_state(out_dir / f"epoch_{epoch:03d}.bin", state, cfg)
        save_train_state(latest, state, cfg)
        _write_metrics(out_dir / "metrics.csv", state.history)
    return state
