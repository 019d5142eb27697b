"""Frame MLP + self-attentive pooling (SAP) utterance encoder and checkpoint I/O.

Per frame ``x_t`` (a row of the log-mel matrix)::

    h_t    = tanh(tanh(x_t W1 + b1) W2 + b2)
    e_t    = q . tanh(h_t Wa + ba)
    a      = softmax_t(e)
    pooled = sum_t a_t h_t
    z      = pooled Wo + bo
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import MelSpectrogram

SAP_FORMULA = "a_t = softmax_t(q . tanh(h_t Wa + ba)); pooled = sum_t a_t h_t"
CHECKPOINT_FORMAT = "marginssl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderParams:
    W1: np.ndarray  # (n_mels, H)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    sap_W: np.ndarray  # (H, H)
    sap_b: np.ndarray  # (H,)
    sap_q: np.ndarray  # (H,)
    out_W: np.ndarray  # (H, D)
    out_b: np.ndarray  # (D,)

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.out_W.shape[1]

    @property
    def n_mels(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @classmethod
    def from_dict(cls, d: Mapping[str, np.ndarray]) -> "EncoderParams":
        missing = set(cls.names()) - set(d)
        if missing:
            raise KeyError(f"missing encoder parameters: {sorted(missing)}")
        p = cls(**{n: np.asarray(d[n], dtype=np.float64) for n in cls.names()})
        p.validate()
        return p

    def validate(self) -> None:
        n_mels, H, D = self.n_mels, self.hidden, self.embed_dim
        expected = {
            "W1": (n_mels, H), "b1": (H,), "W2": (H, H), "b2": (H,), "sap_W": (H, H),
            "sap_b": (H,), "sap_q": (H,), "out_W": (H, D), "out_b": (D,),
        }  # fmt: skip
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(a, requires_grad=requires_grad) for n, a in self.as_dict().items()}


def init_params(seed: int, hidden: int = 64, embed_dim: int = 32, n_mels: int = 40) -> EncoderParams:
    """Uniform init in ``[-s, s]`` with ``s = sqrt(1 / fan_in)`` per layer."""
    if hidden < 1 or embed_dim < 1:
        raise ValueError("hidden and embed_dim must be positive")
    rng = np.random.default_rng(seed)

    def u(fan_in, *shape):
        s = np.sqrt(1.0 / fan_in)
        return rng.uniform(-s, s, size=shape)

    H, D = hidden, embed_dim
    return EncoderParams(
        W1=u(n_mels, n_mels, H), b1=u(n_mels, H),
        W2=u(H, H, H), b2=u(H, H),
        sap_W=u(H, H, H), sap_b=u(H, H), sap_q=u(H, H),
        out_W=u(H, H, D), out_b=u(H, D),
    )  # fmt: skip


def _as_tensors(p) -> Mapping[str, Tensor]:
    return p.tensors() if isinstance(p, EncoderParams) else p


def _forward(frames: np.ndarray, P: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    X = Tensor(frames)
    h = ad.tanh(ad.add(ad.matmul(X, P["W1"]), P["b1"]))
    h = ad.tanh(ad.add(ad.matmul(h, P["W2"]), P["b2"]))
    scores = ad.sum_rows(ad.mul(ad.tanh(ad.add(ad.matmul(h, P["sap_W"]), P["sap_b"])), P["sap_q"]))
    attn = ad.softmax_rows(ad.transpose(scores))  # (1, T)
    pooled = ad.matmul(attn, h)
    return ad.add(ad.matmul(pooled, P["out_W"]), P["out_b"]), attn


def _frames(m) -> np.ndarray:
    frames = m.frames if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"expected a (T >= 1, n_mels) feature matrix, got shape {frames.shape}")
    return frames


def encode(m, params) -> Tensor:
    """Raw (unnormalized) embedding as a (1, D) tensor.

    ``params`` is either an :class:`EncoderParams` (no gradient) or a mapping
    of parameter tensors, e.g. ``params.tensors(requires_grad=True)``.
    """
    return _forward(_frames(m), _as_tensors(params))[0]


def attention_weights(m, params) -> np.ndarray:
    """SAP weights over the frames of one utterance, shape (T,)."""
    return _forward(_frames(m), _as_tensors(params))[1].data[0].copy()


@dataclass(frozen=True)
class EmbeddingBatch:
    raw: Tensor
    normalized: Tensor


def encode_batch(ms: Sequence, params) -> EmbeddingBatch:
    if len(ms) == 0:
        raise ValueError("encode_batch needs at least one input")
    P = _as_tensors(params)
    rows = []
    for i, m in enumerate(ms):
        try:
            rows.append(encode(m, P))
        except Exception as exc:
            raise type(exc)(f"input {i}: {exc}") from exc
    raw = ad.concat_rows(rows)
    return EmbeddingBatch(raw=raw, normalized=ad.l2_normalize_rows(raw))


def embed(m, params: EncoderParams) -> np.ndarray:
    """Numpy convenience: raw embedding of one input as a (D,) vector."""
    return encode(m, params).data[0].copy()


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """One JSON header line, then the tensors as contiguous little-endian float64.

    Header offsets are byte offsets from the first byte after the header line.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "tensors": entries, "meta": dict(meta or {})}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        body = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(body):
            raise ValueError(f"{path}: tensor {e['name']!r} runs past end of file")
        tensors[e["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save_encoder(path, params: EncoderParams, meta: Mapping | None = None) -> None:
    info = {"sap": SAP_FORMULA, "hidden": params.hidden, "embed_dim": params.embed_dim, "n_mels": params.n_mels}
    info.update(meta or {})
    save_checkpoint(path, {f"encoder.{k}": v for k, v in params.as_dict().items()}, info)


def load_encoder(path) -> EncoderParams:
    tensors, _ = load_checkpoint(path)
    return encoder_from_tensors(tensors)


def encoder_from_tensors(tensors: Mapping[str, np.ndarray], prefix: str = "encoder.") -> EncoderParams:
    return EncoderParams.from_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
