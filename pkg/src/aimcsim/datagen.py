"""Synthetic sequence-data generation from a frozen teacher.

Three sampling strategies over the teacher's next-token distribution:
  SSS  every token sampled from the (optionally top-k truncated) softmax
  RGS  first token uniform over the vocabulary, then a greedy prefix,
       then softmax sampling
  SGS  first token softmax, then a greedy prefix, then softmax sampling
Sampling always runs to the requested length; an end-of-sequence token
has no special handling. Each sequence carries its total log-probability
under the teacher's untruncated softmax, used for optional filtering.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .models import BOS_TOKEN, TinyTransformer
from .streams import RngStream

__all__ = ["GenSpec", "SequenceDataset", "generate_sequences", "save_dataset", "load_dataset"]

STRATEGIES = ("SSS", "RGS", "SGS")

_MAGIC = b"AIMCDATA"
_VERSION = 1


@dataclass(frozen=True)
class GenSpec:
    strategy: str = "SSS"
    sequence_length: int = 8
    top_k: int | None = None
    greedy_prefix_len: int = 5
    filter_fraction: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")
        if not 0.0 <= self.filter_fraction < 1.0:
            raise ValueError("filter_fraction must lie in [0, 1)")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 when given")


@dataclass
class SequenceDataset:
    tokens: np.ndarray  # (count, seq_len) int32
    log_probs: np.ndarray  # (count,) float64
    vocab_size: int

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int32))
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.tokens.shape[0] != len(self.log_probs):
            raise ValueError("token rows and log-prob entries disagree")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


def _sample_softmax(logits: np.ndarray, top_k: int | None, stream: RngStream) -> int:
    if top_k is not None and top_k < logits.shape[0]:
        keep = np.argsort(logits, kind="stable")[-top_k:]
        probs = softmax(logits[keep])
        return int(keep[_draw(probs, stream)])
    return _draw(softmax(logits), stream)


def _draw(probs: np.ndarray, stream: RngStream) -> int:
    # inverse-CDF draw keeps the consumption of the stream at one uniform
    u = float(stream.uniform())
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, probs.shape[0] - 1))


def _pick_token(spec: GenSpec, position: int, logits: np.ndarray, stream: RngStream) -> int:
    greedy_span = range(1, 1 + spec.greedy_prefix_len)
    if spec.strategy == "RGS":
        if position == 0:
            return int(stream.uniform_int(0, logits.shape[0]))
        if position in greedy_span:
            return int(np.argmax(logits))
    elif spec.strategy == "SGS" and position in greedy_span:
        return int(np.argmax(logits))
    return _sample_softmax(logits, spec.top_k, stream)


def generate_sequences(teacher: TinyTransformer, spec: GenSpec, n: int, stream: RngStream) -> SequenceDataset:
    """Sample ``n`` sequences from the frozen teacher, then filter."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    vocab = teacher.vocab_size
    seqs = np.zeros((n, spec.sequence_length), dtype=np.int32)
    log_probs = np.zeros(n)
    for i in range(n):
        seq_stream = stream.split("sequence", repetition=i)
        context = [BOS_TOKEN]
        total = 0.0
        for pos in range(spec.sequence_length):
            logits = teacher.next_token_logits(np.array(context))
            token = _pick_token(spec, pos, logits, seq_stream)
            total += float(log_softmax(logits)[token])
            seqs[i, pos] = token
            context.append(token)
        log_probs[i] = total

    if spec.filter_fraction > 0 and n > 0:
        drop = int(spec.filter_fraction * n)
        if drop > 0:
            order = np.argsort(log_probs, kind="stable")
            keep = np.sort(order[drop:])
            seqs, log_probs = seqs[keep], log_probs[keep]
    return SequenceDataset(tokens=seqs, log_probs=log_probs, vocab_size=vocab)


def save_dataset(ds: SequenceDataset, path: str | Path, summary: dict | None = None) -> None:
    """Binary container plus a JSON sidecar with generation metadata."""
    path = Path(path)
    header = _MAGIC + struct.pack("<IIIQ", _VERSION, ds.vocab_size, ds.seq_len, len(ds))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(ds.tokens, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(ds.log_probs, dtype="<f8").tobytes())
    side = {"vocab_size": ds.vocab_size, "seq_len": ds.seq_len, "count": len(ds),
            "log_prob_mean": float(ds.log_probs.mean()) if len(ds) else None}
    if summary:
        side.update(summary)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> SequenceDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a sequence dataset (bad magic at offset 0)")
    version, vocab, seq_len, count = struct.unpack("<IIIQ", raw[8:28])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version} (expected {_VERSION})")
    tok_bytes = count * seq_len * 4
    expected = 28 + tok_bytes + count * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated at offset {len(raw)} (expected {expected} bytes)")
    tokens = np.frombuffer(raw, dtype="<i4", count=count * seq_len, offset=28).reshape(count, seq_len)
    log_probs = np.frombuffer(raw, dtype="<f8", count=count, offset=28 + tok_bytes)
    return SequenceDataset(tokens=tokens.copy(), log_probs=log_probs.copy(), vocab_size=vocab)
