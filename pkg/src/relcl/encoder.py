"""Frozen token embeddings with trainable head layers on top.

The base table stands in for a pretrained contextual encoder: its vectors
never change. Head layers (dense + nonlinearity) and an optional
self-attention mixer are the trainable part.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .numeric import Parameter, Tensor

log = logging.getLogger(__name__)

POOLING_MODES = ("mean", "max", "first")
ACTIVATIONS = ("relu", "tanh", "identity")
SIDECAR_SUFFIX = ".emb"


class EmbeddingError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class EmbeddingSource:
    """Per-record token embedding matrices, one row per real token."""

    matrices: dict
    dim: int
    mode: str = "file-loaded"

    def __post_init__(self):
        for rid, m in self.matrices.items():
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2 or m.shape[1] != self.dim:
                raise ValueError(f"{rid}: embedding matrix shape {m.shape} does not have {self.dim} columns")
            m.setflags(write=False)
            self.matrices[rid] = m

    def matrix(self, record) -> np.ndarray:
        try:
            m = self.matrices[record.id]
        except KeyError:
            raise EmbeddingError(f"no embeddings for record {record.id}") from None
        if m.shape[0] != len(record.tokens):
            raise EmbeddingError(f"{record.id}: {m.shape[0]} embedding rows for {len(record.tokens)} tokens")
        return m

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.dim}".encode())
        for rid in sorted(self.matrices):
            h.update(rid.encode())
            h.update(np.ascontiguousarray(self.matrices[rid], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, directory, text=False, extras=None):
        """Write one sidecar bundle per record.

        ``extras`` may map record ids to additional named matrices (for
        example node indices and a normalized adjacency).
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for rid in sorted(self.matrices):
            mats = {"embeddings": self.matrices[rid]}
            if extras and rid in extras:
                mats.update(extras[rid])
            nm.save_bundle(directory / f"{rid}{SIDECAR_SUFFIX}", mats, {"id": rid, "F": self.dim}, text=text)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        matrices, dim = {}, None
        for path in sorted(directory.glob(f"*{SIDECAR_SUFFIX}")):
            mats, meta = nm.load_bundle(path)
            rid = str(meta.get("id", path.stem))
            m = mats["embeddings"]
            if dim is None:
                dim = m.shape[1]
            elif m.shape[1] != dim:
                raise ValueError(f"{path.name}: dimension {m.shape[1]} differs from {dim}")
            matrices[rid] = m
        if dim is None:
            raise ValueError(f"{directory}: no {SIDECAR_SUFFIX} sidecar files")
        return cls(matrices, dim, "file-loaded")


def synth_embeddings(records, dim: int, seed: int = 0, jitter: float = 0.05, class_signal: float = 0.0) -> EmbeddingSource:
    """Deterministic stand-in for pretrained vectors.

    Each vocabulary type gets a random unit vector; a token instance adds
    ``jitter`` times a per-position random unit vector. With
    ``class_signal`` > 0 every type is blended with a shared direction for
    its entity class (DRUG, AE or none, by majority tag), mimicking the
    weak semantic-class structure of real pretrained vectors.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be at least 2")
    if not 0.0 <= class_signal < 1.0:
        raise ValueError("class_signal must lie in [0, 1)")
    vocab = sorted({t for r in records for t in r.tokens})
    rng = np.random.default_rng(seed)
    types = _unit_rows(rng.standard_normal((len(vocab), dim)))
    longest = max((len(r) for r in records), default=0)
    positions = _unit_rows(rng.standard_normal((longest, dim)))
    index = {w: i for i, w in enumerate(vocab)}
    if class_signal > 0:
        centers = _unit_rows(rng.standard_normal((3, dim)))
        votes = {}
        for r in records:
            for t, tag in zip(r.tokens, r.tags):
                votes.setdefault(t, Counter())[tag[2:] if tag != "O" else ""] += 1
        order = {"": 0, "DRUG": 1, "AE": 2}
        cls = [order[max(sorted(votes[w].items()), key=lambda kv: kv[1])[0]] for w in vocab]
        types = class_signal * centers[cls] + np.sqrt(1.0 - class_signal ** 2) * types
    matrices = {}
    for r in records:
        rows = types[[index[t] for t in r.tokens]] + jitter * positions[: len(r)]
        matrices[r.id] = rows
    return EmbeddingSource(matrices, dim, "deterministic-synthetic")


def _unit_rows(m):
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _activate(x, activation):
    if activation == "relu":
        return nm.relu(x)
    if activation == "tanh":
        return nm.tanh(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


class Dense:
    def __init__(self, name, in_dim, out_dim, activation="relu", rng=None, init="normal"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        if init == "zeros":
            w = np.zeros((in_dim, out_dim))
        elif init == "identity":
            w = np.eye(in_dim, out_dim) + rng.standard_normal((in_dim, out_dim)) * 0.01
        else:
            w = rng.standard_normal((in_dim, out_dim)) * np.sqrt(1.0 / in_dim)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros((1, out_dim)))
        self.activation = activation

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return _activate(nm.add(nm.matmul(x, self.weight), self.bias), self.activation)


class SelfAttentionMixer:
    """Residual single-head attention within each sentence."""

    def __init__(self, name, dim, rng=None):
        rng = np.random.default_rng(rng)
        s = np.sqrt(1.0 / dim)
        self.query = Parameter(f"{name}.query", rng.standard_normal((dim, dim)) * s)
        self.key = Parameter(f"{name}.key", rng.standard_normal((dim, dim)) * s)
        self.value = Parameter(f"{name}.value", rng.standard_normal((dim, dim)) * s)
        self.dim = dim

    def parameters(self):
        return [self.query, self.key, self.value]

    def __call__(self, x, lengths) -> Tensor:
        outs, start = [], 0
        for n in lengths:
            h = nm.take_rows(x, np.arange(start, start + n))
            q, k, v = nm.matmul(h, self.query), nm.matmul(h, self.key), nm.matmul(h, self.value)
            att = nm.softmax_rows(nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(self.dim)))
            outs.append(nm.add(h, nm.matmul(att, v)))
            start += n
        return nm.concat(outs, axis=0)


@dataclass
class EncoderStack:
    base: EmbeddingSource
    layers: list = field(default_factory=list)
    mixer: SelfAttentionMixer | None = None

    @classmethod
    def build(cls, base, n_layers=2, hidden=None, activation="relu", mixer=False, rng=None, init="normal", prefix="encoder"):
        rng = np.random.default_rng(rng)
        hidden = hidden or base.dim
        layers, d = [], base.dim
        for i in range(n_layers):
            layers.append(Dense(f"{prefix}.layer{i}", d, hidden, activation, rng, init))
            d = hidden
        mix = SelfAttentionMixer(f"{prefix}.mixer", d, rng) if mixer else None
        return cls(base, layers, mix)

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[1] if self.layers else self.base.dim

    def parameters(self):
        params = [p for layer in self.layers for p in layer.parameters()]
        if self.mixer is not None:
            params += self.mixer.parameters()
        return params

    def head(self, x, lengths=None) -> Tensor:
        h = nm.as_tensor(x)
        for layer in self.layers:
            h = layer(h)
        if self.mixer is not None:
            h = self.mixer(h, lengths if lengths is not None else [h.shape[0]])
        return h

    def embed_batch(self, records):
        """Token representations of several records stacked row-wise, plus row offsets."""
        mats = [self.base.matrix(r) for r in records]
        lengths = [m.shape[0] for m in mats]
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
        return self.head(np.vstack(mats), lengths), offsets

    def represent(self, record) -> np.ndarray:
        return embed_sentence(self, record).data


def embed_sentence(stack: EncoderStack, record) -> Tensor:
    return stack.head(stack.base.matrix(record), [len(record.tokens)])


def pool(matrix, mode="mean", mask=None) -> Tensor:
    """Pool the unmasked rows of a per-token matrix into one vector."""
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    x = nm.as_tensor(matrix)
    rows = np.arange(x.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask))
    if rows.size == 0:
        raise ValueError("pool: every row is masked")
    if rows.size != x.shape[0]:
        x = nm.take_rows(x, rows)
    return nm.reshape(nm.segment_pool(x, [x.shape[0]], mode), (-1,))
