"""Representation spaces, exact KNN, and the two intermediate evaluation protocols."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .encoder import EncoderStack
from .graphs import build_subgraph, corrupt_pairs, sample_negatives_clgs

log = logging.getLogger(__name__)

RELATION = "relation"
NO_RELATION = "no-relation"
SPACE_MAGIC = "RELCL-SPACE 1"
DEFAULT_K_GRID = (1, 3, 5, 7, 9, 11)


@dataclass
class TrainedSpace:
    """Labeled vectors; ``keys`` identify the source (record id plus token indices)."""

    kind: str
    vectors: np.ndarray
    labels: list
    fingerprint: str = ""
    keys: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 and len(self.labels) == 0:
            self.vectors = self.vectors.reshape(0, 0)
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.vectors.shape[0]} vectors")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def save(self, path):
        """Header line, ``<dim> <count> <kind> <fingerprint>``, then ``label key v1 v2 ...`` rows."""
        lines = [SPACE_MAGIC, f"{self.dim} {len(self)} {self.kind} {self.fingerprint or '-'}"]
        keys = self.keys or [()] * len(self)
        for label, key, vec in zip(self.labels, keys, self.vectors):
            k = ":".join(str(x) for x in key) or "-"
            lines.append(" ".join([label, k] + [repr(float(x)) for x in vec]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != SPACE_MAGIC:
            raise ValueError(f"{path}: not a space file")
        dim, count, kind, fp = lines[1].split()
        dim, count = int(dim), int(count)
        labels, keys, vecs = [], [], []
        for ln in lines[2:2 + count]:
            parts = ln.split()
            labels.append(parts[0])
            keys.append(tuple(_key_part(x) for x in parts[1].split(":")) if parts[1] != "-" else ())
            vecs.append([float(x) for x in parts[2:]])
        vectors = np.array(vecs, dtype=np.float64).reshape(count, dim)
        return cls(kind, vectors, labels, "" if fp == "-" else fp, keys)


def _key_part(x):
    try:
        return int(x)
    except ValueError:
        return x


def baseline_encoder(base) -> EncoderStack:
    """The frozen embeddings with no trainable head."""
    return EncoderStack(base)


def _token_matrix(encoder, record):
    return encoder.represent(record)


def candidate_pairs(record):
    """Ordered pairs of distinct words; T words give T(T-1) candidates."""
    words = record.word_indices
    return [(i, j) for i in words for j in words if i != j]


def extract_relation_reps(encoder, records, mode="gold-pairs", negatives_per_relation=7, seed=0) -> TrainedSpace:
    """Relation vectors (concatenated token representations) for a set of records.

    ``gold-pairs``: annotated relations plus hard negatives drawn with the
    same corruption rule used in training. ``all-candidate-pairs``: every
    ordered pair of distinct tokens, labeled against the annotation.
    """
    rng = np.random.default_rng(seed)
    vecs, labels, keys = [], [], []
    for rec in records:
        h = _token_matrix(encoder, rec)
        gold = set(rec.relations)
        if mode == "all-candidate-pairs":
            pairs = candidate_pairs(rec)
            lab = [RELATION if p in gold else NO_RELATION for p in pairs]
        elif mode == "gold-pairs":
            if not rec.relations:
                continue
            pairs = list(rec.relations)
            lab = [RELATION] * len(pairs)
            seen = set(pairs)
            for neg in corrupt_pairs(rec, negatives_per_relation, rng):
                for p in neg:
                    if p not in seen:
                        seen.add(p)
                        pairs.append(p)
                        lab.append(NO_RELATION)
        else:
            raise ValueError(f"unknown extraction mode {mode!r}")
        if not pairs:
            continue
        idx = np.asarray(pairs, dtype=np.intp)
        vecs.append(np.hstack([h[idx[:, 0]], h[idx[:, 1]]]))
        labels.extend(lab)
        keys.extend((rec.id, int(i), int(j)) for i, j in pairs)
    dim = 2 * encoder.out_dim
    vectors = np.vstack(vecs) if vecs else np.zeros((0, dim))
    return TrainedSpace("relation", vectors, labels, encoder.base.fingerprint(), keys)


def extract_entity_reps(encoder, records) -> TrainedSpace:
    vecs, labels, keys = [], [], []
    for rec in records:
        vecs.append(_token_matrix(encoder, rec))
        labels.extend(rec.tags)
        keys.extend((rec.id, t) for t in range(len(rec.tokens)))
    vectors = np.vstack(vecs) if vecs else np.zeros((0, encoder.out_dim))
    return TrainedSpace("entity", vectors, labels, encoder.base.fingerprint(), keys)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    metric: str = "cosine"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


def _unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def nearest(space: TrainedSpace, queries, k: int, metric="cosine", chunk=2048) -> np.ndarray:
    """Indices of the k nearest stored vectors per query; distance ties go to the lower index."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if k > len(space):
        raise ValueError(f"k={k} exceeds the {len(space)} stored vectors")
    out = np.empty((q.shape[0], k), dtype=np.intp)
    stored = _unit(space.vectors) if metric == "cosine" else space.vectors
    sq = np.sum(stored * stored, axis=1)
    for s in range(0, q.shape[0], chunk):
        block = q[s:s + chunk]
        if metric == "cosine":
            dist = 1.0 - _unit(block) @ stored.T
        else:
            dist = np.sum(block * block, axis=1)[:, None] - 2.0 * block @ stored.T + sq[None, :]
        out[s:s + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def _vote(labels):
    counts = Counter(labels)
    top = max(counts.values())
    # majority ties: the tied label seen first, i.e. the one with the nearest member
    for lab in labels:
        if counts[lab] == top:
            return lab


def knn_classify(space: TrainedSpace, queries, config: KnnConfig = KnnConfig()) -> list:
    if len(space) == 0:
        raise ValueError("empty space")
    idx = nearest(space, queries, config.k, config.metric)
    labels = space.labels
    return [_vote([labels[i] for i in row]) for row in idx]


def binary_f1(pred, gold, positive=RELATION) -> float:
    tp = sum(p == positive and g == positive for p, g in zip(pred, gold))
    fp = sum(p == positive and g != positive for p, g in zip(pred, gold))
    fn = sum(p != positive and g == positive for p, g in zip(pred, gold))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def macro_f1(pred, gold, ignore=("O",)) -> float:
    """Mean per-class F1 over every non-ignored tag seen in gold or predictions."""
    classes = sorted((set(gold) | set(pred)) - set(ignore))
    if not classes:
        return 0.0
    return float(np.mean([binary_f1(pred, gold, c) for c in classes]))


def select_k(space, queries, labels, k_grid=DEFAULT_K_GRID, metric="cosine") -> int:
    """Grid k with the best validation F1; ties go to the smallest k."""
    if len(labels) == 0:
        raise ValueError("empty validation set")
    grid = sorted(set(k_grid))
    if not grid:
        raise ValueError("empty k grid")
    if grid[-1] > len(space):
        raise ValueError(f"k={grid[-1]} exceeds the {len(space)} stored vectors")
    score = binary_f1 if space.kind == "relation" else macro_f1
    idx = nearest(space, queries, grid[-1], metric)
    best_k, best = grid[0], -1.0
    for k in grid:
        pred = [_vote([space.labels[i] for i in row[:k]]) for row in idx]
        f = score(pred, list(labels))
        if f > best:
            best_k, best = k, f
    return best_k


def similarity_check(model, records, negatives=7, seed=0) -> float:
    """Fraction of sentences whose true graph is strictly the most similar candidate."""
    rng = np.random.default_rng(seed)
    wins = total = 0
    for rec in records:
        if not rec.relations:
            continue
        emb = model.encoder.base.matrix(rec)
        sample = sample_negatives_clgs(rec, build_subgraph(rec, emb), negatives, rng)
        sims = model.similarities(rec, sample)
        total += 1
        wins += bool(np.all(sims[0] > sims[1:]))
    if total == 0:
        raise ValueError("no relation-bearing records to check")
    return wins / total


@dataclass
class ProbeResult:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def fit_logistic(x, y, seed=0, epochs=300, learning_rate=0.05) -> tuple:
    """Single linear layer + sigmoid trained with ADAM on the mean cross-entropy."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    w = nm.Parameter("probe.weight", rng.standard_normal((x.shape[1], 1)) * 0.01)
    b = nm.Parameter("probe.bias", np.zeros((1, 1)))
    state = nm.AdamState(learning_rate=learning_rate)
    n = len(y)
    for _ in range(epochs):
        z = (x @ w.data + b.data)[:, 0]
        p = 1.0 / (1.0 + np.exp(-z))
        g = (p - y) / n
        w.grad[...] = x.T @ g[:, None]
        b.grad[...] = g.sum()
        nm.adam_step([w, b], state)
    return w.data.copy(), b.data.copy()


def predict_logistic(params, x) -> np.ndarray:
    w, b = params
    return ((np.asarray(x) @ w + b)[:, 0] > 0.0).astype(int)


def probe_scores(pred, gold) -> ProbeResult:
    pred, gold = np.asarray(pred, dtype=bool), np.asarray(gold, dtype=bool)
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    degenerate = tp + fp == 0 or tp + fn == 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return ProbeResult(p, r, f, degenerate)


def linear_probe(encoder, train_records, test_records, seed=0, negatives_per_relation=7, epochs=300) -> ProbeResult:
    """Linear relation classifier over frozen relation vectors, scored on all test candidates."""
    train = extract_relation_reps(encoder, train_records, "gold-pairs", negatives_per_relation, seed)
    test = extract_relation_reps(encoder, test_records, "all-candidate-pairs")
    y = np.array([lab == RELATION for lab in train.labels], dtype=float)
    params = fit_logistic(train.vectors, y, seed, epochs)
    pred = predict_logistic(params, test.vectors)
    return probe_scores(pred, [lab == RELATION for lab in test.labels])
