"""Contrastive models: CLGS (sentence vs. graph), CLDR (token pair vs. 2-node graph), CLNER (token vs. token)."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numeric as nm
from .corpus import START_TOKEN
from .encoder import Dense, EncoderStack, POOLING_MODES
from .graphs import GraphError
from .numeric import Parameter, Tensor

log = logging.getLogger(__name__)


class GcnLayer:
    def __init__(self, name, in_dim, out_dim, activation="tanh", rng=None):
        if activation not in ("tanh", "relu", "identity"):
            raise ValueError(f"unknown GCN activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.weight = Parameter(f"{name}.weight", rng.standard_normal((in_dim, out_dim)) * np.sqrt(1.0 / in_dim))
        self.activation = activation

    def parameters(self):
        return [self.weight]

    def __call__(self, adj, x) -> Tensor:
        return gcn_forward(self, adj, x)


def gcn_forward(layer: GcnLayer, adj, x) -> Tensor:
    """sigma(A_norm X W)."""
    adj = np.asarray(adj, dtype=np.float64)
    x = nm.as_tensor(x)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[1] != x.shape[0]:
        raise nm.ShapeError(f"gcn_forward: adjacency {adj.shape} does not fit features {x.shape}")
    h = nm.matmul(adj, nm.matmul(x, layer.weight))
    if layer.activation == "tanh":
        return nm.tanh(h)
    if layer.activation == "relu":
        return nm.relu(h)
    return h


def block_diagonal(blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


def _mean_weights(n):
    return np.full(n, 1.0 / n)


class ClgsModel:
    """Pooled sentence representation contrasted against pooled GCN graph representations."""

    kind = "clgs"

    def __init__(self, encoder: EncoderStack, gcn: GcnLayer, graph_pool="mean", text_pool="mean",
                 tau=0.1, projection=False, symmetric=False, rng=None):
        for mode in (graph_pool, text_pool):
            if mode not in POOLING_MODES:
                raise ValueError(f"unknown pooling mode {mode!r}")
        if graph_pool == "first":
            raise ValueError("graphs have no start node; use mean or max graph pooling")
        if gcn.weight.shape[1] != encoder.out_dim:
            raise nm.ShapeError("graph and sentence representations must have equal dimension")
        self.encoder, self.gcn = encoder, gcn
        self.graph_pool, self.text_pool = graph_pool, text_pool
        self.tau, self.symmetric = tau, symmetric
        d = encoder.out_dim
        rng = np.random.default_rng(rng)
        self.text_proj = Dense("clgs.text_proj", d, d, "relu", rng) if projection else None
        self.graph_proj = Dense("clgs.graph_proj", d, d, "relu", rng) if projection else None

    @property
    def projection(self):
        return self.text_proj is not None

    def parameters(self):
        params = self.encoder.parameters() + self.gcn.parameters()
        if self.projection:
            params += self.text_proj.parameters() + self.graph_proj.parameters()
        return params

    def sentence_reps(self, records) -> Tensor:
        if self.text_pool == "first":
            bad = [r.id for r in records if not r.tokens or r.tokens[0] != START_TOKEN]
            if bad:
                raise ValueError(f"first-token pooling needs a leading {START_TOKEN}: {bad[:3]}")
        h, _ = self.encoder.embed_batch(records)
        s = nm.segment_pool(h, [len(r.tokens) for r in records], self.text_pool)
        return self.text_proj(s) if self.projection else s

    def graph_reps(self, graphs) -> Tensor:
        x = np.vstack([g.node_features for g in graphs])
        adj = block_diagonal([g.adjacency for g in graphs])
        nodes = self.gcn(adj, x)
        g = nm.segment_pool(nodes, [gr.n_nodes for gr in graphs], self.graph_pool)
        return self.graph_proj(g) if self.projection else g

    def batch_loss(self, records, samples) -> Tensor:
        """Mean over sentences of the sentence-to-graph contrastive loss."""
        z = samples[0].count + 1
        if any(s.count + 1 != z for s in samples):
            raise ValueError("every sentence needs the same number of candidate graphs")
        b = len(records)
        s_rep = self.sentence_reps(records)
        g_rep = self.graph_reps([g for s in samples for g in s.candidates])
        sims = nm.cosine_rows(nm.take_rows(s_rep, np.repeat(np.arange(b), z)), g_rep)
        mask = np.zeros((b, z), dtype=bool)
        mask[:, 0] = True
        per_sentence = nm.info_nce(nm.reshape(sims, (b, z)), mask, self.tau)
        loss = nm.weighted_sum(per_sentence, _mean_weights(b))
        if self.symmetric:
            pos = nm.take_rows(g_rep, np.arange(b) * z)
            back = nm.cosine_rows(nm.take_rows(pos, np.repeat(np.arange(b), b)), nm.take_rows(s_rep, np.tile(np.arange(b), b)))
            term = nm.info_nce(nm.reshape(back, (b, b)), np.eye(b, dtype=bool), self.tau)
            loss = nm.add(loss, nm.weighted_sum(term, _mean_weights(b)))
        return loss

    def similarities(self, record, sample) -> np.ndarray:
        s = self.sentence_reps([record])
        g = self.graph_reps(sample.candidates)
        return nm.cosine_rows(nm.take_rows(s, np.zeros(g.shape[0], dtype=np.intp)), g).data


def clgs_loss(model: ClgsModel, record, graphs) -> Tensor:
    return model.batch_loss([record], [graphs])


class CldrModel:
    """Concatenated token-pair representations contrasted against 2-node graph relation representations."""

    kind = "cldr"

    def __init__(self, encoder: EncoderStack, gcn: GcnLayer, lam=0.8, tau=0.1):
        if gcn.weight.shape[1] != encoder.out_dim:
            raise nm.ShapeError("GCN output and encoder output dimensions must match")
        if not 0.5 < lam <= 1.0:
            raise GraphError(f"lambda must lie in (0.5, 1], got {lam}")
        self.encoder, self.gcn = encoder, gcn
        self.lam, self.tau = lam, tau

    def parameters(self):
        return self.encoder.parameters() + self.gcn.parameters()

    def graph_pair_reps(self, features, pairs) -> Tensor:
        """GCN over disjoint 2-node graphs; row m is drug-node output || AE-node output."""
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        m = len(pairs)
        adj = np.kron(np.eye(m), np.array([[self.lam, 1 - self.lam], [1 - self.lam, self.lam]]))
        nodes = self.gcn(adj, np.asarray(features)[pairs.reshape(-1)])
        return nm.reshape(nodes, (m, -1))

    @staticmethod
    def text_pair_reps(tokens: Tensor, pairs) -> Tensor:
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        return nm.reshape(nm.take_rows(tokens, pairs.reshape(-1)), (len(pairs), -1))

    def batch_loss(self, records, samples) -> Tensor:
        """Mean over sentences of the per-sentence sum over relations."""
        z = samples[0].count + 1
        if any(s.count + 1 != z for s in samples):
            raise ValueError("every sentence needs the same number of candidates per relation")
        if any(not r.relations for r in records):
            raise GraphError("CLDR needs at least one relation per sentence")
        h, offsets = self.encoder.embed_batch(records)
        base = np.vstack([self.encoder.base.matrix(r) for r in records])
        anchors, cands, weights = [], [], []
        for b, (rec, sample) in enumerate(zip(records, samples)):
            off = offsets[b]
            for r, pair in enumerate(rec.relations):
                anchors.append(np.add(pair, off))
                cands.append(np.add(pair, off))
                cands.extend(np.add(neg[r], off) for neg in sample.negative_pairs)
                weights.append(1.0 / len(records))
        n_rel = len(anchors)
        rs = self.text_pair_reps(h, anchors)
        rg = self.graph_pair_reps(base, cands)
        sims = nm.cosine_rows(nm.take_rows(rs, np.repeat(np.arange(n_rel), z)), rg)
        mask = np.zeros((n_rel, z), dtype=bool)
        mask[:, 0] = True
        per_relation = nm.info_nce(nm.reshape(sims, (n_rel, z)), mask, self.tau)
        return nm.weighted_sum(per_relation, np.array(weights))


def cldr_loss(model: CldrModel, record, graph_sets) -> Tensor:
    return model.batch_loss([record], [graph_sets])


@dataclass
class EntitySample:
    """Pooled token positions ``(record index, token index)`` and their tags."""

    positions: list
    tags: list

    def __len__(self):
        return len(self.positions)


def sample_balanced_entities(batch, per_class_quota=None, seed=0) -> EntitySample:
    """Draw an equal number of tokens per tag from a batch.

    Tag counts are taken over the whole batch first. The quota defaults to
    the smallest count among usable tags; tags with fewer than two tokens
    cannot supply a positive and are skipped.
    """
    rng = np.random.default_rng(seed)
    by_tag = {}
    for i, rec in enumerate(batch):
        for t, tag in enumerate(rec.tags):
            by_tag.setdefault(tag, []).append((i, t))
    usable = {tag: pos for tag, pos in by_tag.items() if len(pos) >= 2}
    for tag in sorted(set(by_tag) - set(usable)):
        log.debug("tag %s has a single token in this batch; skipped", tag)
    if not usable:
        return EntitySample([], [])
    quota = per_class_quota or min(len(p) for p in usable.values())
    positions, tags = [], []
    for tag in sorted(usable):
        pool = usable[tag]
        take = min(quota, len(pool))
        for k in sorted(rng.choice(len(pool), size=take, replace=False)):
            positions.append(pool[k])
            tags.append(tag)
    return EntitySample(positions, tags)


class ClnerModel:
    """Single dense layer over frozen embeddings, trained with a multi-positive token loss."""

    kind = "clner"

    def __init__(self, encoder: EncoderStack, tau=0.1):
        if len(encoder.layers) != 1:
            raise ValueError("CLNER uses exactly one dense head layer")
        self.encoder, self.tau = encoder, tau

    def parameters(self):
        return self.encoder.parameters()

    def batch_loss(self, records, sample: EntitySample) -> Tensor:
        """Sum over sampled anchors; each anchor's candidates are the other sampled tokens."""
        n = len(sample)
        counts = Counter(sample.tags)
        lonely = [t for t, c in counts.items() if c < 2]
        if n < 2 or lonely:
            raise ValueError(f"entity sample has no positive candidate for tags {lonely or sample.tags}")
        h, offsets = self.encoder.embed_batch(records)
        rows = np.array([offsets[i] + t for i, t in sample.positions], dtype=np.intp)
        reps = nm.take_rows(h, rows)
        cand = np.array([[k for k in range(n) if k != a] for a in range(n)], dtype=np.intp)
        anchor = np.repeat(np.arange(n), n - 1)
        sims = nm.cosine_rows(nm.take_rows(reps, anchor), nm.take_rows(reps, cand.reshape(-1)))
        tags = np.array(sample.tags)
        mask = tags[cand] == tags[:, None]
        per_anchor = nm.info_nce(nm.reshape(sims, (n, n - 1)), mask, self.tau)
        return nm.total(per_anchor)


def clner_loss(model: ClnerModel, records, sample: EntitySample) -> Tensor:
    return model.batch_loss(records, sample)


# checkpoints

def model_manifest(model) -> dict:
    enc = model.encoder
    m = {
        "kind": model.kind,
        "tau": model.tau,
        "encoder": {
            "layers": len(enc.layers),
            "hidden": enc.out_dim,
            "activation": enc.layers[0].activation if enc.layers else "identity",
            "mixer": enc.mixer is not None,
        },
        "embedding_dim": enc.base.dim,
        "embedding_fingerprint": enc.base.fingerprint(),
    }
    if model.kind in ("clgs", "cldr"):
        m["gcn"] = {"activation": model.gcn.activation, "out_dim": model.gcn.weight.shape[1]}
    if model.kind == "cldr":
        m["lambda"] = model.lam
    if model.kind == "clgs":
        m.update(graph_pool=model.graph_pool, text_pool=model.text_pool,
                 projection=model.projection, symmetric=model.symmetric)
    return m


def build_from_manifest(manifest: dict, base, rng=None):
    rng = np.random.default_rng(rng)
    e = manifest["encoder"]
    encoder = EncoderStack.build(base, e["layers"], e["hidden"], e["activation"], e["mixer"], rng)
    kind = manifest["kind"]
    if kind == "clner":
        return ClnerModel(encoder, manifest["tau"])
    gcn = GcnLayer(f"{kind}.gcn", base.dim, manifest["gcn"]["out_dim"], manifest["gcn"]["activation"], rng)
    if kind == "cldr":
        return CldrModel(encoder, gcn, manifest["lambda"], manifest["tau"])
    if kind == "clgs":
        return ClgsModel(encoder, gcn, manifest["graph_pool"], manifest["text_pool"], manifest["tau"],
                         manifest["projection"], manifest["symmetric"], rng)
    raise ValueError(f"unknown model kind {kind!r}")


def save_parameters(model, path, meta=None):
    nm.save_bundle(path, {p.name: p.data for p in model.parameters()}, meta)


def load_parameters(model, path):
    mats, _ = nm.load_bundle(path)
    for p in model.parameters():
        if p.name not in mats:
            raise KeyError(f"{path}: missing parameter {p.name}")
        if mats[p.name].shape != p.shape:
            mats[p.name] = mats[p.name].reshape(p.shape)
        p.data[...] = mats[p.name]
    return model


def save_model(model, directory, params_name="model.params"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = model_manifest(model)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    save_parameters(model, directory / params_name, {"kind": model.kind})


def load_model(directory, base, params_name="model.params"):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["embedding_fingerprint"] != base.fingerprint():
        log.warning("embedding fingerprint differs from the one the model was trained with")
    model = build_from_manifest(manifest, base)
    return load_parameters(model, directory / params_name)
