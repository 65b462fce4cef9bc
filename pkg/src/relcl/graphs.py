"""Relation graphs over sentence tokens and hard-negative graph sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


@dataclass
class RelationGraph:
    node_token_indices: tuple
    node_features: np.ndarray
    adjacency: np.ndarray
    normalized: bool = False
    pairs: tuple = ()
    # full per-token feature table of the sentence; negatives draw nodes from it
    token_features: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return len(self.node_token_indices)


@dataclass
class DisjointGraphSet:
    graphs: list
    lam: float

    @property
    def pairs(self):
        return tuple(g.pairs[0] for g in self.graphs)


@dataclass
class NegativeSampleSet:
    positive: object
    negatives: list = field(default_factory=list)
    positive_pairs: tuple = ()
    negative_pairs: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.negatives)

    @property
    def candidates(self):
        return [self.positive] + list(self.negatives)


def normalize_adjacency(adj) -> np.ndarray:
    """Symmetric renormalization D^-1/2 (A + I) D^-1/2, with D the degree of A + I."""
    a = np.asarray(adj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise GraphError("adjacency must be symmetric")
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    # sqrt of the degree product keeps integer-degree entries exact (e.g. 1/sqrt(4) = 0.5)
    return a_hat / np.sqrt(np.outer(deg, deg))


def lambda_adjacency(lam: float) -> np.ndarray:
    if not 0.5 < lam <= 1.0:
        raise GraphError(f"lambda must lie in (0.5, 1], got {lam}; at 0.5 both node outputs coincide")
    return np.array([[lam, 1.0 - lam], [1.0 - lam, lam]])


def graph_from_pairs(pairs, embeddings, normalize=True) -> RelationGraph:
    """Undirected graph on the union of pair endpoints, nodes in token order."""
    pairs = tuple((int(i), int(j)) for i, j in pairs)
    if not pairs:
        raise GraphError("a relation graph needs at least one relation")
    nodes = sorted({i for p in pairs for i in p})
    pos = {t: k for k, t in enumerate(nodes)}
    a = np.zeros((len(nodes), len(nodes)))
    for i, j in pairs:
        if i != j:
            a[pos[i], pos[j]] = a[pos[j], pos[i]] = 1.0
    feats = np.asarray(embeddings, dtype=np.float64)[nodes]
    adj = normalize_adjacency(a) if normalize else a
    return RelationGraph(tuple(nodes), feats, adj, normalize, pairs, np.asarray(embeddings, dtype=np.float64))


def build_subgraph(record, embeddings, normalize=True) -> RelationGraph:
    if not record.relations:
        raise GraphError(f"{record.id}: no relations, subgraph undefined")
    return graph_from_pairs(record.relations, embeddings, normalize)


def disjoint_from_pairs(pairs, embeddings, lam) -> DisjointGraphSet:
    adj = lambda_adjacency(lam)
    emb = np.asarray(embeddings, dtype=np.float64)
    graphs = [
        RelationGraph((int(d), int(a)), emb[[d, a]], adj.copy(), True, ((int(d), int(a)),), emb)
        for d, a in pairs
    ]
    return DisjointGraphSet(graphs, lam)


def build_disjoint_graphs(record, embeddings, lam: float = 0.8) -> DisjointGraphSet:
    """One 2-node graph per relation, node order (drug head, AE head)."""
    if not record.relations:
        raise GraphError(f"{record.id}: no relations to model")
    return disjoint_from_pairs(record.relations, embeddings, lam)


def _eligible(record, etype, keep):
    """Words outside every ``etype`` entity, excluding the kept endpoint."""
    inside = {i for s, e, t in record.spans if t == etype for i in range(s, e + 1)}
    return [i for i in record.word_indices if i not in inside and i != keep]


def corrupt_pairs(record, count, rng):
    """``count`` corrupted copies of the record's relation list.

    For every relation of every copy a fair coin picks whether the drug or
    the AE endpoint is replaced; the replacement is a token outside every
    entity of that type. Falls back to the other endpoint when one side
    has no eligible token.
    """
    rng = np.random.default_rng(rng)
    options = []
    for d, a in record.relations:
        drug_side = _eligible(record, "DRUG", a)
        ae_side = _eligible(record, "AE", d)
        if not drug_side and not ae_side:
            raise GraphError(f"{record.id}: no token available to corrupt relation ({d}, {a})")
        options.append((d, a, drug_side, ae_side))
    out = []
    for _ in range(count):
        pairs = []
        for d, a, drug_side, ae_side in options:
            flip_drug = rng.random() < 0.5
            if flip_drug and not drug_side:
                flip_drug = False
            elif not flip_drug and not ae_side:
                flip_drug = True
            if flip_drug:
                pairs.append((int(drug_side[rng.integers(len(drug_side))]), a))
            else:
                pairs.append((d, int(ae_side[rng.integers(len(ae_side))])))
        out.append(tuple(pairs))
    return out


def sample_negatives_clgs(record, graph, count, seed) -> NegativeSampleSet:
    if not record.relations:
        raise GraphError(f"{record.id}: no relations to corrupt")
    neg_pairs = corrupt_pairs(record, count, seed) if count else []
    emb = _token_features(graph, record)
    negatives = [graph_from_pairs(p, emb, graph.normalized) for p in neg_pairs]
    return NegativeSampleSet(graph, negatives, tuple(record.relations), neg_pairs)


def sample_negatives_cldr(record, graph_set, count, seed) -> NegativeSampleSet:
    if not record.relations:
        raise GraphError(f"{record.id}: no relations to corrupt")
    neg_pairs = corrupt_pairs(record, count, seed) if count else []
    emb = _token_features(graph_set.graphs[0], record)
    negatives = [disjoint_from_pairs(p, emb, graph_set.lam) for p in neg_pairs]
    return NegativeSampleSet(graph_set, negatives, tuple(record.relations), neg_pairs)


def _token_features(graph, record):
    if graph.token_features is None:
        raise GraphError(f"{record.id}: graph carries no per-token features to build negatives from")
    return graph.token_features
