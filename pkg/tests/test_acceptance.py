"""Acceptance criteria, each run at its stated tolerance and runtime budget.

A pass/fail line per criterion is printed in the pytest terminal summary.
Criterion 9 needs real ADE records and published splits, given through
RELCL_ADE_DATA and RELCL_ADE_SPLITS; it is skipped otherwise.
"""

import math
import os
import shutil
import time

import numpy as np
import pytest

from relcl import numeric as nm
from relcl.corpus import SentenceRecord, corpus_stats, encode_bio, load_corpus, load_folds, make_folds, synth_corpus
from relcl.encoder import EmbeddingSource, synth_embeddings
from relcl.evaluation import re_minus, strict_entity_match, strict_relation_match
from relcl.graphs import build_disjoint_graphs, build_subgraph, normalize_adjacency, sample_negatives_cldr, sample_negatives_clgs
from relcl.inference import (
    DEFAULT_K_GRID,
    KnnConfig,
    baseline_encoder,
    binary_f1,
    extract_entity_reps,
    extract_relation_reps,
    knn_classify,
    select_k,
    similarity_check,
)
from relcl.models import EntitySample, clgs_loss, cldr_loss, clner_loss, sample_balanced_entities
from relcl.pipeline import PipelineManifest, run_pipeline
from relcl.training import TrainConfig, build_model, make_samples, split_validation, train
from tests.conftest import fd_gradient, record_criterion

# Desk-scale settings shared by the learning criteria (4-6).
SYNTH_SENTENCES = 400
EMB_DIM = 64
LEARNING_RATE = 3e-3
SYNTH_MULTIWORD = 0.15
CLDR_Z = 16
KNN_NEGATIVES = 30
ACCEPTANCE_SEED = 0


def _check(number, ok, detail):
    record_criterion(number, ok, detail)
    assert ok, detail


# 1 ---------------------------------------------------------------------------

def _dense_oracle(a):
    a_hat = a + np.eye(len(a))
    d = np.diag(1.0 / np.sqrt(a_hat.sum(axis=1)))
    return d @ a_hat @ d


def test_criterion_1_adjacency_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        a = np.triu(rng.integers(0, 2, (n, n)), 1).astype(float)
        a = a + a.T
        worst = max(worst, float(np.abs(normalize_adjacency(a) - _dense_oracle(a)).max()))
    exact = np.array_equal(normalize_adjacency([[0, 1], [1, 0]]), [[0.5, 0.5], [0.5, 0.5]])
    elapsed = time.perf_counter() - t0
    _check(1, worst < 1e-12 and exact and elapsed < 5,
           f"max |err| {worst:.2e} (< 1e-12), 2-node exact {exact}, {elapsed:.2f}s (< 5s)")


# 2 ---------------------------------------------------------------------------

def _tiny_instance(rng, dim):
    """[CLS] + 5 words with 1-2 drugs and 1-2 AEs, fully related."""
    n_d, n_a = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    kinds = ["DRUG"] * n_d + ["AE"] * n_a + ["O"] * (5 - n_d - n_a)
    kinds = [kinds[i] for i in rng.permutation(5)]
    tokens = ["[CLS]"] + [f"{k.lower()}{i}" for i, k in enumerate(kinds)]
    spans = [(i + 1, i + 1, k) for i, k in enumerate(kinds) if k != "O"]
    drugs = [s[0] for s in spans if s[2] == "DRUG"]
    aes = [s[0] for s in spans if s[2] == "AE"]
    rec = SentenceRecord(f"g{rng.integers(1 << 30)}", tokens, encode_bio(spans, 6),
                         sorted((d, a) for d in drugs for a in aes)).validate()
    emb = EmbeddingSource({rec.id: rng.standard_normal((6, dim))}, dim)
    return rec, emb


def _gradient_error(loss_fn, params):
    """Relative 2-norm error between the analytic and finite-difference gradients of all parameters.

    The error is taken over the concatenated gradient vector so that a
    parameter the loss is flat in (both gradients at roundoff level) does not
    turn into a ratio of two noise terms.
    """
    nm.zero_grads(params)
    loss_fn().backward()
    analytic = np.concatenate([p.grad.ravel().copy() for p in params])
    numeric = []
    for p in params:
        orig = p.data.copy()

        def f(v, p=p):
            p.data[...] = v
            return float(loss_fn().data)

        numeric.append(fd_gradient(f, orig, eps=1e-4).ravel())
        p.data[...] = orig
    nm.zero_grads(params)
    numeric = np.concatenate(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric)))


def _relu_margin(loss_fn, monkeypatch):
    """Smallest |input| seen by any ReLU during one forward pass."""
    seen = [np.inf]
    plain = nm.relu

    def spy(a):
        seen[0] = min(seen[0], float(np.abs(nm.as_tensor(a).data).min()))
        return plain(a)

    monkeypatch.setattr(nm, "relu", spy)
    loss_fn()
    monkeypatch.setattr(nm, "relu", plain)
    return seen[0]


def test_criterion_2_gradients(monkeypatch):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    variants = [
        dict(model="clgs"),
        dict(model="clgs", graph_pool="max", text_pool="first", projection=True, symmetric=True),
        dict(model="cldr"),
        dict(model="cldr", head_activation="tanh", mixer=True),
        dict(model="clner"),
    ]
    worst, redrawn = {}, 0
    for trial in range(3):
        for v in variants:
            while True:
                dim = int(rng.integers(3, 9))
                z = int(rng.integers(2, 5))
                recs, embs = zip(*[_tiny_instance(rng, dim) for _ in range(2)])
                emb = EmbeddingSource({r.id: e.matrix(r) for r, e in zip(recs, embs)}, dim)
                model = build_model(TrainConfig(z=z, seed=trial, **v), emb)
                for p in model.parameters():  # nonzero biases, so ReLU inputs are not all on a kink
                    p.data += rng.standard_normal(p.shape) * 0.1
                samples = make_samples(model, list(recs), z, np.random.default_rng(trial))
                loss_fn = lambda: model.batch_loss(list(recs), samples)  # noqa: E731
                # central differences are only meaningful away from ReLU kinks
                if _relu_margin(loss_fn, monkeypatch) > 1e-3:
                    break
                redrawn += 1
            err = _gradient_error(loss_fn, model.parameters())
            key = "+".join(f"{k}={val}" for k, val in v.items())
            worst[key] = max(worst.get(key, 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    _check(2, top < 1e-4 and elapsed < 30, f"max relative error {top:.2e} (< 1e-4) over "
           f"{len(worst)} model variants x 3 instances ({redrawn} redrawn near a ReLU kink), {elapsed:.1f}s (< 30s)")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_loss_identities():
    recs = [r for r in synth_corpus(sentences=20, seed=11) if len(r.relations) >= 2]
    emb = synth_embeddings(recs, 8, seed=3)
    rec = recs[0]
    errors = {}

    errors["nll all-positive"] = abs(nm.contrastive_nll([1.0, 2.0], [[0.5, 0.1], [2.0, 3.0]], {0, 1}, 0.1).item())

    clgs = build_model(TrainConfig(model="clgs"), emb)
    g = build_subgraph(rec, emb.matrix(rec))
    errors["clgs Z=1"] = abs(clgs_loss(clgs, rec, sample_negatives_clgs(rec, g, 0, 0)).item())
    clgs.gcn.weight.data[...] = 0.0  # every graph representation identical
    for z in (2, 4, 8):
        errors[f"clgs log Z, Z={z}"] = abs(clgs_loss(clgs, rec, sample_negatives_clgs(rec, g, z - 1, 0)).item()
                                           - math.log(z))

    cldr = build_model(TrainConfig(model="cldr"), emb)
    gs = build_disjoint_graphs(rec, emb.matrix(rec))
    errors["cldr R=1,Z=1"] = abs(cldr_loss(cldr, rec, sample_negatives_cldr(
        rec.__class__(rec.id, rec.tokens, rec.tags, rec.relations[:1]), build_disjoint_graphs(
            rec.__class__(rec.id, rec.tokens, rec.tags, rec.relations[:1]), emb.matrix(rec)), 0, 0)).item())
    cldr.gcn.weight.data[...] = 0.0
    r = len(rec.relations)
    for z in (2, 4, 8):
        errors[f"cldr R log Z, Z={z}"] = abs(cldr_loss(cldr, rec, sample_negatives_cldr(rec, gs, z - 1, 0)).item()
                                             - r * math.log(z))

    clner = build_model(TrainConfig(model="clner"), emb)
    clner.encoder.layers[0].weight.data[...] = 0.0
    clner.encoder.layers[0].bias.data[...] = 1.0  # every token representation identical
    batch = recs[:3]
    sample = sample_balanced_entities(batch, 3, seed=0)
    n = len(sample)
    expected = sum(math.log((n - 1) / (sample.tags.count(t) - 1)) for t in sample.tags)
    errors["clner N log(K/P)"] = abs(clner_loss(clner, batch, sample).item() - expected)
    errors["clner all-positive"] = abs(clner_loss(clner, batch, EntitySample([(0, 1), (0, 2)], ["O", "O"])).item())

    worst = max(errors.values())
    _check(3, worst < 1e-9, f"max deviation {worst:.2e} (< 1e-9) over {len(errors)} closed forms")


# 4-6 shared data ------------------------------------------------------------

def _synthetic(seed=ACCEPTANCE_SEED):
    records = synth_corpus(sentences=SYNTH_SENTENCES, seed=seed, multiword=SYNTH_MULTIWORD)
    emb = synth_embeddings(records, EMB_DIM, seed=seed + 100)
    train_recs, test_recs = make_folds(records, 5, 0)[0].select(records)
    return records, emb, train_recs, test_recs


# 4 ---------------------------------------------------------------------------

def _relation_knn_f1(encoder, train_recs, test_recs):
    fit, val = split_validation(train_recs, 0.10, 0)
    fit_space = extract_relation_reps(encoder, fit, "gold-pairs", KNN_NEGATIVES, 0)
    val_q = extract_relation_reps(encoder, val, "all-candidate-pairs")
    k = select_k(fit_space, val_q.vectors, val_q.labels, DEFAULT_K_GRID)
    space = extract_relation_reps(encoder, train_recs, "gold-pairs", KNN_NEGATIVES, 0)
    queries = extract_relation_reps(encoder, test_recs, "all-candidate-pairs")
    return binary_f1(knn_classify(space, queries.vectors, KnnConfig(k)), queries.labels), k


def test_criterion_4_cldr_learning_signal():
    t0 = time.perf_counter()
    _, emb, train_recs, test_recs = _synthetic()
    cfg = TrainConfig(model="cldr", learning_rate=LEARNING_RATE, epochs=30, z=CLDR_Z,
                      head_activation="tanh", seed=ACCEPTANCE_SEED)
    model, history = train(cfg, train_recs, emb)
    ratio = history[-1]["train_loss"] / history[0]["train_loss"]
    tuned, k_tuned = _relation_knn_f1(model.encoder, train_recs, test_recs)
    base, k_base = _relation_knn_f1(baseline_encoder(emb), train_recs, test_recs)
    elapsed = time.perf_counter() - t0
    ok = ratio <= 0.5 and tuned >= 0.85 and tuned - base >= 0.10 and elapsed < 300
    _check(4, ok, f"loss epoch30/epoch1 {ratio:.3f} (<= 0.5), tuned F1 {tuned:.3f} (k={k_tuned}, >= 0.85), "
                  f"baseline F1 {base:.3f} (k={k_base}), gap {tuned - base:.3f} (>= 0.10), {elapsed:.0f}s (< 300s)")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_clgs_similarity_check():
    t0 = time.perf_counter()
    records, emb, train_recs, test_recs = _synthetic()
    cfg = TrainConfig(model="clgs", learning_rate=LEARNING_RATE, epochs=30, z=8, seed=ACCEPTANCE_SEED)
    untrained = similarity_check(build_model(cfg, emb), test_recs, 7, 0)
    model, _ = train(cfg, train_recs, emb)
    trained = similarity_check(model, test_recs, 7, 0)
    elapsed = time.perf_counter() - t0
    ok = trained >= 0.80 and abs(untrained - 1 / 8) <= 0.10 and elapsed < 300
    _check(5, ok, f"trained accuracy {trained:.3f} (>= 0.80), untrained {untrained:.3f} (0.125 +- 0.10), "
                  f"{elapsed:.0f}s (< 300s)")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_clner_separation():
    _, emb, train_recs, test_recs = _synthetic()
    cfg = TrainConfig(model="clner", learning_rate=LEARNING_RATE, epochs=30, seed=ACCEPTANCE_SEED)
    model, _ = train(cfg, train_recs, emb)
    queries = extract_entity_reps(model.encoder, test_recs)
    u = queries.vectors / np.linalg.norm(queries.vectors, axis=1, keepdims=True)
    sim = u @ u.T
    labels = np.array(queries.labels)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    gap = float(sim[same & off_diag].mean() - sim[~same].mean())
    space = extract_entity_reps(model.encoder, train_recs)
    accuracy = float(np.mean(np.array(knn_classify(space, queries.vectors, KnnConfig(5))) == labels))
    _check(6, gap >= 0.2 and accuracy >= 0.9,
           f"same-tag minus cross-tag cosine {gap:.3f} (>= 0.2), KNN tagging accuracy {accuracy:.3f} (>= 0.9)")


# 7 ---------------------------------------------------------------------------

def _brute_counts(pred, gold):
    """Nested-loop oracle: unique predictions, unique gold, pairwise equality."""
    p_unique, g_unique = [], []
    for x in pred:
        if all(x != y for y in p_unique):
            p_unique.append(x)
    for x in gold:
        if all(x != y for y in g_unique):
            g_unique.append(x)
    tp = 0
    for x in p_unique:
        for y in g_unique:
            if x == y:
                tp += 1
    return tp, len(p_unique) - tp, len(g_unique) - tp


def _random_spans(rng, length=10):
    """Non-overlapping typed spans, as any BIO tag sequence decodes to."""
    spans, i = [], 0
    while i < length:
        if rng.random() < 0.35:
            end = min(length - 1, i + int(rng.integers(0, 3)))
            spans.append((i, end, ["DRUG", "AE"][int(rng.integers(2))]))
            i = end + 1
        i += 1
    return spans


def test_criterion_7_strict_evaluation_oracles():
    rng = np.random.default_rng(77)
    mismatches = order_violations = 0
    for _ in range(500):
        gold_ents = _random_spans(rng)
        # predictions keep some gold spans and re-draw the rest, staying non-overlapping
        pred_ents = [e for e in gold_ents if rng.random() < 0.6]
        taken = {i for s, e, _ in pred_ents for i in range(s, e + 1)}
        pred_ents += [e for e in _random_spans(rng) if not taken & set(range(e[0], e[1] + 1))]
        drugs_g = [e for e in gold_ents if e[2] == "DRUG"] or [(0, 0, "DRUG")]
        aes_g = [e for e in gold_ents if e[2] == "AE"] or [(1, 1, "AE")]
        drugs_p = [e for e in pred_ents if e[2] == "DRUG"] or [(0, 0, "DRUG")]
        aes_p = [e for e in pred_ents if e[2] == "AE"] or [(1, 1, "AE")]
        gold_rels = [(drugs_g[int(rng.integers(len(drugs_g)))], aes_g[int(rng.integers(len(aes_g)))], "ADE")
                     for _ in range(int(rng.integers(0, 4)))]
        pred_rels = [(drugs_p[int(rng.integers(len(drugs_p)))], aes_p[int(rng.integers(len(aes_p)))], "ADE")
                     for _ in range(int(rng.integers(0, 4)))]
        pred_rels += [r for r in gold_rels if rng.random() < 0.4]
        heads = lambda rels: [(d[1], a[1]) for d, a, _ in rels]  # noqa: E731

        got = strict_entity_match(pred_ents, gold_ents)
        mismatches += (got.tp, got.fp, got.fn) != _brute_counts(pred_ents, gold_ents)
        rel = strict_relation_match(pred_rels, gold_rels)
        mismatches += (rel.tp, rel.fp, rel.fn) != _brute_counts(pred_rels, gold_rels)
        loose = re_minus(heads(pred_rels), heads(gold_rels))
        mismatches += (loose.tp, loose.fp, loose.fn) != _brute_counts(heads(pred_rels), heads(gold_rels))
        order_violations += rel.tp > loose.tp
    _check(7, mismatches == 0 and order_violations == 0,
           f"500 random cases: {mismatches} oracle mismatches, {order_violations} cases with RE TP > RE- TP")


# 8 ---------------------------------------------------------------------------

DETERMINISM_CONFIG = """\
synth_sentences = 80
folds = 5
fold_ids = 1,2
emb_dim = 16
epochs = 3
learning_rate = 0.003
clner.epochs = 3
knn_negatives = 10
"""


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".params", ".space", ".json", ".jsonl")}


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(DETERMINISM_CONFIG)
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        # same manifest both times: the second run starts from an empty output directory
        shutil.rmtree(out, ignore_errors=True)
        assert run_pipeline(PipelineManifest(str(out), config=str(cfg), seed=5)) == 0
        snapshots.append(_snapshot(out))
    first, second = snapshots
    differing = sorted(set(first) ^ set(second)) + [f for f in first if f in second and first[f] != second[f]]
    kinds = {"checkpoints": sum(f.endswith(".params") for f in first),
             "spaces": sum(f.endswith(".space") for f in first),
             "reports": sum(f.endswith("report.json") for f in first)}
    _check(8, not differing and all(kinds.values()),
           f"{len(first)} artifacts compared ({kinds}), differing: {differing or 'none'}")


# 9 ---------------------------------------------------------------------------

ADE_DATA = os.environ.get("RELCL_ADE_DATA")
ADE_SPLITS = os.environ.get("RELCL_ADE_SPLITS")


@pytest.mark.skipif(not (ADE_DATA and ADE_SPLITS), reason="set RELCL_ADE_DATA and RELCL_ADE_SPLITS to real ADE records/splits")
def test_criterion_9_ade_statistics():
    t0 = time.perf_counter()
    records = load_corpus(ADE_DATA)
    total = corpus_stats(records)
    train_recs, test_recs = load_folds(ADE_SPLITS)[0].select(records)
    tr, te = corpus_stats(train_recs), corpus_stats(test_recs)
    elapsed = time.perf_counter() - t0
    got = (total.sentence_count, total.relation_count, tr.relation_count, te.relation_count)
    _check(9, got == (4272, 6821, 6155, 666) and elapsed < 10,
           f"sentences/relations/split-1 train/test relations = {got} (want (4272, 6821, 6155, 666)), {elapsed:.1f}s")
