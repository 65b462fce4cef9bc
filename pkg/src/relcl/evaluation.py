"""Strict entity/relation scoring, the relaxed head-pair metric, and fold averaging.

Entities are ``(start, end, type)`` with inclusive token bounds. Relations
are ``(drug_entity, ae_entity[, type])``. To score a whole corpus, prefix
every item with its sentence id so identical spans in different
sentences stay distinct.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import ENTITY_TYPES

RELATION_TYPE = "ADE"


@dataclass(frozen=True)
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def _match(pred, gold) -> Counts:
    p, g = set(pred), set(gold)
    tp = len(p & g)
    return Counts(tp, len(p) - tp, len(g) - tp)


def strict_entity_match(pred, gold) -> Counts:
    """Exact boundaries and type; duplicate predictions count once."""
    return _match((tuple(e) for e in pred), (tuple(e) for e in gold))


def _norm_relation(rel):
    rel = tuple(rel)
    if len(rel) == 2:
        rel = rel + (RELATION_TYPE,)
    head, tail, rtype = rel
    return tuple(head), tuple(tail), rtype


def strict_relation_match(pred, gold) -> Counts:
    """A relation counts only if its type and both entities match exactly."""
    return _match((_norm_relation(r) for r in pred), (_norm_relation(r) for r in gold))


def re_minus(pred_pairs, gold_pairs) -> Counts:
    """Ordered (drug head, AE head) token pairs, ignoring spans and types."""
    return _match((tuple(p) for p in pred_pairs), (tuple(p) for p in gold_pairs))


def prf(counts: Counts) -> PRF:
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    degenerate = tp + fp == 0 or tp + fn == 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f, degenerate or tp == 0)


def macro_prf(per_class) -> PRF:
    """Arithmetic mean of per-class precision, recall and F1."""
    scores = [prf(c) for c in per_class.values()]
    return PRF(
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
        any(s.degenerate for s in scores),
    )


@dataclass
class StrictScore:
    per_fold: list = field(default_factory=list)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


def cross_fold_aggregate(scores) -> StrictScore:
    """Average P, R and F1 independently over folds."""
    scores = list(scores)
    if not scores:
        raise ValueError("need at least one fold")
    return StrictScore(
        scores,
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
    )


# corpus-level helpers

def gold_entities(record):
    return [tuple(s) for s in record.spans]


def gold_relations(record):
    rels = []
    for d, a in record.relations:
        rels.append((record.entity_ending_at(d, "DRUG"), record.entity_ending_at(a, "AE"), RELATION_TYPE))
    return rels


@dataclass
class Prediction:
    id: str
    entities: list = field(default_factory=list)
    relations: list = field(default_factory=list)  # pairs of indices into entities
    head_pairs: list = field(default_factory=list)

    def relation_tuples(self):
        return [(tuple(self.entities[i]), tuple(self.entities[j]), RELATION_TYPE) for i, j in self.relations]

    def pairs(self):
        if self.head_pairs:
            return [tuple(p) for p in self.head_pairs]
        return [(self.entities[i][1], self.entities[j][1]) for i, j in self.relations]

    def to_dict(self):
        return {
            "id": self.id,
            "entities": [list(e) for e in self.entities],
            "relations": [list(r) for r in self.relations],
            "head_pairs": [list(p) for p in self.head_pairs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            str(d["id"]),
            [(int(s), int(e), str(t)) for s, e, t in d.get("entities", [])],
            [(int(i), int(j)) for i, j in d.get("relations", [])],
            [(int(i), int(j)) for i, j in d.get("head_pairs", [])],
        )


def write_predictions(predictions, path):
    lines = [json.dumps(p.to_dict(), sort_keys=True) for p in predictions]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_predictions(path):
    out = []
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip():
            out.append(Prediction.from_dict(json.loads(ln)))
    return out


def corpus_counts(records, predictions):
    """Entity counts per type, strict relation counts and RE- counts over a corpus."""
    by_id = {p.id: p for p in predictions}
    ent = {t: Counts() for t in ENTITY_TYPES}
    rel, loose = Counts(), Counts()
    for rec in records:
        pred = by_id.get(rec.id, Prediction(rec.id))
        for t in ENTITY_TYPES:
            ent[t] = ent[t] + strict_entity_match(
                [e for e in pred.entities if e[2] == t], [e for e in gold_entities(rec) if e[2] == t])
        rel = rel + strict_relation_match(pred.relation_tuples(), gold_relations(rec))
        loose = loose + re_minus(pred.pairs(), rec.relations)
    return ent, rel, loose


def score_report(records, predictions, modes=("ner", "re", "re-minus")) -> dict:
    """Machine-readable report: macro-averaged NER, strict RE, and RE-."""
    ent, rel, loose = corpus_counts(records, predictions)
    report = {}
    if "ner" in modes:
        m = macro_prf(ent)
        report["ner"] = {"precision": m.precision, "recall": m.recall, "f1": m.f1, "degenerate": m.degenerate,
                         "per_type": {t: vars(c) for t, c in ent.items()}}
    for mode, counts in (("re", rel), ("re-minus", loose)):
        if mode in modes:
            s = prf(counts)
            report[mode] = {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                            "degenerate": s.degenerate, "counts": vars(counts)}
    return report
