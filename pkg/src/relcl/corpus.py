"""Annotated sentence records: loading, validation, BIO encoding, folds, statistics.

Each sentence lives in its own JSON file with the keys ``id``, ``tokens``,
``tags``, ``relations`` (pairs of ``[drug_head, ae_head]`` token indices),
``encoded`` and ``attention_mask``. Tokens arrive pre-tokenized.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ENTITY_TYPES = ("DRUG", "AE")
TAGS = ("O", "B-DRUG", "I-DRUG", "B-AE", "I-AE")
PAD_ID = 0
UNK_ID = 1
START_TOKEN = "[CLS]"


class CorpusError(ValueError):
    pass


class BioError(CorpusError):
    def __init__(self, message, index=None, record_id=None):
        super().__init__(message)
        self.index = index
        self.record_id = record_id


def check_bio(tags, record_id=None):
    """Raise :class:`BioError` at the first tag that breaks the BIO rules."""
    prev = "O"
    for i, tag in enumerate(tags):
        if tag not in TAGS:
            raise BioError(f"{record_id}: unknown tag {tag!r} at index {i}", i, record_id)
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            raise BioError(f"{record_id}: {tag} at index {i} does not continue an entity", i, record_id)
        prev = tag


def encode_bio(spans, n_tokens: int) -> list[str]:
    """Tags for inclusive ``(start, end, type)`` spans over ``n_tokens`` tokens."""
    tags = ["O"] * n_tokens
    for start, end, etype in sorted(spans):
        if etype not in ENTITY_TYPES:
            raise CorpusError(f"unknown entity type {etype!r}")
        if not 0 <= start <= end < n_tokens:
            raise CorpusError(f"span ({start}, {end}) outside sentence of {n_tokens} tokens")
        if any(t != "O" for t in tags[start:end + 1]):
            raise CorpusError(f"span ({start}, {end}, {etype}) overlaps another span")
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end + 1):
            tags[i] = f"I-{etype}"
    return tags


def decode_bio(tags) -> list[tuple[int, int, str]]:
    """Spans from a tag sequence.

    An I-X that does not continue an X entity opens a new one, as if it
    were B-X.
    """
    spans = []
    start, etype = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        kind, _, t = tag.partition("-")
        if start is not None and (kind != "I" or t != etype):
            spans.append((start, i - 1, etype))
            start, etype = None, None
        if kind == "B" or (kind == "I" and start is None):
            start, etype = i, t
    return spans


def relation_heads(drug_span, ae_span) -> tuple[int, int]:
    """Entities are represented in relations by their last token."""
    return int(drug_span[1]), int(ae_span[1])


@dataclass(frozen=True)
class SentenceRecord:
    id: str
    tokens: tuple
    tags: tuple
    relations: tuple = ()
    encoded: tuple = ()
    attention_mask: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "relations", tuple(tuple(int(i) for i in r) for r in self.relations))
        object.__setattr__(self, "encoded", tuple(int(i) for i in self.encoded))
        object.__setattr__(self, "attention_mask", tuple(int(i) for i in self.attention_mask))

    def __len__(self):
        return len(self.tokens)

    @property
    def word_indices(self):
        """Positions of real words, i.e. everything except the start token."""
        return [i for i, t in enumerate(self.tokens) if t != START_TOKEN]

    @property
    def spans(self):
        return decode_bio(self.tags)

    def entity_ending_at(self, index, etype=None):
        for span in self.spans:
            if span[1] == index and (etype is None or span[2] == etype):
                return span
        return None

    def validate(self):
        rid = self.id
        if len(self.tags) != len(self.tokens):
            raise CorpusError(f"{rid}: {len(self.tags)} tags for {len(self.tokens)} tokens")
        check_bio(self.tags, rid)
        n = len(self.tokens)
        if len(set(self.relations)) != len(self.relations):
            raise CorpusError(f"{rid}: duplicate relation pairs")
        for pair in self.relations:
            if len(pair) != 2:
                raise CorpusError(f"{rid}: relation {pair} is not a pair")
            for idx, etype in zip(pair, ENTITY_TYPES):
                if not 0 <= idx < n:
                    raise CorpusError(f"{rid}: relation index {idx} out of range")
                if self.entity_ending_at(idx, etype) is None:
                    raise CorpusError(f"{rid}: relation index {idx} is not the last token of a {etype} entity")
        if self.attention_mask or self.encoded:
            if len(self.encoded) != len(self.attention_mask):
                raise CorpusError(f"{rid}: encoded and attention_mask lengths differ")
            if list(self.attention_mask) != [1] * n + [0] * (len(self.attention_mask) - n):
                raise CorpusError(f"{rid}: attention mask must be a prefix of {n} ones")
        return self

    def to_dict(self):
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "tags": list(self.tags),
            "relations": [list(r) for r in self.relations],
            "encoded": list(self.encoded),
            "attention_mask": list(self.attention_mask),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            id=str(d["id"]),
            tokens=d["tokens"],
            tags=d["tags"],
            relations=d.get("relations", []),
            encoded=d.get("encoded", []),
            attention_mask=d.get("attention_mask", []),
        )


def write_corpus(records, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        text = json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True)
        (directory / f"{rec.id}.json").write_text(text + "\n", encoding="utf-8")


def load_corpus(directory) -> list[SentenceRecord]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"{directory} is not a directory")
    records = []
    for path in sorted(directory.glob("*.json")):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            rec = SentenceRecord.from_dict(data)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path.name}: cannot parse record ({exc})") from exc
        records.append(rec.validate())
    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"{directory}: duplicate record ids")
    return records


def build_vocab(records) -> dict:
    words = sorted({t for r in records for t in r.tokens})
    return {w: i + 2 for i, w in enumerate(words)}


def encode_records(records, vocab=None, pad_to=None):
    """Fill ``encoded``/``attention_mask``; padding length defaults to the longest sentence."""
    records = list(records)
    vocab = vocab if vocab is not None else build_vocab(records)
    longest = max((len(r) for r in records), default=0)
    pad_to = longest if pad_to is None else pad_to
    if pad_to < longest:
        raise CorpusError(f"pad length {pad_to} shorter than longest sentence ({longest})")
    out = []
    for r in records:
        ids = [vocab.get(t, UNK_ID) for t in r.tokens]
        pad = pad_to - len(ids)
        out.append(replace(r, encoded=ids + [PAD_ID] * pad, attention_mask=[1] * len(ids) + [0] * pad))
    return out


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    test_ids: tuple

    def select(self, records):
        by_id = {r.id: r for r in records}
        missing = [i for i in self.train_ids + self.test_ids if i not in by_id]
        if missing:
            raise CorpusError(f"fold {self.fold_index}: unknown ids {missing[:5]}")
        return [by_id[i] for i in self.train_ids], [by_id[i] for i in self.test_ids]


def make_folds(records, n: int = 10, seed: int = 0) -> list[FoldSplit]:
    ids = sorted(r.id for r in records)
    if n < 2:
        raise CorpusError("need at least 2 folds")
    if not ids:
        raise CorpusError("cannot split an empty corpus")
    if n > len(ids):
        raise CorpusError(f"{n} folds requested for {len(ids)} records")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, n)
    folds = []
    for k, chunk in enumerate(chunks):
        test = set(chunk.tolist())
        folds.append(FoldSplit(
            k + 1,
            tuple(ids[i] for i in range(len(ids)) if i not in test),
            tuple(ids[i] for i in sorted(test)),
        ))
    return folds


def write_folds(folds, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in folds:
        (directory / f"fold_{f.fold_index}_train.txt").write_text("".join(i + "\n" for i in f.train_ids))
        (directory / f"fold_{f.fold_index}_test.txt").write_text("".join(i + "\n" for i in f.test_ids))


def load_folds(directory) -> list[FoldSplit]:
    """Read ``fold_<k>_train.txt`` / ``fold_<k>_test.txt`` id lists."""
    directory = Path(directory)
    folds = []
    k = 1
    while (directory / f"fold_{k}_test.txt").exists():
        read = lambda side: tuple(  # noqa: E731
            ln.strip() for ln in (directory / f"fold_{k}_{side}.txt").read_text().splitlines() if ln.strip()
        )
        train, test = read("train"), read("test")
        if set(train) & set(test):
            raise CorpusError(f"fold {k}: train and test overlap")
        folds.append(FoldSplit(k, train, test))
        k += 1
    if not folds:
        raise CorpusError(f"{directory}: no fold_1_test.txt split file")
    return folds


@dataclass(frozen=True)
class CorpusStats:
    sentence_count: int = 0
    relation_count: int = 0
    entity_count: int = 0
    drug_count: int = 0
    ae_count: int = 0
    unique_drug_count: int = 0
    unique_ae_count: int = 0


def corpus_stats(records) -> CorpusStats:
    drugs, aes = [], []
    relations = 0
    for r in records:
        relations += len(r.relations)
        for start, end, etype in r.spans:
            surface = " ".join(r.tokens[start:end + 1]).lower()
            (drugs if etype == "DRUG" else aes).append(surface)
    return CorpusStats(
        sentence_count=len(records),
        relation_count=relations,
        entity_count=len(drugs) + len(aes),
        drug_count=len(drugs),
        ae_count=len(aes),
        unique_drug_count=len(set(drugs)),
        unique_ae_count=len(set(aes)),
    )


@dataclass
class SynthConfig:
    sentences: int = 100
    drugs: int = 20
    aes: int = 20
    fillers: int = 60
    density: float = 1.0
    max_drugs: int = 2
    max_aes: int = 2
    min_fillers: int = 3
    max_fillers: int = 7
    multiword: float = 0.3
    start_token: bool = True
    seed: int = 0
    prefix: str = "syn"


def _entity_lexicon(count, head, modifier, multiword, rng):
    phrases = []
    for i in range(count):
        h = f"{head}{i:03d}"
        if rng.random() < multiword:
            phrases.append((f"{modifier}{int(rng.integers(max(count // 4, 1))):03d}", h))
        else:
            phrases.append((h,))
    return phrases


def synth_corpus(config: SynthConfig | None = None, **overrides) -> list[SentenceRecord]:
    """Deterministic toy corpus with planted drug/AE vocabulary.

    Entity phrases are fixed per vocabulary item, so a token type always
    carries the same tag. Each co-occurring (drug, AE) pair in a sentence
    is related with probability ``density``.
    """
    cfg = replace(config or SynthConfig(), **overrides)
    if min(cfg.sentences, cfg.drugs, cfg.aes, cfg.fillers) <= 0:
        raise CorpusError("synthetic corpus sizes must be positive")
    rng = np.random.default_rng(cfg.seed)
    drug_lex = _entity_lexicon(cfg.drugs, "drug", "drugmod", cfg.multiword, rng)
    ae_lex = _entity_lexicon(cfg.aes, "ae", "aemod", cfg.multiword, rng)
    fillers = [f"w{i:03d}" for i in range(cfg.fillers)]
    width = len(str(cfg.sentences))
    records = []
    for s in range(cfg.sentences):
        n_d = int(rng.integers(1, cfg.max_drugs + 1))
        n_a = int(rng.integers(1, cfg.max_aes + 1))
        chunks = [("DRUG", drug_lex[i]) for i in rng.choice(cfg.drugs, size=n_d, replace=False)]
        chunks += [("AE", ae_lex[i]) for i in rng.choice(cfg.aes, size=n_a, replace=False)]
        n_f = int(rng.integers(cfg.min_fillers, cfg.max_fillers + 1))
        chunks += [(None, (fillers[i],)) for i in rng.integers(cfg.fillers, size=n_f)]
        order = rng.permutation(len(chunks))
        tokens, spans = [], []
        if cfg.start_token:
            tokens.append(START_TOKEN)
        for j in order:
            etype, words = chunks[j]
            if etype is not None:
                spans.append((len(tokens), len(tokens) + len(words) - 1, etype))
            tokens.extend(words)
        tags = encode_bio(spans, len(tokens))
        d_spans = [sp for sp in spans if sp[2] == "DRUG"]
        a_spans = [sp for sp in spans if sp[2] == "AE"]
        relations = []
        for d in d_spans:
            for a in a_spans:
                if rng.random() < cfg.density:
                    relations.append(relation_heads(d, a))
        records.append(SentenceRecord(f"{cfg.prefix}{s:0{width}d}", tokens, tags, sorted(relations)))
    return [r.validate() for r in encode_records(records)]
