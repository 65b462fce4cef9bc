"""End-to-end run: prep -> train-cldr -> train-clner -> extract -> knn -> score.

All artifacts go under the run's output directory::

    manifest.json, prep.json, report.json
    data/ emb/ splits/            (only when generated here)
    fold<k>/cldr/  fold<k>/clner/ (checkpoints, history)
    fold<k>/relation.space  fold<k>/entity.space  fold<k>/knn.json
    fold<k>/predictions.jsonl
    FAILED                        (present only if the last run errored)
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from .corpus import SynthConfig, corpus_stats, decode_bio, load_corpus, load_folds, make_folds, synth_corpus, write_corpus, write_folds
from .encoder import EmbeddingSource, synth_embeddings
from .evaluation import PRF, Prediction, cross_fold_aggregate, read_predictions, score_report, write_predictions
from .graphs import build_subgraph
from .inference import (
    DEFAULT_K_GRID,
    RELATION,
    KnnConfig,
    TrainedSpace,
    extract_entity_reps,
    extract_relation_reps,
    knn_classify,
    select_k,
)
from .models import load_model
from .training import TrainConfig, read_kv, split_validation, train

log = logging.getLogger(__name__)

STAGES = ("prep", "train-cldr", "train-clner", "extract", "knn", "score")

# defaults for keys the pipeline reads besides TrainConfig fields
PIPELINE_DEFAULTS = {
    "synth_sentences": "400",
    "synth_seed": "0",
    "synth_drugs": "20",
    "synth_aes": "20",
    "synth_fillers": "60",
    "synth_multiword": "0.15",
    "synth_density": "1.0",
    "emb_dim": "64",
    "emb_seed": "0",
    "folds": "10",
    "fold_ids": "1",
    "knn_negatives": "30",
    "k_grid": ",".join(str(k) for k in DEFAULT_K_GRID),
}


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineManifest:
    out: str
    data: str | None = None
    emb: str | None = None
    splits: str | None = None
    config: str | None = None
    seed: int = 0


class Run:
    def __init__(self, manifest: PipelineManifest):
        self.m = manifest
        self.out = Path(manifest.out)
        kv = dict(PIPELINE_DEFAULTS)
        if manifest.config:
            if not Path(manifest.config).exists():
                raise PipelineError(f"config file {manifest.config} does not exist")
            kv.update(read_kv(manifest.config))
        self.kv = kv
        self._records = None
        self._emb = None

    # paths -------------------------------------------------------------
    @property
    def data_dir(self):
        return Path(self.m.data) if self.m.data else self.out / "data"

    @property
    def emb_dir(self):
        return Path(self.m.emb) if self.m.emb else self.out / "emb"

    @property
    def split_dir(self):
        return Path(self.m.splits) if self.m.splits else self.out / "splits"

    def fold_dir(self, k):
        return self.out / f"fold{k}"

    def fold_ids(self):
        return [int(x) for x in self.kv["fold_ids"].split(",") if x.strip()]

    def require(self, stage, path):
        if not Path(path).exists():
            raise PipelineError(f"stage '{stage}' needs {path}, which does not exist (run the earlier stage first)")

    def train_config(self, model):
        lines = [f"{k} = {v}" for k, v in self.kv.items() if "." not in k]
        lines += [f"{k.split('.', 1)[1]} = {v}" for k, v in self.kv.items() if k.startswith(model + ".")]
        return TrainConfig.loads("\n".join(lines), model=model, seed=self.m.seed)

    # data --------------------------------------------------------------
    def records(self, stage):
        if self._records is None:
            self.require(stage, self.data_dir)
            self._records = load_corpus(self.data_dir)
        return self._records

    def embeddings(self, stage):
        if self._emb is None:
            self.require(stage, self.emb_dir)
            self._emb = EmbeddingSource.load(self.emb_dir)
        return self._emb

    def fold(self, stage, k):
        self.require(stage, self.split_dir / f"fold_{k}_test.txt")
        folds = {f.fold_index: f for f in load_folds(self.split_dir)}
        if k not in folds:
            raise PipelineError(f"stage '{stage}': no split for fold {k}")
        return folds[k].select(self.records(stage))

    # stages ------------------------------------------------------------
    def prep(self):
        kv = self.kv
        if not self.m.data:
            cfg = SynthConfig(
                sentences=int(kv["synth_sentences"]), drugs=int(kv["synth_drugs"]), aes=int(kv["synth_aes"]),
                fillers=int(kv["synth_fillers"]), multiword=float(kv["synth_multiword"]),
                density=float(kv["synth_density"]), seed=int(kv["synth_seed"]),
            )
            write_corpus(synth_corpus(cfg), self.data_dir)
        records = self.records("prep")
        if not self.m.emb:
            emb = synth_embeddings(records, int(kv["emb_dim"]), int(kv["emb_seed"]))
            extras = {}
            for r in records:
                if r.relations:
                    g = build_subgraph(r, emb.matrix(r))
                    extras[r.id] = {"nodes": [list(g.node_token_indices)], "adjacency": g.adjacency}
            emb.save(self.emb_dir, extras=extras)
            self._emb = None
        emb = self.embeddings("prep")
        for r in records:
            emb.matrix(r)
        if not self.m.splits:
            write_folds(make_folds(records, int(kv["folds"]), self.m.seed), self.split_dir)
        summary = {
            "records": len(records),
            "stats": asdict(corpus_stats(records)),
            "embedding_dim": emb.dim,
            "embedding_fingerprint": emb.fingerprint(),
            "folds": len(load_folds(self.split_dir)),
        }
        _write_json(self.out / "prep.json", summary)

    def _train(self, model_kind):
        stage = f"train-{model_kind}"
        emb = self.embeddings(stage)
        for k in self.fold_ids():
            train_recs, _ = self.fold(stage, k)
            train(self.train_config(model_kind), train_recs, emb, self.fold_dir(k) / model_kind)

    def extract(self):
        emb = self.embeddings("extract")
        grid = [int(x) for x in self.kv["k_grid"].split(",")]
        n_neg = int(self.kv["knn_negatives"])
        for k in self.fold_ids():
            d = self.fold_dir(k)
            for kind in ("cldr", "clner"):
                self.require("extract", d / kind / "model.params")
            train_recs, _ = self.fold("extract", k)
            fit, val = split_validation(train_recs, 0.10, self.m.seed)
            cldr = load_model(d / "cldr", emb)
            clner = load_model(d / "clner", emb)

            rel_fit = extract_relation_reps(cldr.encoder, fit, "gold-pairs", n_neg, self.m.seed)
            rel_val = extract_relation_reps(cldr.encoder, val, "all-candidate-pairs")
            rel_k = select_k(rel_fit, rel_val.vectors, rel_val.labels, [g for g in grid if g <= len(rel_fit)])
            ent_fit = extract_entity_reps(clner.encoder, fit)
            ent_val = extract_entity_reps(clner.encoder, val)
            ent_k = select_k(ent_fit, ent_val.vectors, ent_val.labels, [g for g in grid if g <= len(ent_fit)])

            extract_relation_reps(cldr.encoder, train_recs, "gold-pairs", n_neg, self.m.seed).save(d / "relation.space")
            extract_entity_reps(clner.encoder, train_recs).save(d / "entity.space")
            _write_json(d / "knn.json", {"relation_k": rel_k, "entity_k": ent_k})

    def knn(self):
        emb = self.embeddings("knn")
        for k in self.fold_ids():
            d = self.fold_dir(k)
            for name in ("relation.space", "entity.space", "knn.json"):
                self.require("knn", d / name)
            _, test_recs = self.fold("knn", k)
            ks = json.loads((d / "knn.json").read_text())
            preds = predict(
                load_model(d / "cldr", emb).encoder, load_model(d / "clner", emb).encoder,
                TrainedSpace.load(d / "relation.space"), TrainedSpace.load(d / "entity.space"),
                test_recs, KnnConfig(ks["relation_k"]), KnnConfig(ks["entity_k"]),
            )
            write_predictions(preds, d / "predictions.jsonl")

    def score(self):
        per_fold, folds = {}, {}
        for k in self.fold_ids():
            path = self.fold_dir(k) / "predictions.jsonl"
            self.require("score", path)
            _, test_recs = self.fold("score", k)
            folds[str(k)] = score_report(test_recs, read_predictions(path))
        for mode in ("ner", "re", "re-minus"):
            agg = cross_fold_aggregate(
                [PRF(f[mode]["precision"], f[mode]["recall"], f[mode]["f1"]) for f in folds.values()])
            per_fold[mode] = {"precision": agg.precision, "recall": agg.recall, "f1": agg.f1}
        _write_json(self.out / "report.json", {"folds": folds, "mean": per_fold})


def predict(rel_encoder, ent_encoder, rel_space, ent_space, records, rel_knn, ent_knn):
    """Combine both spaces.

    Tokens are tagged by entity-space KNN and decoded into spans; every
    ordered token pair goes through relation-space KNN. A relation is
    emitted when the relation space says so and a predicted DRUG span ends
    at its first token and a predicted AE span ends at its second.
    """
    rel_q = extract_relation_reps(rel_encoder, records, "all-candidate-pairs")
    rel_pred = knn_classify(rel_space, rel_q.vectors, rel_knn) if len(rel_q) else []
    ent_q = extract_entity_reps(ent_encoder, records)
    ent_pred = knn_classify(ent_space, ent_q.vectors, ent_knn) if len(ent_q) else []
    heads = {r.id: [] for r in records}
    for lab, (rid, i, j) in zip(rel_pred, rel_q.keys):
        if lab == RELATION:
            heads[rid].append((i, j))
    tags = {r.id: [] for r in records}
    for lab, (rid, _) in zip(ent_pred, ent_q.keys):
        tags[rid].append(lab)
    out = []
    for r in records:
        entities = decode_bio(tags[r.id])
        ends = {(e[1], e[2]): n for n, e in enumerate(entities)}
        rels = [(ends[(i, "DRUG")], ends[(j, "AE")]) for i, j in heads[r.id]
                if (i, "DRUG") in ends and (j, "AE") in ends]
        # RE- is scored on the heads of the combined relations, so it only relaxes strict RE
        out.append(Prediction(r.id, entities, rels, [(entities[a][1], entities[b][1]) for a, b in rels]))
    return out


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_pipeline(manifest: PipelineManifest, stages=STAGES) -> int:
    """Run the requested stages in canonical order; returns a process exit status."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise PipelineError(f"unknown stages {sorted(unknown)}")
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    _write_json(out / "manifest.json", asdict(manifest))
    try:
        run = Run(manifest)
        steps = {
            "prep": run.prep,
            "train-cldr": lambda: run._train("cldr"),
            "train-clner": lambda: run._train("clner"),
            "extract": run.extract,
            "knn": run.knn,
            "score": run.score,
        }
        for stage in STAGES:
            if stage in stages:
                current = stage
                log.info("stage %s", stage)
                steps[stage]()
    except Exception as exc:  # reported through the exit status and the FAILED marker
        stage = locals().get("current", "setup")
        log.error("stage %s failed: %s", stage, exc)
        failed.write_text(f"{stage}\n{type(exc).__name__}: {exc}\n")
        return 1
    if failed.exists():
        failed.unlink()
    return 0
