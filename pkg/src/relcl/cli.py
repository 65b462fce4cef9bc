"""Command-line entry point (``relcl``)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from .corpus import CorpusError, SynthConfig, corpus_stats, load_corpus, load_folds, synth_corpus, write_corpus
from .encoder import EmbeddingSource, synth_embeddings
from .evaluation import read_predictions, score_report
from .inference import (
    KnnConfig,
    TrainedSpace,
    baseline_encoder,
    binary_f1,
    extract_entity_reps,
    extract_relation_reps,
    knn_classify,
    linear_probe,
    macro_f1,
    similarity_check,
)
from .models import load_model
from .pipeline import STAGES, PipelineManifest, run_pipeline
from .training import TrainConfig, train

LOG_ENV = "RELCL_LOG_LEVEL"


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _fold_records(args, records):
    if args.fold is None:
        return records, []
    if not args.splits:
        raise SystemExit("--fold needs --splits")
    folds = {f.fold_index: f for f in load_folds(args.splits)}
    if args.fold not in folds:
        raise SystemExit(f"no split for fold {args.fold} in {args.splits}")
    return folds[args.fold].select(records)


def cmd_corpus(args):
    if args.action == "validate":
        records = load_corpus(args.dir)
        print(f"{len(records)} records valid")
    elif args.action == "stats":
        records = load_corpus(args.dir)
        report = {"all": asdict(corpus_stats(records))}
        if args.splits:
            for f in load_folds(args.splits):
                tr, te = f.select(records)
                report[f"fold{f.fold_index}"] = {"train": asdict(corpus_stats(tr)), "test": asdict(corpus_stats(te))}
        _emit(report)
    else:
        cfg = SynthConfig(sentences=args.sentences, seed=args.seed)
        records = synth_corpus(cfg)
        write_corpus(records, args.out)
        if args.emb:
            synth_embeddings(records, args.dim, args.seed).save(args.emb, text=args.text)
        print(f"wrote {len(records)} records to {args.out}")


def cmd_train(args):
    cfg = TrainConfig.load(args.config, model=args.model) if args.config else TrainConfig(model=args.model)
    if args.seed is not None:
        cfg.seed = args.seed
    records, _ = _fold_records(args, load_corpus(args.data))
    _, history = train(cfg, records, EmbeddingSource.load(args.emb), args.out)
    print(f"trained {cfg.model} for {len(history)} epochs; final train loss {history[-1]['train_loss']:.6f}")


def cmd_infer(args):
    space = TrainedSpace.load(args.space)
    queries = TrainedSpace.load(args.queries)
    pred = knn_classify(space, queries.vectors, KnnConfig(args.k, args.metric))
    for key, lab in zip(queries.keys or [()] * len(pred), pred):
        print(":".join(str(x) for x in key) or "-", lab)
    score = binary_f1 if space.kind == "relation" else macro_f1
    print(f"# f1 {score(pred, queries.labels):.6f}", file=sys.stderr)


def _encoder(args, emb):
    return load_model(args.model, emb).encoder if args.model else baseline_encoder(emb)


def cmd_eval(args):
    emb = EmbeddingSource.load(args.emb)
    records = load_corpus(args.data)
    train_recs, test_recs = _fold_records(args, records)
    if args.action == "simcheck":
        model = load_model(args.model, emb)
        acc = similarity_check(model, test_recs or train_recs, args.negatives, args.seed)
        _emit({"accuracy": acc, "candidates": args.negatives + 1})
    else:
        res = linear_probe(_encoder(args, emb), train_recs, test_recs or train_recs, args.seed, args.negatives)
        _emit(asdict(res))


def cmd_export(args):
    emb = EmbeddingSource.load(args.emb)
    records, _ = _fold_records(args, load_corpus(args.data))
    enc = _encoder(args, emb)
    if args.mode == "relation":
        space = extract_relation_reps(enc, records, args.pairs, args.negatives, args.seed)
    else:
        space = extract_entity_reps(enc, records)
    space.save(args.out)
    print(f"wrote {len(space)} {args.mode} vectors to {args.out}")


def cmd_score(args):
    report = score_report(load_corpus(args.gold), read_predictions(args.pred), tuple(args.mode))
    _emit(report)


def cmd_pipeline(args):
    manifest = PipelineManifest(args.out, args.data, args.emb, args.splits, args.config, args.seed)
    stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else STAGES
    return run_pipeline(manifest, stages)


def build_parser():
    p = argparse.ArgumentParser(prog="relcl", description="Contrastive relation/entity representation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="validate, summarize or synthesize a corpus")
    csub = c.add_subparsers(dest="action", required=True)
    v = csub.add_parser("validate")
    v.add_argument("dir")
    s = csub.add_parser("stats")
    s.add_argument("dir")
    s.add_argument("--splits")
    y = csub.add_parser("synth")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--sentences", type=int, default=300)
    y.add_argument("--out", required=True)
    y.add_argument("--emb", help="also write synthetic embeddings here")
    y.add_argument("--dim", type=int, default=64)
    y.add_argument("--text", action="store_true", help="text embedding files")
    c.set_defaults(func=cmd_corpus)

    def data_args(q, model_help="model directory (default: frozen baseline)"):
        q.add_argument("--data", required=True)
        q.add_argument("--emb", required=True)
        q.add_argument("--splits")
        q.add_argument("--fold", type=int)
        q.add_argument("--model", help=model_help)
        q.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--model", choices=("clgs", "cldr", "clner"), required=True)
    t.add_argument("--config")
    t.add_argument("--fold", type=int)
    t.add_argument("--splits")
    t.add_argument("--data", required=True)
    t.add_argument("--emb", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="KNN classification against a stored space")
    isub = i.add_subparsers(dest="action", required=True)
    k = isub.add_parser("knn")
    k.add_argument("--space", required=True)
    k.add_argument("--queries", required=True, help="space file holding the query vectors")
    k.add_argument("--k", type=int, default=5)
    k.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="similarity check or linear probe")
    esub = e.add_subparsers(dest="action", required=True)
    sc = esub.add_parser("simcheck")
    data_args(sc, "trained CLGS model directory")
    sc.add_argument("--negatives", type=int, default=7)
    pr = esub.add_parser("probe")
    data_args(pr)
    pr.add_argument("--negatives", type=int, default=7)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="write a representation space for external projection")
    xsub = x.add_subparsers(dest="action", required=True)
    r = xsub.add_parser("reps")
    data_args(r)
    r.add_argument("--mode", choices=("relation", "entity"), required=True)
    r.add_argument("--pairs", choices=("gold-pairs", "all-candidate-pairs"), default="gold-pairs")
    r.add_argument("--negatives", type=int, default=7)
    r.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    g = sub.add_parser("score", help="strict / RE- scoring of a prediction file")
    g.add_argument("--gold", required=True)
    g.add_argument("--pred", required=True)
    g.add_argument("--mode", choices=("ner", "re", "re-minus"), action="append")
    g.set_defaults(func=cmd_score)

    pl = sub.add_parser("pipeline", help="run prep/train/extract/knn/score")
    pl.add_argument("--data")
    pl.add_argument("--emb")
    pl.add_argument("--splits")
    pl.add_argument("--config")
    pl.add_argument("--out", required=True)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "score" and not args.mode:
        args.mode = ["ner", "re", "re-minus"]
    try:
        return args.func(args) or 0
    except (CorpusError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
