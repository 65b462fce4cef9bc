import math

import numpy as np
import pytest

from relcl.corpus import synth_corpus
from relcl.encoder import synth_embeddings
from relcl.training import ConfigError, TrainConfig, split_validation, train


@pytest.fixture(scope="module")
def data():
    recs = synth_corpus(sentences=30, seed=7)
    return recs, synth_embeddings(recs, 8, seed=7)


def test_split_validation_sizes():
    recs = synth_corpus(sentences=100, seed=0)
    tr, val = split_validation(recs, 0.10, seed=1)
    assert len(val) == 10 and len(tr) == 90
    assert split_validation(recs, 0.10, seed=1) == (tr, val)
    tr3, val3 = split_validation(recs[:3], 0.5, seed=0)
    # 1.5 rounds half up to 2
    assert (len(tr3), len(val3)) == (1, 2)
    with pytest.raises(ValueError):
        split_validation(recs[:3], 0.1)


def test_config_round_trip_and_validation(tmp_path):
    cfg = TrainConfig(model="clgs", learning_rate=3e-3, symmetric=True, text_pool="first")
    p = tmp_path / "c.txt"
    p.write_text(cfg.dumps() + "unrelated_key = 5\n")
    assert TrainConfig.load(p) == cfg
    assert TrainConfig(model="clner").batch_size == 16
    assert TrainConfig(model="clner", head_layers=3).head_layers == 1
    for bad in (dict(model="x"), dict(tau=0), dict(lam=0.5), dict(z=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_degenerate_single_sentence(data):
    recs, emb = data
    rec = [r for r in recs if r.relations][:1]
    _, hist = train(TrainConfig(model="cldr", epochs=1, z=1), rec, emb)
    assert hist[-1]["train_loss"] == 0.0


@pytest.mark.parametrize("kind", ["clgs", "cldr", "clner"])
def test_training_is_reproducible(tmp_path, data, kind):
    recs, emb = data
    cfg = TrainConfig(model=kind, epochs=2, learning_rate=1e-3, seed=3)
    train(cfg, recs, emb, tmp_path / "a")
    train(cfg, recs, emb, tmp_path / "b")
    for name in ("model.params", "epoch_001.params", "epoch_002.params", "manifest.json", "history.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("kind", ["clgs", "cldr", "clner"])
def test_base_unchanged_and_history_finite(data, kind):
    recs, emb = data
    before = {r.id: emb.matrix(r).copy() for r in recs}
    _, hist = train(TrainConfig(model=kind, epochs=3, learning_rate=3e-3), recs, emb)
    assert all(np.array_equal(emb.matrix(r), before[r.id]) for r in recs)
    assert all(math.isfinite(h["train_loss"]) for h in hist)
    assert all(h["val_loss"] is None or math.isfinite(h["val_loss"]) for h in hist)


def test_best_epoch_restored(tmp_path, data):
    recs, emb = data
    model, hist = train(TrainConfig(model="cldr", epochs=4, learning_rate=1e-2), recs, emb, tmp_path)
    best = min(hist, key=lambda h: h["val_loss"])["epoch"]
    assert (tmp_path / "model.params").read_bytes() == (tmp_path / f"epoch_{best:03d}.params").read_bytes()


def test_no_eligible_records(data):
    _, emb = data
    empty = synth_corpus(sentences=3, density=0.0)
    with pytest.raises(ValueError):
        train(TrainConfig(model="cldr", epochs=1), empty, synth_embeddings(empty, 4))
