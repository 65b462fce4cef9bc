"""Seeded training loops for the three contrastive models."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numeric as nm
from .encoder import EncoderStack
from .graphs import build_disjoint_graphs, build_subgraph, sample_negatives_cldr, sample_negatives_clgs
from .models import (
    ClgsModel,
    CldrModel,
    ClnerModel,
    GcnLayer,
    sample_balanced_entities,
    save_model,
    save_parameters,
)

log = logging.getLogger(__name__)

MODEL_KINDS = ("clgs", "cldr", "clner")
DEFAULT_BATCH = {"clgs": 8, "cldr": 8, "clner": 16}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "cldr"
    batch_size: int = 0  # 0 -> 8 for CLGS/CLDR, 16 for CLNER
    learning_rate: float = 1e-5
    epochs: int = 30
    tau: float = 0.1
    lam: float = 0.8
    z: int = 8
    seed: int = 0
    graph_pool: str = "mean"
    text_pool: str = "mean"
    projection: bool = False
    symmetric: bool = False
    validation_fraction: float = 0.10
    head_layers: int = 2
    hidden: int = 0  # 0 -> embedding dimension
    head_activation: str = "relu"
    gcn_activation: str = ""  # "" -> tanh for CLGS, relu for CLDR
    mixer: bool = False
    init: str = "normal"
    entity_quota: int = 0  # 0 -> smallest tag count in the batch

    def __post_init__(self):
        if self.batch_size == 0:
            self.batch_size = DEFAULT_BATCH.get(self.model, 8)
        if not self.gcn_activation:
            self.gcn_activation = "tanh" if self.model == "clgs" else "relu"
        if self.model == "clner":
            self.head_layers = 1
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.z < 1:
            raise ConfigError("z counts the positive, so it must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.model == "cldr" and not 0.5 < self.lam <= 1.0:
            raise ConfigError("lam must lie in (0.5, 1]")
        return self

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text, **overrides):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                continue  # other stages read their own keys from the same file
            values[key] = _parse(value, types[key], key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides):
        return cls.loads(Path(path).read_text(), **overrides)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value, typ, key):
    try:
        if typ in ("bool", bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def read_kv(path) -> dict:
    """All ``key = value`` pairs of a config file as strings."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def split_validation(records, fraction=0.10, seed=0):
    """Seeded (train, validation) split; validation size is fraction * n rounded half up."""
    if not 0 < fraction < 1:
        raise ConfigError("fraction must lie in (0, 1)")
    records = list(records)
    n_val = math.floor(fraction * len(records) + 0.5)
    if n_val == 0 or n_val == len(records):
        raise ValueError(f"validation fraction {fraction} on {len(records)} records leaves an empty subset")
    order = np.random.default_rng([seed, 7]).permutation(len(records))
    val = set(order[:n_val].tolist())
    return ([r for i, r in enumerate(records) if i not in val],
            [r for i, r in enumerate(records) if i in val])


def build_model(config: TrainConfig, embeddings):
    rng = np.random.default_rng([config.seed, 1])
    hidden = config.hidden or embeddings.dim
    encoder = EncoderStack.build(embeddings, config.head_layers, hidden, config.head_activation,
                                 config.mixer, rng, config.init)
    if config.model == "clner":
        return ClnerModel(encoder, config.tau)
    gcn = GcnLayer(f"{config.model}.gcn", embeddings.dim, encoder.out_dim, config.gcn_activation, rng)
    if config.model == "cldr":
        return CldrModel(encoder, gcn, config.lam, config.tau)
    return ClgsModel(encoder, gcn, config.graph_pool, config.text_pool, config.tau,
                     config.projection, config.symmetric, rng)


def eligible_records(config, records):
    if config.model == "clner":
        return list(records)
    return [r for r in records if r.relations]


def make_samples(model, batch, z, rng, quota=0):
    """Per-batch sampling: negative graphs for CLGS/CLDR, a balanced token pool for CLNER."""
    emb = model.encoder.base
    if isinstance(model, CldrModel):
        return [sample_negatives_cldr(r, build_disjoint_graphs(r, emb.matrix(r), model.lam), z - 1, rng) for r in batch]
    if isinstance(model, ClgsModel):
        return [sample_negatives_clgs(r, build_subgraph(r, emb.matrix(r)), z - 1, rng) for r in batch]
    return sample_balanced_entities(batch, quota or None, rng)


def batch_loss(model, batch, samples):
    if isinstance(model, ClnerModel) and len(samples) < 2:
        return None
    return model.batch_loss(batch, samples)


def _batches(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def evaluate_loss(model, config, records, seed_stream) -> float:
    """Mean batch loss with a fixed sampling stream (no parameter update)."""
    rng = np.random.default_rng(seed_stream)
    losses = []
    for batch in _batches(list(records), config.batch_size):
        s = make_samples(model, batch, config.z, rng, config.entity_quota)
        loss = batch_loss(model, batch, s)
        if loss is not None:
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def train(config: TrainConfig, records, embeddings, out_dir=None, model=None):
    """Train one model; returns ``(model, history)``.

    With enough records a validation subset is held out and the epoch with
    the lowest validation loss is restored at the end; otherwise the last
    epoch is kept. Every epoch's parameters are written under ``out_dir``.
    """
    config.validate()
    pool = eligible_records(config, records)
    if not pool:
        raise ValueError(f"no eligible training records for {config.model}")
    try:
        train_set, val_set = split_validation(pool, config.validation_fraction, config.seed)
    except ValueError:
        log.warning("too few records (%d) for a validation split; training on all", len(pool))
        train_set, val_set = pool, []
    model = model or build_model(config, embeddings)
    params = model.parameters()
    state = nm.AdamState(learning_rate=config.learning_rate)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_model(model, out, "initial.params")
        (out / "config.txt").write_text(config.dumps())

    history, best, best_state = [], math.inf, None
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch, 2])
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(len(train_set))
        losses = []
        for batch in _batches([train_set[i] for i in order], config.batch_size):
            s = make_samples(model, batch, config.z, rng, config.entity_quota)
            loss = batch_loss(model, batch, s)
            if loss is None:
                continue
            loss.backward()
            nm.adam_step(params, state)
            losses.append(loss.item())
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = evaluate_loss(model, config, val_set, [config.seed, 0, 3]) if val_set else None
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("%s epoch %d: train %.5f val %s", config.model, epoch, train_loss, val_loss)
        score = val_loss if val_set else -epoch
        if best_state is None or score < best:
            best = score
            best_state = [p.data.copy() for p in params]
            if out:
                save_parameters(model, out / "best.params", {"kind": model.kind, "epoch": epoch})
        if out:
            save_parameters(model, out / f"epoch_{epoch:03d}.params", {"kind": model.kind, "epoch": epoch})

    if best_state is not None:
        for p, v in zip(params, best_state):
            p.data[...] = v
    if out:
        shutil.copyfile(out / "best.params", out / "model.params")
        (out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    return model, history
