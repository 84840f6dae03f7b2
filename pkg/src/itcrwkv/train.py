"""Adam, the training loop, evaluation metrics and checkpoints."""
from __future__ import annotations

import copy
import csv
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .container import VersionError, read_container, write_container
from .kvfile import write_kv
from .model import Model, ModelConfig, forward_model, sample_loss
from .synth import Sample

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteGradientError(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    cosine: bool = True
    patience: int = 10
    seed: int = 0
    aggregator: str = "rwkv"
    fusion: str = "gated"
    depth: int = 4
    width: int = 256
    heads: int = 4
    hidden: int = 128
    dropout: float = 0.1
    branches: str = "both"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if not self.lr >= 0 or self.batch_size < 1 or self.patience < 1 or self.epochs < 1:
            raise ValueError(f"invalid training config: lr={self.lr}, batch={self.batch_size}, "
                             f"patience={self.patience}, epochs={self.epochs}")
        return self

    def model_config(self, d_morph: int, d_tissue: int, n_classes: int) -> ModelConfig:
        return ModelConfig(d_morph=d_morph, d_tissue=d_tissue, width=self.width, heads=self.heads,
                           depth=self.depth, hidden=self.hidden, n_classes=n_classes,
                           dropout=self.dropout, aggregator=self.aggregator, fusion=self.fusion,
                           branches=self.branches).validate()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, T.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place.  A missing gradient counts as zero."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: dict[str, T.Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_lr(lr0: float, epoch: int, epochs: int, cosine: bool = True) -> float:
    if not cosine:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def classification_metrics(y_true, y_pred, n_classes: int) -> dict:
    """Accuracy, per-class F1 (0 where precision + recall is 0) and support-weighted F1."""
    y_true = np.asarray(y_true, dtype=int)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty set")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    # support_c * F1_c = support_c * 2 tp / (support + predicted), summed exactly and rounded once
    weighted = sum(Fraction(int(s) * 2 * int(t), int(s) + int(q))
                   for s, t, q in zip(support, np.diag(cm), pred_pos) if t > 0)
    return {"accuracy": float(tp.sum() / y_true.size), "f1": f1,
            "weighted_f1": float(weighted / y_true.size), "confusion": cm}


def predict(model: Model, samples: list[Sample]) -> np.ndarray:
    with T.no_grad():
        return np.array([forward_model(model, s.cells, s.grid).prediction.label for s in samples])


def evaluate(model: Model, samples: list[Sample]) -> dict:
    if not samples:
        raise ValueError("cannot evaluate an empty set")
    return classification_metrics([s.label for s in samples], predict(model, samples),
                                  model.cfg.n_classes)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int                      # epochs completed
    best_metric: float
    best_epoch: int
    stale_epochs: int
    history: list[dict]
    rng_state: dict                 # counters from which every random stream is derived
    version: int = CHECKPOINT_VERSION

    def model(self, best: bool = True) -> Model:
        m = Model.init(self.model_cfg, seed=self.train_cfg.seed)
        load_params(m, self.best_params if best else self.params)
        return m


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.parameters().items()}


def load_params(model: Model, values: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    if set(params) != set(values):
        missing = sorted(set(params) ^ set(values))
        raise KeyError(f"parameter sets differ: {missing[:5]}")
    for k, p in params.items():
        p.data[...] = values[k]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {}
    for k, v in ckpt.params.items():
        arrays[f"param/{k}"] = v
    for k, v in ckpt.best_params.items():
        arrays[f"best/{k}"] = v
    for k, v in ckpt.adam.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in ckpt.adam.v.items():
        arrays[f"adam_v/{k}"] = v
    meta = {"version": ckpt.version, "train_cfg": asdict(ckpt.train_cfg),
            "model_cfg": asdict(ckpt.model_cfg), "adam_t": ckpt.adam.t, "epoch": ckpt.epoch,
            "best_metric": ckpt.best_metric, "best_epoch": ckpt.best_epoch,
            "stale_epochs": ckpt.stale_epochs, "history": ckpt.history, "rng_state": ckpt.rng_state}
    write_container(path, CHECKPOINT_KIND, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path, CHECKPOINT_KIND)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionError(meta.get("version"), CHECKPOINT_VERSION)

    def group(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    return Checkpoint(TrainConfig(**meta["train_cfg"]), ModelConfig(**meta["model_cfg"]),
                      group("param"), group("best"),
                      AdamState(group("adam_m"), group("adam_v"), meta["adam_t"]),
                      meta["epoch"], meta["best_metric"], meta["best_epoch"], meta["stale_epochs"],
                      meta["history"], meta["rng_state"])


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Model            # parameters from the best validation epoch
    history: list[dict]
    stopped_early: bool


def _sample_key(s: Sample):
    p = s.provenance
    return (p.get("seed"), p.get("index")) if "index" in p else id(s)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 1]).permutation(n)
    for b, start in enumerate(range(0, n, batch_size)):
        yield b, order[start:start + batch_size]


def train(cfg: TrainConfig, train_set: list[Sample], val_set: list[Sample],
          resume: Checkpoint | None = None, stop_after: int | None = None,
          n_classes: int | None = None, log=None) -> TrainResult:
    """Train with Adam, cosine decay and early stopping on validation weighted F1.

    Everything random is derived from ``cfg.seed`` and the epoch / batch
    counters, so a run resumed from a checkpoint matches an uninterrupted one.
    ``stop_after`` ends the run after that many completed epochs (for
    checkpointing mid-way).
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    if {_sample_key(s) for s in train_set} & {_sample_key(s) for s in val_set}:
        raise ValueError("train and validation sets overlap")
    s0 = train_set[0]
    C = n_classes or max(s.label for s in train_set + val_set) + 1
    mcfg = cfg.model_config(s0.cells.features.shape[1], s0.grid.width, C)

    model = Model.init(mcfg, seed=cfg.seed)
    params = model.parameters()
    if resume is None:
        ckpt = Checkpoint(copy.deepcopy(cfg), mcfg, snapshot(model), snapshot(model), AdamState(),
                          0, -1.0, -1, 0, [], {"seed": cfg.seed, "epoch": 0})
    else:
        ckpt = copy.deepcopy(resume)
        load_params(model, ckpt.params)

    stopped_early = False
    while ckpt.epoch < cfg.epochs:
        if stop_after is not None and ckpt.epoch >= stop_after:
            break
        if ckpt.stale_epochs >= cfg.patience:
            stopped_early = True
            break
        epoch = ckpt.epoch
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.cosine)
        good = copy.deepcopy(ckpt)
        losses, hits = [], 0
        for b, idx in _batches(len(train_set), cfg.batch_size, cfg.seed, epoch):
            drop_rng = np.random.default_rng([cfg.seed, epoch, b, 2])
            zero_grads(params)
            for i in idx:
                s = train_set[i]
                try:
                    with T.Tape() as tape:
                        loss, res = sample_loss(model, s.cells, s.grid, s.label, True, drop_rng)
                        scaled = T.scale(loss, 1.0 / len(idx))
                    tape.backward(scaled)
                except (T.NonFiniteError, FloatingPointError) as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", good) from exc
                losses.append(loss.item())
                hits += res.prediction.label == s.label
            try:
                adam_step(params, ckpt.adam, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", good) from exc
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: loss is {train_loss}", good)

        val = evaluate(model, val_set)
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_accuracy": hits / len(train_set),
               "val_accuracy": val["accuracy"], "val_weighted_f1": val["weighted_f1"]}
        ckpt.history.append(row)
        ckpt.epoch = epoch + 1
        ckpt.rng_state = {"seed": cfg.seed, "epoch": ckpt.epoch}
        ckpt.params = snapshot(model)
        if val["weighted_f1"] > ckpt.best_metric:
            ckpt.best_metric = val["weighted_f1"]
            ckpt.best_epoch = epoch
            ckpt.best_params = snapshot(model)
            ckpt.stale_epochs = 0
        else:
            ckpt.stale_epochs += 1
        if log is not None:
            log(row)

    best = Model.init(mcfg, seed=cfg.seed)
    load_params(best, ckpt.best_params)
    return TrainResult(ckpt, best, ckpt.history, stopped_early)


# ---------------------------------------------------------------------------
# reporting


HISTORY_FIELDS = ["epoch", "lr", "train_loss", "train_accuracy", "val_accuracy", "val_weighted_f1"]


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def write_summary(metrics: dict, path, extra: dict | None = None) -> None:
    pairs = {"accuracy": f"{metrics['accuracy']:.6f}", "weighted_f1": f"{metrics['weighted_f1']:.6f}"}
    for c, f in enumerate(metrics["f1"]):
        pairs[f"f1_class_{c}"] = f"{f:.6f}"
    if extra:
        pairs.update(extra)
    write_kv(path, pairs, "evaluation summary")


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def checkpoint_path(directory) -> Path:
    return Path(directory) / "checkpoint.bin"
