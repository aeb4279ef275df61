"""Balanced-batch training with validation early stopping and checkpoints.

Checkpoint layout::

    magic      b"CACNN\\x01"
    header     UTF-8 JSON line: architecture, parameter order/shapes, seed,
               step counter, training config, RNG state, optimizer flag
    params     little-endian float64, in Network parameter order
    optimizer  (optional) Adagrad accumulators, same order and dtype
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .candidates import Label
from .cnn import (
    Network,
    NonFiniteError,
    OptimizerState,
    adagrad_step,
    dropout_apply,
    he_init,
    log_softmax,
    loss_and_backward,
    predict_logits,
)
from .patches import PatchStore

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CACNN"
CHECKPOINT_VERSION = 1


class StratumExhaustedError(ValueError):
    def __init__(self, stratum: str):
        super().__init__(f"patch store has no {stratum} records to sample from")
        self.stratum = stratum


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite training loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class CheckpointError(ValueError):
    """Wrong magic, unsupported version or a truncated checkpoint."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    max_epochs: int = 1200
    early_stop_patience: int = 20
    validation_interval: int = 1
    rng_seed: int = 0
    aortic_negative_fraction: float = 0.5
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 4, got {self.batch_size}")
        if not 0.0 <= self.aortic_negative_fraction <= 1.0:
            raise ValueError("aortic_negative_fraction must lie in [0, 1]")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 0 or self.early_stop_patience < 0 or self.validation_interval < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 0, validation_interval >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def n_aortic(self) -> int:
        # round half up so the split never depends on banker's rounding
        return int(math.floor(self.aortic_negative_fraction * (self.batch_size // 2) + 0.5))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""
    steps: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for e in self.epochs:
            writer.writerow(
                [e.epoch, "" if e.train_loss is None else repr(e.train_loss), repr(e.val_loss), repr(e.val_acc)]
            )
        return buf.getvalue()


def binary_targets(labels: np.ndarray) -> np.ndarray:
    """Coronary -> 1 (CAC); aortic and other-negative -> 0."""
    return (np.asarray(labels) == int(Label.CORONARY)).astype(np.int64)


def sample_balanced_batch(store: PatchStore, cfg: TrainConfig, rng: np.random.Generator):
    """Half coronary patches, the other half split aortic / other-negative.

    Draws with replacement, uniformly within each stratum. Returns
    ``(patches, targets, indices)`` with patches as float64 ``(B, 51, 51)``.
    """
    half = cfg.batch_size // 2
    n_aortic = cfg.n_aortic
    plan = [(Label.CORONARY, half), (Label.AORTIC, n_aortic), (Label.OTHER, half - n_aortic)]
    picks = []
    for label, count in plan:
        if count == 0:
            continue
        pool = store.indices(label)
        if not len(pool):
            raise StratumExhaustedError({Label.OTHER: "other-negative"}.get(label, label.annotation_name))
        picks.append(pool[rng.integers(0, len(pool), size=count)])
    idx = np.concatenate(picks)
    return store.values[idx].astype(np.float64), binary_targets(store.labels[idx]), idx


def evaluate_store(model: Network, store: PatchStore, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and pixel accuracy over a store (dropout off)."""
    targets = binary_targets(store.labels)
    total = 0.0
    correct = 0
    for start in range(0, len(store), batch_size):
        x = store.values[start : start + batch_size].astype(np.float64)
        logits = predict_logits(model, x)
        logp = log_softmax(logits)
        t = targets[start : start + batch_size]
        total += float(-logp[np.arange(len(t)), t].sum())
        correct += int(((logp[:, 1] > logp[:, 0]).astype(np.int64) == t).sum())
    n = max(len(store), 1)
    return total / n, correct / n


class Trainer:
    """Stateful training loop; :func:`train` drives it end to end."""

    def __init__(self, train_store: PatchStore, val_store: PatchStore, cfg: TrainConfig, model: Network | None = None):
        self.train_store = train_store
        self.val_store = val_store
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.model = he_init(model or Network.pixel_classifier(), self.rng)
        self.state = OptimizerState.zeros_like(self.model, learning_rate=cfg.learning_rate)
        self.step_count = 0

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_store) / self.cfg.batch_size))

    def step(self) -> float:
        x, y, _ = sample_balanced_batch(self.train_store, self.cfg, self.rng)
        mask = None
        if self.cfg.dropout_rate > 0:
            _, mask = dropout_apply(np.ones((len(y), self.model.dense_units)), self.cfg.dropout_rate, self.rng)
        try:
            value, grads = loss_and_backward(self.model, x, y, mask)
        except NonFiniteError:
            value = math.nan
        if not math.isfinite(value):
            spe = self.steps_per_epoch
            raise TrainingDivergedError(self.step_count // spe + 1, self.step_count % spe)
        adagrad_step(self.model, grads, self.state)
        self.step_count += 1
        return value

    def save_checkpoint(self, path) -> None:
        save_checkpoint(path, self.model, self.state, self.cfg, step=self.step_count, rng=self.rng)

    @classmethod
    def from_checkpoint(cls, path, train_store: PatchStore, val_store: PatchStore) -> "Trainer":
        ckpt = load_checkpoint(path)
        if ckpt.state is None or ckpt.rng_state is None:
            raise CheckpointError(f"{path}: checkpoint carries no optimizer / RNG state to resume from")
        self = cls.__new__(cls)
        self.train_store = train_store
        self.val_store = val_store
        self.cfg = ckpt.config
        self.model = ckpt.model
        self.state = ckpt.state
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = ckpt.rng_state
        self.step_count = ckpt.step
        return self


def train(train_store: PatchStore, val_store: PatchStore, cfg: TrainConfig, model: Network | None = None):
    """Train, keeping the parameters with the lowest validation loss.

    The freshly initialised model is evaluated as epoch 0, so the result is
    never worse on validation than the starting point. Training stops when
    ``early_stop_patience`` consecutive validations fail to improve (the
    first failure when patience is 0) or after ``max_epochs``.
    """
    trainer = Trainer(train_store, val_store, cfg, model)
    report = TrainReport()
    val_loss, val_acc = evaluate_store(trainer.model, val_store)
    report.epochs.append(EpochRecord(0, None, val_loss, val_acc))
    best = trainer.model.copy()
    report.best_val_loss, report.best_epoch = val_loss, 0
    stale = 0
    report.stop_reason = "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        losses = [trainer.step() for _ in range(trainer.steps_per_epoch)]
        if epoch % cfg.validation_interval:
            continue
        val_loss, val_acc = evaluate_store(trainer.model, val_store)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_acc))
        log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, np.mean(losses), val_loss, val_acc)
        if val_loss < report.best_val_loss:
            best = trainer.model.copy()
            report.best_val_loss, report.best_epoch = val_loss, epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                report.stop_reason = "early_stop"
                break
    report.steps = trainer.step_count
    return best, report


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Network
    state: OptimizerState | None
    config: TrainConfig | None
    step: int
    seed: int | None
    rng_state: dict | None


def save_checkpoint(path, model: Network, state: OptimizerState | None = None, cfg: TrainConfig | None = None,
                    step: int = 0, rng: np.random.Generator | None = None) -> None:
    header = {
        "architecture": model.architecture(),
        "param_order": [[name, list(p.shape)] for name, p in model.params.items()],
        "seed": None if cfg is None else cfg.rng_seed,
        "step": int(step),
        "config": None if cfg is None else cfg.to_dict(),
        "rng_state": None if rng is None else rng.bit_generator.state,
        "optimizer": None if state is None else {"learning_rate": state.learning_rate, "epsilon": state.epsilon},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]))
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        if state is not None:
            for name in model.params:
                fh.write(np.ascontiguousarray(state.accumulators[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC or len(raw) <= len(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    if raw[len(CHECKPOINT_MAGIC)] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {raw[len(CHECKPOINT_MAGIC)]} unsupported")
    newline = raw.find(b"\n", len(CHECKPOINT_MAGIC) + 1)
    if newline < 0:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[len(CHECKPOINT_MAGIC) + 1 : newline].decode("utf-8"))
        model = Network.from_architecture(header["architecture"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header ({exc})") from exc
    order = [(name, tuple(shape)) for name, shape in header["param_order"]]
    if order != list(model.param_shapes().items()):
        raise CheckpointError(f"{path}: parameter layout disagrees with the architecture")
    n = model.n_params
    body = raw[newline + 1 :]
    has_opt = header.get("optimizer") is not None
    expected = 8 * n * (2 if has_opt else 1)
    if len(body) != expected:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(body)} of {expected} parameter bytes)")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    model.set_flat_params(values[:n])
    state = None
    if has_opt:
        state = OptimizerState.zeros_like(model, **header["optimizer"])
        pos = n
        for name, p in model.params.items():
            state.accumulators[name] = values[pos : pos + p.size].reshape(p.shape).copy()
            pos += p.size
    cfg = None if header.get("config") is None else TrainConfig.from_dict(header["config"])
    return Checkpoint(model, state, cfg, int(header.get("step", 0)), header.get("seed"), header.get("rng_state"))
