"""Training loop with the published per-model hyperparameter defaults."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import torch
import torch.nn.functional as F

from asffnet.backbones import Classifier, check_batch, predicted_labels
from asffnet.data import ArrayDataset, iter_batches, stream_seed
from asffnet.errors import ConfigurationError, TrainingError

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
# "l2": the decay coefficient is an L2 penalty folded into the gradient.
# "inverse_time": lr_t = lr / (1 + decay * t) per optimizer step, no penalty.
DECAY_MODES = ("l2", "inverse_time")

# arch -> (learning rate, decay, batch size, optimizer)
PUBLISHED_DEFAULTS = {
    "lenet5": (0.0001, 0.0005, 32, "sgd"),
    "vgg16": (0.0001, 0.0005, 32, "sgd"),
    "resnet34": (0.0005, 0.0005, 32, "adam"),
    "resnet101": (0.0001, 0.0005, 32, "adam"),
    "resnet50": (0.0005, 0.0005, 32, "sgd"),
    "asff_resnet50": (0.0001, 0.0005, 32, "adam"),
}
PUBLISHED_EPOCHS = 500


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    weight_decay: float = 0.0
    batch_size: int = 32
    optimizer: str = "adam"
    epochs: int = 20
    seed: int = 0
    decay_mode: str = "l2"
    momentum: float = 0.0
    augment: bool = True
    eval_batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.decay_mode not in DECAY_MODES:
            raise ConfigurationError(f"decay_mode must be one of {DECAY_MODES}, got {self.decay_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def default_config(arch: str, **overrides) -> TrainConfig:
    """The published row for ``arch`` (500 epochs), with optional overrides."""
    if arch not in PUBLISHED_DEFAULTS:
        raise ConfigurationError(f"no default hyperparameters for arch {arch!r}")
    lr, decay, batch, opt = PUBLISHED_DEFAULTS[arch]
    cfg = TrainConfig(
        learning_rate=lr, weight_decay=decay, batch_size=batch, optimizer=opt,
        epochs=PUBLISHED_EPOCHS,
    )
    return replace(cfg, **overrides) if overrides else cfg


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    wd = cfg.weight_decay if cfg.decay_mode == "l2" else 0.0
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=wd)
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)


def step_learning_rate(cfg: TrainConfig, global_step: int) -> float:
    if cfg.decay_mode == "inverse_time":
        return cfg.learning_rate / (1.0 + cfg.weight_decay * global_step)
    return cfg.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    seconds: float = 0.0


HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc")


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    optimizer_state: dict | None = field(default=None, repr=False)

    @property
    def final(self) -> EpochRecord:
        return self.records[-1]

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall-clock seconds are kept out of the file."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            EpochRecord(int(r["epoch"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:])) for r in rows
        ])

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in rows])


def evaluate_loss_acc(model: Classifier, data: ArrayDataset, batch_size: int = 128):
    """Mean cross-entropy and accuracy in eval mode."""
    was_training = model.training
    model.eval()
    total_loss, correct = 0.0, 0
    with torch.no_grad():
        for x, y in iter_batches(data, batch_size):
            logits = model(x)
            total_loss += F.cross_entropy(logits, y, reduction="sum").item()
            correct += int((predicted_labels(torch.softmax(logits, 1)) == y).sum())
    model.train(was_training)
    n = len(data)
    return total_loss / n, correct / n


def train(
    model: Classifier,
    train_set: ArrayDataset,
    test_set: ArrayDataset | None,
    cfg: TrainConfig,
    *,
    start_epoch: int = 0,
    history: TrainHistory | None = None,
    optimizer_state: dict | None = None,
    on_epoch_end=None,
    prefetch: int = 0,
):
    """Train for epochs ``start_epoch + 1 .. cfg.epochs``.

    Shuffling, augmentation and dropout draw from streams keyed by
    ``(cfg.seed, epoch)``, so a run resumed from an epoch-``k`` checkpoint
    (with its optimizer state) replays an uninterrupted run exactly.
    ``on_epoch_end(epoch, model, history, optimizer)`` is called after each epoch.
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    check_batch(model, train_set.images[:1])
    history = history if history is not None else TrainHistory()
    optimizer = make_optimizer(model.parameters(), cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        torch.manual_seed(stream_seed(cfg.seed, epoch, salt=1))
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        batches = iter_batches(
            train_set, cfg.batch_size, shuffle=True, augment_batches=cfg.augment,
            seed=cfg.seed, epoch=epoch, prefetch=prefetch,
        )
        for step, (x, y) in enumerate(batches):
            for group in optimizer.param_groups:
                group["lr"] = step_learning_rate(cfg, (epoch - 1) * steps_per_epoch + step)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * y.shape[0]
            with torch.no_grad():
                correct += int((predicted_labels(torch.softmax(logits, 1)) == y).sum())
            seen += y.shape[0]

        test_loss, test_acc = (float("nan"), float("nan"))
        if test_set is not None and len(test_set):
            test_loss, test_acc = evaluate_loss_acc(model, test_set, cfg.eval_batch_size)
        rec = EpochRecord(
            epoch, loss_sum / seen, correct / seen, test_loss, test_acc, time.perf_counter() - t0
        )
        history.records.append(rec)
        log.info(
            "epoch %d/%d train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f (%.1fs)",
            epoch, cfg.epochs, rec.train_loss, rec.train_acc, rec.test_loss, rec.test_acc, rec.seconds,
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, history, optimizer)

    history.optimizer_state = optimizer.state_dict()
    model.eval()
    return model, history
