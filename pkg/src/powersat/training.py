"""Model optimization: SGD with momentum, balanced epochs, checkpoints.

The optimizer implements the classical momentum update with weight decay
folded into the gradient::

    v <- momentum * v + g + weight_decay * w
    w <- w - lr * v

Each epoch draws a balanced sample (exactly per_class items per class),
augments every item with a random square symmetry, and sweeps minibatches.
Validation accuracy is measured on a balanced draw from the val split; the
checkpoint with the best validation accuracy is kept (ties keep the
earlier epoch). The learning rate decays by a fixed factor whenever
validation fails to improve for plateau_patience consecutive epochs, and
training stops early after early_stop_patience epochs without improvement.

Every run appends one JSON line per epoch (epoch, train_loss,
val_accuracy, lr, wall_time_s) to ``train_log.jsonl`` in the output
directory. Runs are deterministic given the two seeds.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .dataset import DatasetManifest, ManifestDataset, balanced_indices
from .errors import ConfigError, NonFiniteLossError
from .model import (
    ModelParams,
    ModelSpec,
    build_model,
    cooling_spec,
    load_checkpoint,
    plant_spec,
    predict_logits,
    save_checkpoint,
    transfer_head,
)

TASKS = ("plant_11", "cooling_4")
CHECKPOINT_NAME = "checkpoint_best.npz"
LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    """Hyperparameters and seeds for one training run.

    ``learning_rate=0`` is allowed as an explicit null update; plateau
    decay multiplies the rate by ``lr_decay`` after ``plateau_patience``
    epochs without validation improvement. ``target_val_accuracy`` stops
    the run once the best validation accuracy reaches it.
    """

    task: str = "plant_11"
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    per_class: int = 32
    init_seed: int = 0
    sampler_seed: int = 0
    pretrained: str | None = None
    early_stop_patience: int | None = 15
    plateau_patience: int = 5
    lr_decay: float = 0.1
    freeze_backbone: bool = False
    target_val_accuracy: float | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        for name in ("batch_size", "epochs", "per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path, overrides: dict | None = None) -> "TrainConfig":
        """Load a JSON config file; overrides (e.g. CLI flags) win."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


@dataclass
class TrainState:
    """Where a training run ended up."""

    params: ModelParams
    velocity: dict[str, torch.Tensor]
    epoch: int
    best_val_accuracy: float
    best_epoch: int
    history: list[tuple[int, float, float]] = field(default_factory=list)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    Torch tensors keep autograd; anything else is evaluated in float64
    numpy with max-subtraction stabilization and returned as a float.
    Labels outside [0, C) raise.
    """
    if isinstance(logits, torch.Tensor):
        if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ConfigError("label outside [0, num_classes)")
        return F.cross_entropy(logits, labels)
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ConfigError("label outside [0, num_classes)")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(y)), y]))


def sgd_update(weight, gradient, velocity, lr, momentum, weight_decay):
    """One pure momentum-SGD update on arrays; returns (weight, velocity)."""
    v = momentum * velocity + gradient + weight_decay * weight
    return weight - lr * v, v


class MomentumSgd:
    """In-place momentum SGD over named torch parameters."""

    def __init__(self, named_params, lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._params = [(name, p) for name, p in named_params if p.requires_grad]
        self.velocity = {name: torch.zeros_like(p) for name, p in self._params}

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for name, p in self._params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v.mul_(self.momentum).add_(p.grad).add_(p, alpha=self.weight_decay)
            p.add_(v, alpha=-self.lr)


def _default_spec(task: str, num_classes: int) -> ModelSpec:
    if task == "cooling_4":
        return cooling_spec(num_classes)
    return plant_spec(num_classes)


def _check_classes(manifest: DatasetManifest):
    for split in ("train", "val"):
        counts = manifest.counts(split)
        empty = sorted(c for c, n in counts.items() if n == 0)
        if empty:
            raise ConfigError(f"classes with no {split} images: {empty}")


def _balanced_val_accuracy(
    ds: ManifestDataset, params: ModelParams, rng: np.random.Generator,
    batch_size: int,
) -> float:
    labels = ds.labels("val")
    per_class = int(np.bincount(labels, minlength=len(ds.manifest.classes)).min())
    idx = balanced_indices(labels, per_class, rng)
    correct = 0
    for x, y in ds.iter_batches("val", batch_size, idx):
        pred = predict_logits(params, x, batch_size).argmax(axis=1)
        correct += int((pred == y).sum())
    return correct / len(idx)


def _initial_params(config: TrainConfig, spec: ModelSpec, num_classes: int) -> ModelParams:
    if config.pretrained:
        source = load_checkpoint(config.pretrained)
        return transfer_head(source, num_classes, config.init_seed, expected=spec)
    return build_model(spec, config.init_seed)


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    store_root: str | Path,
    out_dir: str | Path,
    spec: ModelSpec | None = None,
) -> tuple[TrainState, Path]:
    """Run the full optimization loop; returns the state and best checkpoint.

    ``spec=None`` selects the full-size architecture for the config's
    task; smaller specs slot in for tests and CPU-sized runs.
    """
    _check_classes(manifest)
    expected_field = "cooling_class" if config.task == "cooling_4" else "plant_class"
    if manifest.label_field != expected_field:
        raise ConfigError(
            f"task {config.task} needs a {expected_field} manifest, "
            f"got {manifest.label_field!r}"
        )
    num_classes = len(manifest.classes)
    if config.batch_size > config.per_class * num_classes:
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds epoch sample size "
            f"{config.per_class * num_classes}"
        )
    if spec is None:
        spec = _default_spec(config.task, num_classes)
    if spec.num_classes != num_classes:
        raise ConfigError(
            f"spec has {spec.num_classes} classes, manifest has {num_classes}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME
    log_path.write_text("", encoding="utf-8")  # fresh log per run
    ckpt_path = out_dir / CHECKPOINT_NAME

    params = _initial_params(config, spec, num_classes)
    module = params.module
    if config.freeze_backbone:
        for name, p in module.named_parameters():
            p.requires_grad_(name.startswith("head."))
    opt = MomentumSgd(
        module.named_parameters(), config.learning_rate,
        config.momentum, config.weight_decay,
    )

    ds = ManifestDataset(manifest, store_root)
    train_labels = ds.labels("train")
    history: list[tuple[int, float, float]] = []
    best = -1.0
    best_epoch = -1
    since_improve = 0
    epoch = -1

    for epoch in range(config.epochs):
        t0 = time.monotonic()
        rng = np.random.default_rng([config.sampler_seed, epoch])
        idx = balanced_indices(train_labels, config.per_class, rng)
        module.train()
        loss_sum = 0.0
        seen = 0
        for b, (x, y) in enumerate(ds.iter_batches("train", config.batch_size, idx, rng)):
            xt = torch.from_numpy(x)
            yt = torch.from_numpy(y)
            logits = module(xt)
            loss = cross_entropy(logits, yt)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, b, opt.lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.item()) * len(y)
            seen += len(y)
        module.eval()
        train_loss = loss_sum / seen

        val_rng = np.random.default_rng([config.sampler_seed, epoch, 1])
        val_acc = _balanced_val_accuracy(ds, params, val_rng, config.batch_size)
        history.append((epoch, train_loss, val_acc))
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_accuracy": val_acc,
            "lr": opt.lr,
            "wall_time_s": time.monotonic() - t0,
        }
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")

        if val_acc > best:
            best = val_acc
            best_epoch = epoch
            since_improve = 0
            save_checkpoint(params, ckpt_path, metadata={
                "task": config.task,
                "epoch": epoch,
                "val_accuracy": val_acc,
                "classes": list(manifest.classes),
                "label_field": manifest.label_field,
            })
        else:
            since_improve += 1
            if since_improve % config.plateau_patience == 0:
                opt.lr *= config.lr_decay

        if config.target_val_accuracy is not None and best >= config.target_val_accuracy:
            break
        if (
            config.early_stop_patience is not None
            and since_improve >= config.early_stop_patience
        ):
            break

    state = TrainState(
        params=params,
        velocity=opt.velocity,
        epoch=epoch,
        best_val_accuracy=best,
        best_epoch=best_epoch,
        history=history,
    )
    return state, ckpt_path


def train_cooling(
    manifest: DatasetManifest,
    pretrained: str | Path,
    config: TrainConfig,
    store_root: str | Path,
    out_dir: str | Path,
    spec: ModelSpec | None = None,
) -> tuple[TrainState, Path]:
    """Fine-tune a plant-task checkpoint on the cooling-mechanism labels.

    The manifest must be a cooling dataset (built with
    ``label_field="cooling_class"``, which drops unlabeled thermal sites).
    """
    if manifest.label_field != "cooling_class":
        raise ConfigError(
            f"cooling training needs a cooling_class manifest, "
            f"got {manifest.label_field!r}"
        )
    config = dataclasses.replace(config, task="cooling_4", pretrained=str(pretrained))
    return train(manifest, config, store_root, out_dir, spec=spec)
