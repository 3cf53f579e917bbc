"""Evaluation: confusion matrices over repeated balanced test draws.

The protocol draws ``n_draws`` balanced samples (default 10) from the test
split, predicts every sampled patch by argmax logit (ties go to the lowest
class index), and row-normalizes each draw's confusion matrix to
percentages. The report carries the per-cell mean and standard deviation
(population, over draws), the per-class accuracies (diagonal of the mean),
and the overall accuracy (unweighted diagonal mean, matching the balanced
draw protocol).

Artifacts: a JSON report, a CSV of "mean|std" cells, and an annotated
heat-map image.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import DatasetManifest, ManifestDataset, balanced_indices
from .errors import ConfigError
from .model import ModelParams, predict_logits

DEFAULT_N_DRAWS = 10


@dataclass
class EvaluationReport:
    """Mean and spread of row-normalized confusion over balanced draws."""

    label_map: list[str]
    mean_confusion: np.ndarray  # (C, C) percentages, rows sum to 100
    std_confusion: np.ndarray  # (C, C) std over draws
    n_draws: int
    per_class: int
    seed: int
    split: str

    @property
    def per_class_accuracy(self) -> np.ndarray:
        return np.diag(self.mean_confusion)

    @property
    def overall_accuracy(self) -> float:
        return float(self.per_class_accuracy.mean())

    def to_dict(self) -> dict:
        return {
            "label_map": list(self.label_map),
            "mean_confusion": self.mean_confusion.tolist(),
            "std_confusion": self.std_confusion.tolist(),
            "per_class_accuracy": self.per_class_accuracy.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "n_draws": self.n_draws,
            "per_class": self.per_class,
            "seed": self.seed,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            label_map=list(d["label_map"]),
            mean_confusion=np.asarray(d["mean_confusion"], dtype=np.float64),
            std_confusion=np.asarray(d["std_confusion"], dtype=np.float64),
            n_draws=int(d["n_draws"]),
            per_class=int(d["per_class"]),
            seed=int(d["seed"]),
            split=d["split"],
        )


def save_report(report: EvaluationReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return path


def load_report(path: str | Path) -> EvaluationReport:
    return EvaluationReport.from_dict(
        json.loads(Path(path).read_text(encoding="utf-8"))
    )


def evaluate_predictor(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    ds: ManifestDataset,
    split: str = "test",
    n_draws: int = DEFAULT_N_DRAWS,
    per_class: int | None = None,
    seed: int = 0,
    batch_size: int = 64,
) -> EvaluationReport:
    """Core protocol against any logits function (enables oracle predictors).

    ``per_class`` defaults to the smallest class size in the split. Draw d
    uses the random stream derived from (seed, d), so reports are
    deterministic and draws independent.
    """
    if n_draws < 2:
        raise ConfigError("n_draws must be at least 2 for a defined std")
    classes = ds.manifest.classes
    labels = ds.labels(split)
    counts = np.bincount(labels, minlength=len(classes))
    missing = [classes[i] for i in np.flatnonzero(counts == 0)]
    if missing:
        raise ConfigError(f"classes missing from {split} split: {missing}")
    if per_class is None:
        per_class = int(counts.min())
    if per_class < 1:
        raise ConfigError("per_class must be positive")

    c = len(classes)
    draws = np.empty((n_draws, c, c), dtype=np.float64)
    for d in range(n_draws):
        rng = np.random.default_rng([seed, d])
        idx = balanced_indices(labels, per_class, rng)
        confusion = np.zeros((c, c), dtype=np.float64)
        for x, y in ds.iter_batches(split, batch_size, idx):
            pred = np.argmax(predict_fn(x), axis=1)
            np.add.at(confusion, (y, pred), 1.0)
        draws[d] = confusion / confusion.sum(axis=1, keepdims=True) * 100.0
    return EvaluationReport(
        label_map=list(classes),
        mean_confusion=draws.mean(axis=0),
        std_confusion=draws.std(axis=0),
        n_draws=n_draws,
        per_class=per_class,
        seed=seed,
        split=split,
    )


def evaluate(
    params: ModelParams,
    manifest: DatasetManifest,
    store_root: str | Path,
    split: str = "test",
    n_draws: int = DEFAULT_N_DRAWS,
    per_class: int | None = None,
    seed: int = 0,
    batch_size: int = 64,
) -> EvaluationReport:
    """Evaluate a trained model on balanced draws from a split."""
    if params.spec.num_classes != len(manifest.classes):
        raise ConfigError(
            f"model has {params.spec.num_classes} classes, manifest has "
            f"{len(manifest.classes)}"
        )
    ds = ManifestDataset(manifest, store_root)
    return evaluate_predictor(
        lambda x: predict_logits(params, x, batch_size),
        ds, split=split, n_draws=n_draws, per_class=per_class,
        seed=seed, batch_size=batch_size,
    )


def evaluate_cooling(
    params: ModelParams,
    manifest: DatasetManifest,
    store_root: str | Path,
    **kwargs,
) -> EvaluationReport:
    """Evaluate on the cooling-mechanism label map."""
    if manifest.label_field != "cooling_class":
        raise ConfigError(
            f"cooling evaluation needs a cooling_class manifest, "
            f"got {manifest.label_field!r}"
        )
    return evaluate(params, manifest, store_root, **kwargs)


STD_ANNOTATION_THRESHOLD = 0.5  # percentage points


def render_confusion(
    report: EvaluationReport, out_dir: str | Path, stem: str = "confusion"
) -> tuple[Path, Path]:
    """Write the heat-map image and the lossless CSV; returns their paths.

    CSV layout: header row of class names, then one row per true class of
    ``mean|std`` cells (full float precision, so parsing reproduces the
    matrices exactly).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"{stem}.png"
    csv_path = out_dir / f"{stem}.csv"

    classes = report.label_map
    c = len(classes)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(classes)
        for i in range(c):
            writer.writerow([
                f"{float(report.mean_confusion[i, j])!r}"
                f"|{float(report.std_confusion[i, j])!r}"
                for j in range(c)
            ])

    fig, ax = plt.subplots(figsize=(1.0 + 0.75 * c, 1.0 + 0.75 * c))
    im = ax.imshow(report.mean_confusion, cmap="viridis", vmin=0.0, vmax=100.0)
    ax.set_xticks(range(c), classes, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(c), classes, fontsize=8)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    for i in range(c):
        for j in range(c):
            mean = report.mean_confusion[i, j]
            std = report.std_confusion[i, j]
            if mean < 0.05 and std < STD_ANNOTATION_THRESHOLD:
                continue
            text = f"{mean:.1f}"
            if std >= STD_ANNOTATION_THRESHOLD:
                text += f"±{std:.1f}"
            color = "black" if mean > 50 else "white"
            ax.text(j, i, text, ha="center", va="center", fontsize=7, color=color)
    fig.colorbar(im, ax=ax, shrink=0.8, label="accuracy [%]")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return png_path, csv_path


def load_confusion_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Parse a rendered CSV back into (class names, mean, std)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    classes = rows[0]
    c = len(classes)
    mean = np.empty((c, c), dtype=np.float64)
    std = np.empty((c, c), dtype=np.float64)
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row):
            m, s = cell.split("|")
            mean[i, j] = float(m)
            std[i, j] = float(s)
    return classes, mean, std


def accuracy_summary(report: EvaluationReport) -> str:
    """Human-readable accuracy lines for CLI output."""
    lines = [f"overall accuracy: {report.overall_accuracy:.1f}%"]
    for name, acc, std in zip(
        report.label_map,
        report.per_class_accuracy,
        np.diag(report.std_confusion),
    ):
        lines.append(f"  {name}: {acc:.1f}% (std {std:.1f})")
    return "\n".join(lines)


def uniform_random_predictor(
    num_classes: int, seed: int
) -> Callable[[np.ndarray], np.ndarray]:
    """A predictor drawing uniform random logits (baseline for tests)."""
    rng = np.random.default_rng(seed)

    def predict(x: np.ndarray) -> np.ndarray:
        return rng.random((len(x), num_classes))

    return predict
