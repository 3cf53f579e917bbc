"""Dataset assembly: scan, split, normalize, augment, balance.

A dataset is described by a JSON manifest listing the patch containers of
each split (train/val/test), the ordered class list, per-channel
normalization statistics, and the parameters that produced the split, so
any downstream step can be reproduced from the manifest alone.

Splitting is stratified per class with largest-remainder rounding and can
group by image or by site (all acquisitions of a site stay together).
Normalization statistics are per-channel mean and population std over all
pixels of all images, streamed so stores never need to fit in memory.

Augmentation covers the 8 axis-aligned symmetries of the square (4
rotations, each optionally preceded by a horizontal flip). Transform ids:
0-3 rotate by 90 deg counterclockwise id times; 4-7 flip left-right first,
then rotate by (id - 4) times.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .patches import list_patches, read_patch_array, read_sidecar

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
MANIFEST_VERSION = 1


@dataclass
class NormStats:
    """Per-channel mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    pixel_count: int

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "pixel_count": int(self.pixel_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            pixel_count=int(d["pixel_count"]),
        )


def compute_norm_stats(cubes: Iterable[np.ndarray]) -> NormStats:
    """Stream per-channel mean/std (population) over (C, H, W) cubes.

    Uses pairwise merging of (count, mean, M2) so the result is exact up
    to float64 rounding regardless of how many cubes stream through.
    """
    n = 0
    mean = None
    m2 = None
    for cube in cubes:
        c = cube.shape[0]
        flat = cube.reshape(c, -1).astype(np.float64)
        nb = flat.shape[1]
        mb = flat.mean(axis=1)
        m2b = ((flat - mb[:, None]) ** 2).sum(axis=1)
        if mean is None:
            n, mean, m2 = nb, mb, m2b
        else:
            delta = mb - mean
            total = n + nb
            mean = mean + delta * (nb / total)
            m2 = m2 + m2b + delta ** 2 * (n * nb / total)
            n = total
    if mean is None:
        raise ConfigError("cannot compute statistics over an empty dataset")
    std = np.sqrt(m2 / n)
    if np.any(std == 0):
        flat_channels = [i for i, s in enumerate(std) if s == 0]
        raise ConfigError(f"zero variance in channels {flat_channels}")
    return NormStats(mean=mean, std=std, pixel_count=n)


def normalize(cube: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = stats.mean.astype(np.float32)[:, None, None]
    std = stats.std.astype(np.float32)[:, None, None]
    return (cube - mean) / std


def denormalize(cube: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = stats.mean.astype(np.float32)[:, None, None]
    std = stats.std.astype(np.float32)[:, None, None]
    return cube * std + mean


# --- square symmetries -------------------------------------------------------

N_TRANSFORMS = 8


def apply_transform(cube: np.ndarray, transform_id: int) -> np.ndarray:
    """Apply one of the 8 square symmetries to a (..., H, W) array."""
    if not 0 <= transform_id < N_TRANSFORMS:
        raise ValueError(f"transform id {transform_id} outside 0..7")
    out = cube
    if transform_id >= 4:
        out = np.flip(out, axis=-1)
    k = transform_id % 4
    if k:
        out = np.rot90(out, k, axes=(-2, -1))
    return np.ascontiguousarray(out)


def compose_transforms(first: int, second: int) -> int:
    """Id of the symmetry equal to applying ``first`` then ``second``."""
    i, j = first % 4, second % 4
    if first < 4 and second < 4:
        return (i + j) % 4
    if first < 4:
        return 4 + (j - i) % 4
    if second < 4:
        return 4 + (i + j) % 4
    return (j - i) % 4


def invert_transform(transform_id: int) -> int:
    """Id of the symmetry that undoes ``transform_id``."""
    for candidate in range(N_TRANSFORMS):
        if compose_transforms(transform_id, candidate) == 0:
            return candidate
    raise AssertionError("unreachable: every symmetry has an inverse")


# --- splitting ---------------------------------------------------------------

def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of n units to fractions, exact total.

    Floors the ideal shares, then hands leftover units to the largest
    fractional remainders; remainder ties go to the earlier bucket.
    """
    raw = [n * f for f in fractions]
    base = [int(v) for v in raw]
    leftover = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def split_dataset(
    entries: list[dict],
    label_field: str,
    seed: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    group_by: str = "image",
) -> dict[str, list[dict]]:
    """Stratified split of manifest entries into train/val/test.

    ``group_by="image"`` shuffles images independently; ``"site"`` keeps
    every image of a site in the same split. Allocation within each class
    uses largest-remainder rounding, so split sizes are exact for the
    class and fractions never silently drop an image.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise ConfigError(f"expected {len(SPLIT_NAMES)} fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    if group_by not in ("image", "site"):
        raise ConfigError(f"group_by must be 'image' or 'site', got {group_by!r}")

    by_class: dict[str, list[dict]] = {}
    for entry in entries:
        label = entry.get(label_field)
        if label is None:
            raise ConfigError(f"entry {entry.get('patch_id')!r} lacks {label_field!r}")
        by_class.setdefault(label, []).append(entry)

    rng = np.random.default_rng(seed)
    splits: dict[str, list[dict]] = {name: [] for name in SPLIT_NAMES}
    for label in sorted(by_class):
        class_entries = sorted(by_class[label], key=lambda e: e["patch_id"])
        if group_by == "site":
            groups: dict[str, list[dict]] = {}
            for entry in class_entries:
                key = entry.get("group_id", entry["site_id"])
                groups.setdefault(key, []).append(entry)
            units = [groups[k] for k in sorted(groups)]
        else:
            units = [[entry] for entry in class_entries]
        perm = rng.permutation(len(units))
        counts = largest_remainder(len(units), fractions)
        cursor = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for u in perm[cursor:cursor + count]:
                splits[name].extend(units[u])
            cursor += count
    for name in SPLIT_NAMES:
        splits[name].sort(key=lambda e: e["patch_id"])
    return splits


# --- balanced sampling -------------------------------------------------------

def balanced_indices(
    labels: Sequence[int], per_class: int, rng: np.random.Generator
) -> np.ndarray:
    """Index sample with exactly per_class draws of every present class.

    Classes with at least per_class members are subsampled without
    replacement. Smaller classes are oversampled as whole repetitions of
    the class plus a without-replacement remainder, so counts per item
    differ by at most one. The combined sample is shuffled.
    """
    labels = np.asarray(labels)
    out = []
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        n = len(idx)
        if n >= per_class:
            take = idx[rng.permutation(n)[:per_class]]
        else:
            reps = per_class // n
            rem = per_class - reps * n
            take = np.concatenate([np.tile(idx, reps), idx[rng.permutation(n)[:rem]]])
        out.append(take)
    sample = np.concatenate(out)
    return sample[rng.permutation(len(sample))]


# --- manifest ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Everything needed to reproduce and consume one dataset build."""

    label_field: str
    classes: list[str]
    seed: int
    fractions: tuple[float, float, float]
    group_by: str
    splits: dict[str, list[dict]]
    norm_stats: NormStats
    version: int = MANIFEST_VERSION

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def counts(self, split: str) -> dict[str, int]:
        out = {c: 0 for c in self.classes}
        for entry in self.splits[split]:
            out[entry[self.label_field]] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "label_field": self.label_field,
            "classes": list(self.classes),
            "seed": self.seed,
            "fractions": list(self.fractions),
            "group_by": self.group_by,
            "splits": self.splits,
            "norm_stats": self.norm_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            label_field=d["label_field"],
            classes=list(d["classes"]),
            seed=int(d["seed"]),
            fractions=tuple(d["fractions"]),
            group_by=d["group_by"],
            splits={k: list(v) for k, v in d["splits"].items()},
            norm_stats=NormStats.from_dict(d["norm_stats"]),
            version=int(d.get("version", MANIFEST_VERSION)),
        )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2), encoding="utf-8")
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        return DatasetManifest.from_dict(
            json.loads(Path(path).read_text(encoding="utf-8"))
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid dataset manifest {path}: {exc}") from exc


def scan_store(root: str | Path) -> list[dict]:
    """Collect manifest entries from every container sidecar under root."""
    root = Path(root)
    entries = []
    for path in list_patches(root):
        meta = read_sidecar(path)
        entries.append({
            "path": os.path.relpath(path, root),
            "patch_id": meta["patch_id"],
            "site_id": meta["site_id"],
            "group_id": meta.get("group_id", meta["site_id"]),
            "plant_class": meta["plant_class"],
            "cooling_class": meta.get("cooling_class"),
        })
    return entries


def build_dataset(
    store_root: str | Path,
    manifest_path: str | Path,
    label_field: str = "plant_class",
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    group_by: str = "image",
    stats_scope: str = "all",
) -> DatasetManifest:
    """Scan a patch store, split it, compute statistics, write the manifest.

    For cooling datasets (``label_field="cooling_class"``) entries without
    a cooling label are dropped before splitting. Normalization statistics
    cover all images (``stats_scope="all"``, the default) or only the
    train split (``"train"``).
    """
    if stats_scope not in ("all", "train"):
        raise ConfigError(f"stats_scope must be 'all' or 'train', got {stats_scope!r}")
    store_root = Path(store_root)
    entries = scan_store(store_root)
    if label_field == "cooling_class":
        entries = [e for e in entries if e["cooling_class"]]
    if not entries:
        raise ConfigError(f"no labeled patches found under {store_root}")
    splits = split_dataset(entries, label_field, seed, fractions, group_by)
    stats_entries = splits["train"] if stats_scope == "train" else entries
    stats = compute_norm_stats(
        read_patch_array(store_root / e["path"]) for e in stats_entries
    )
    classes = sorted({e[label_field] for e in entries})
    manifest = DatasetManifest(
        label_field=label_field,
        classes=classes,
        seed=seed,
        fractions=tuple(float(f) for f in fractions),
        group_by=group_by,
        splits=splits,
        norm_stats=stats,
    )
    save_manifest(manifest, manifest_path)
    return manifest


class ManifestDataset:
    """Batch access to a built dataset: loads, normalizes, augments.

    Pixel data stays on disk; batches are assembled on demand. An optional
    in-memory cache keeps raw cubes once read (fine for fixture-sized
    stores, skip it for full-scale ones).
    """

    def __init__(self, manifest: DatasetManifest, store_root: str | Path,
                 cache: bool = False):
        self.manifest = manifest
        self.root = Path(store_root)
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def entries(self, split: str) -> list[dict]:
        return self.manifest.splits[split]

    def labels(self, split: str) -> np.ndarray:
        field_ = self.manifest.label_field
        return np.array(
            [self.manifest.class_index(e[field_]) for e in self.entries(split)],
            dtype=np.int64,
        )

    def load_cube(self, entry: dict) -> np.ndarray:
        if self._cache is not None and entry["path"] in self._cache:
            return self._cache[entry["path"]]
        cube = read_patch_array(self.root / entry["path"])
        if self._cache is not None:
            self._cache[entry["path"]] = cube
        return cube

    def load_batch(
        self,
        split: str,
        indices: Sequence[int],
        augment_rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Assemble a normalized (N, C, H, W) batch and its labels."""
        entries = self.entries(split)
        labels = self.labels(split)
        cubes = []
        for i in indices:
            cube = self.load_cube(entries[i])
            if augment_rng is not None:
                cube = apply_transform(cube, int(augment_rng.integers(0, N_TRANSFORMS)))
            cubes.append(normalize(cube, self.manifest.norm_stats))
        x = np.stack(cubes).astype(np.float32)
        return x, labels[np.asarray(indices, dtype=np.int64)]

    def iter_batches(
        self, split: str, batch_size: int, indices: Sequence[int],
        augment_rng: np.random.Generator | None = None,
    ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        indices = np.asarray(indices)
        for start in range(0, len(indices), batch_size):
            yield self.load_batch(split, indices[start:start + batch_size], augment_rng)
