"""Shared fixtures: synthetic stores, a scene corpus, and trained models.

Session-scoped so the expensive artifacts (the full-size plant fixture and
its trained model) are built once per pytest run and shared between the
module tests and the acceptance suite.
"""

import time

import pytest
import torch

from powersat.dataset import build_dataset, load_manifest
from powersat.model import tiny_spec
from powersat.synthetic import SyntheticSpec, write_scene_corpus, write_synthetic_store
from powersat.training import TrainConfig, train

torch.set_num_threads(1)

# Full-size fixture scale and the training recipe used on it. The tiny
# architecture on the strongly separable fixture converges within a few
# epochs at lr 0.01, comfortably inside the 30-epoch budget.
FULL_PER_CLASS = 500
FULL_STORE_SEED = 20200501
FULL_TRAIN_KWARGS = dict(
    epochs=30, per_class=48, batch_size=32, learning_rate=0.01,
    plateau_patience=10, lr_decay=0.5, target_val_accuracy=None,
    early_stop_patience=None, init_seed=0, sampler_seed=0,
)

COOLING_PER_CLASS = 300
COOLING_STORE_SEED = 20200502


@pytest.fixture(scope="session")
def plant_store(tmp_path_factory):
    """Small 11-class store + manifest for fast plumbing tests."""
    root = tmp_path_factory.mktemp("plant-small")
    write_synthetic_store(
        root / "store", SyntheticSpec.plants(), per_class=24, seed=101,
        images_per_site=2,
    )
    build_dataset(root / "store", root / "manifest.json")
    return root


@pytest.fixture(scope="session")
def plant_manifest(plant_store):
    return load_manifest(plant_store / "manifest.json")


@pytest.fixture(scope="session")
def cooling_store(tmp_path_factory):
    """Small 4-class cooling store + manifest."""
    root = tmp_path_factory.mktemp("cooling-small")
    write_synthetic_store(
        root / "store", SyntheticSpec.cooling(), per_class=16, seed=102,
    )
    build_dataset(root / "store", root / "manifest.json", label_field="cooling_class")
    return root


@pytest.fixture(scope="session")
def scene_corpus(tmp_path_factory):
    """Raw-ingest corpus: catalog.csv + one raster tile per site."""
    root = tmp_path_factory.mktemp("scenes")
    write_scene_corpus(root, seed=11)
    return root


@pytest.fixture(scope="session")
def tiny_run(plant_store):
    """A briefly trained model on the small store, for wiring-level tests."""
    manifest = load_manifest(plant_store / "manifest.json")
    config = TrainConfig(
        epochs=6, per_class=16, batch_size=16, learning_rate=0.05,
        plateau_patience=10, lr_decay=0.5, early_stop_patience=None,
    )
    state, ckpt = train(
        manifest, config, plant_store / "store", plant_store / "run",
        spec=tiny_spec(len(manifest.classes)),
    )
    return {
        "state": state,
        "ckpt": ckpt,
        "manifest": manifest,
        "store": plant_store / "store",
        "out": plant_store / "run",
    }


@pytest.fixture(scope="session")
def full_plant(tmp_path_factory):
    """Full-size 11-class fixture: 500 patches per class plus manifest."""
    root = tmp_path_factory.mktemp("plant-full")
    write_synthetic_store(
        root / "store", SyntheticSpec.plants(),
        per_class=FULL_PER_CLASS, seed=FULL_STORE_SEED,
    )
    build_dataset(root / "store", root / "manifest.json")
    return root


@pytest.fixture(scope="session")
def full_plant_run(full_plant):
    """The tiny architecture trained on the full-size plant fixture."""
    manifest = load_manifest(full_plant / "manifest.json")
    config = TrainConfig(**FULL_TRAIN_KWARGS)
    start = time.monotonic()
    state, ckpt = train(
        manifest, config, full_plant / "store", full_plant / "run",
        spec=tiny_spec(len(manifest.classes)),
    )
    return {
        "state": state,
        "ckpt": ckpt,
        "manifest": manifest,
        "store": full_plant / "store",
        "out": full_plant / "run",
        "wall_s": time.monotonic() - start,
        "config": config,
    }


@pytest.fixture(scope="session")
def full_cooling(tmp_path_factory):
    """Full-size 4-class cooling fixture for the transfer experiments."""
    root = tmp_path_factory.mktemp("cooling-full")
    write_synthetic_store(
        root / "store", SyntheticSpec.cooling(),
        per_class=COOLING_PER_CLASS, seed=COOLING_STORE_SEED,
    )
    build_dataset(root / "store", root / "manifest.json", label_field="cooling_class")
    return root
