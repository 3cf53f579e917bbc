"""Acceptance suite: one test per shipped guarantee, each printing a verdict.

Every test announces "[PASS] criterion N: ..." or "[FAIL] criterion N: ..."
through the capture plugin so the verdicts stay visible in terminal output
even when print capture is on. Tolerances are pinned inline.
"""

import contextlib
import dataclasses
import datetime as dt
import hashlib
import itertools
import json
import math
import statistics

import numpy as np
import pytest
import torch

from powersat.cli import main as cli_main
from powersat.dataset import (
    ManifestDataset,
    apply_transform,
    balanced_indices,
    build_dataset,
    compose_transforms,
    load_manifest,
    normalize,
)
from powersat.evaluation import evaluate, evaluate_predictor, uniform_random_predictor
from powersat.explain import compute_cam
from powersat.geo import GeoTransform, local_crs
from powersat.model import (
    ModelSpec,
    StemSpec,
    build_model,
    head_bias,
    load_checkpoint,
    plant_spec,
    predict_logits,
    tiny_spec,
)
from powersat.patches import BAND_ORDER, background_offsets, crop_patch
from powersat.rasters import Band, RasterSource
from powersat.training import cross_entropy, sgd_update, train, train_cooling

torch.set_num_threads(1)


@pytest.fixture
def announce(capsys):
    def _print(line):
        with capsys.disabled():
            print(line, flush=True)

    return _print


@contextlib.contextmanager
def verdict(announce, line):
    try:
        yield
    except BaseException:
        announce(f"[FAIL] {line}")
        raise
    announce(f"[PASS] {line}")


def probe_features(ds, split, cap=None):
    """Per-band mean features for a ridge probe, capped per class."""
    taken = {}
    feats, labels = [], []
    for entry in ds.entries(split):
        label = ds.manifest.class_index(entry[ds.manifest.label_field])
        if cap is not None and taken.get(label, 0) >= cap:
            continue
        taken[label] = taken.get(label, 0) + 1
        cube = ds.load_cube(entry)
        feats.append(cube.reshape(10, -1).mean(axis=1))
        labels.append(label)
    return np.array(feats, dtype=np.float64), np.array(labels)


def linear_probe_accuracy(train_x, train_y, test_x, test_y, n_classes):
    """Ridge regression to one-hot targets; an oracle independent of torch."""
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-12
    xt = np.hstack([(train_x - mu) / sd, np.ones((len(train_x), 1))])
    xs = np.hstack([(test_x - mu) / sd, np.ones((len(test_x), 1))])
    onehot = np.eye(n_classes)[train_y]
    w = np.linalg.solve(xt.T @ xt + 1e-3 * np.eye(xt.shape[1]), xt.T @ onehot)
    return float((np.argmax(xs @ w, axis=1) == test_y).mean())


def tree_digest(root, skip=("run_manifest.json",)):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name in skip:
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_criterion_01_plant_task_end_to_end(full_plant_run, announce):
    line = ("criterion 1: 11-class end-to-end training reaches >=95% balanced "
            "test accuracy within 30 epochs and 10 minutes")
    with verdict(announce, line):
        manifest = full_plant_run["manifest"]
        ds = ManifestDataset(manifest, full_plant_run["store"])

        # fixture pre-verification: a linear probe must separate the classes
        # before the trained network is judged against them
        train_x, train_y = probe_features(ds, "train", cap=60)
        test_x, test_y = probe_features(ds, "test")
        probe = linear_probe_accuracy(
            train_x, train_y, test_x, test_y, len(manifest.classes)
        )
        assert probe >= 0.90, f"fixture probe accuracy {probe:.3f}"

        state = full_plant_run["state"]
        assert len(state.history) <= 30
        assert full_plant_run["wall_s"] <= 600.0, f"took {full_plant_run['wall_s']:.0f}s"

        params = load_checkpoint(full_plant_run["ckpt"])
        report = evaluate(
            params, manifest, full_plant_run["store"], n_draws=10, seed=7
        )
        assert report.overall_accuracy >= 95.0, f"accuracy {report.overall_accuracy:.2f}"


def test_criterion_02_cooling_transfer(full_plant_run, full_cooling, tmp_path, announce):
    line = ("criterion 2: transfer training reaches >=95% cooling accuracy and "
            "converges no slower than random init (median of 5 seeds)")
    with verdict(announce, line):
        cooling_manifest = load_manifest(full_cooling / "manifest.json")
        store = full_cooling / "store"
        base = full_plant_run["config"]

        def epochs_to_90(seed, pretrained):
            config = dataclasses.replace(
                base, epochs=20, target_val_accuracy=0.90,
                init_seed=seed, sampler_seed=seed,
            )
            if pretrained:
                state, _ = train_cooling(
                    cooling_manifest, full_plant_run["ckpt"], config,
                    store, tmp_path / f"t{seed}", spec=tiny_spec(4),
                )
            else:
                config = dataclasses.replace(config, task="cooling_4")
                state, _ = train(
                    cooling_manifest, config, store, tmp_path / f"s{seed}",
                    spec=tiny_spec(4),
                )
            return len(state.history) if state.best_val_accuracy >= 0.90 else 99

        transfer = [epochs_to_90(seed, True) for seed in range(5)]
        scratch = [epochs_to_90(seed, False) for seed in range(5)]
        assert all(n <= 20 for n in transfer), f"transfer never hit 90%: {transfer}"
        assert statistics.median(transfer) <= statistics.median(scratch), \
            f"transfer {transfer} vs scratch {scratch}"

        state, ckpt = train_cooling(
            cooling_manifest, full_plant_run["ckpt"], base,
            store, tmp_path / "final", spec=tiny_spec(4),
        )
        report = evaluate(
            load_checkpoint(ckpt), cooling_manifest, store, n_draws=10, seed=7
        )
        assert report.overall_accuracy >= 95.0, f"accuracy {report.overall_accuracy:.2f}"


def test_criterion_03_architecture_shapes(announce):
    line = ("criterion 3: resolution-preserving stem keeps 100x100 maps where "
            "the classic stem yields 25x25; weight shapes exact")
    with verdict(announce, line):
        params = build_model(plant_spec(11), init_seed=0)
        module = params.module.eval()
        assert tuple(module.stem[0].weight.shape) == (64, 10, 3, 3)
        assert tuple(module.head.weight.shape) == (11, 2048)

        x = torch.zeros(1, 10, 100, 100)
        with torch.no_grad():
            pre_stage = module.stem_features(x)
        assert tuple(pre_stage.shape[2:]) == (100, 100)

        control = build_model(ModelSpec(stem=StemSpec.standard()), init_seed=0)
        with torch.no_grad():
            control_pre = control.module.eval().stem_features(x)
        assert tuple(control_pre.shape[2:]) == (25, 25)


def test_criterion_04_gradient_check(announce):
    line = ("criterion 4: autograd matches central finite differences on 20 "
            "sampled parameters (relative error <= 1e-3)")
    with verdict(announce, line):
        params = build_model(tiny_spec(5), init_seed=11)
        module = params.module.double().eval()
        rng = np.random.default_rng(42)
        x = torch.tensor(rng.normal(size=(2, 10, 32, 32)))
        y = torch.tensor([1, 3])

        loss = cross_entropy(module(x), y)
        module.zero_grad()
        loss.backward()

        named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
        for _ in range(20):
            _, p = named[int(rng.integers(len(named)))]
            i = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            grad = float(p.grad.view(-1)[i])
            origin = float(flat[i])
            h = 1e-5 * max(1.0, abs(origin))
            with torch.no_grad():
                flat[i] = origin + h
                up = float(cross_entropy(module(x), y))
                flat[i] = origin - h
                down = float(cross_entropy(module(x), y))
                flat[i] = origin
            fd = (up - down) / (2.0 * h)
            rel = abs(fd - grad) / max(abs(fd), abs(grad), 1e-8)
            assert rel <= 1e-3, f"param sample rel error {rel:.2e}"


def test_criterion_05_optimizer_oracle(announce):
    line = ("criterion 5: momentum update matches the hand-iterated recurrence "
            "over 10 steps to 1e-12")
    with verdict(announce, line):
        # two hand-derived steps: lr 0.1, momentum 0.9, gradient 1, no decay
        w1, v1 = sgd_update(1.0, 1.0, 0.0, 0.1, 0.9, 0.0)
        assert (w1, v1) == (0.9, 1.0)
        w2, v2 = sgd_update(w1, 1.0, v1, 0.1, 0.9, 0.0)
        assert abs(w2 - 0.71) <= 1e-12 and v2 == 1.9

        # ten steps against an independent pure-python iteration, with decay
        lr, momentum, decay = 0.07, 0.9, 0.01
        grads = [1.0, -0.5, 0.25, 2.0, -1.0, 0.125, 0.75, -0.3, 0.6, -0.9]
        ew, ev = 1.5, 0.0
        aw, av = 1.5, 0.0
        for g in grads:
            ev = momentum * ev + g + decay * ew
            ew = ew - lr * ev
            aw, av = sgd_update(aw, g, av, lr, momentum, decay)
            assert abs(aw - ew) <= 1e-12 and abs(av - ev) <= 1e-12


def test_criterion_06_sampler_split_stats_invariants(
    plant_store, tmp_path, announce
):
    line = ("criterion 6: balanced sampling exactly uniform; splits partition "
            "80/10/10 per class; normalization standard; dihedral closure")
    with verdict(announce, line):
        manifest = load_manifest(plant_store / "manifest.json")
        ds = ManifestDataset(manifest, plant_store / "store")
        labels = ds.labels("train")
        n_classes = len(manifest.classes)
        for per_class in (4, 16, 40):  # subsample, near-exact, oversample
            idx = balanced_indices(labels, per_class, np.random.default_rng(9))
            counts = np.bincount(labels[idx], minlength=n_classes)
            assert np.array_equal(counts, np.full(n_classes, per_class))

        ids = {s: {e["patch_id"] for e in manifest.splits[s]} for s in manifest.splits}
        assert not ids["train"] & ids["val"]
        assert not ids["train"] & ids["test"]
        assert not ids["val"] & ids["test"]
        totals = {}
        for split, entries in manifest.splits.items():
            for entry in entries:
                by_split = totals.setdefault(entry[manifest.label_field], {})
                by_split[split] = by_split.get(split, 0) + 1
        for name, by_split in totals.items():
            n = sum(by_split.values())
            for split, fraction in (("train", 0.8), ("val", 0.1), ("test", 0.1)):
                assert abs(by_split.get(split, 0) - fraction * n) <= 1.0, \
                    f"{name} {split}: {by_split}"

        # train-scope statistics standardize the training pixels
        build_dataset(plant_store / "store", tmp_path / "m.json", stats_scope="train")
        tman = load_manifest(tmp_path / "m.json")
        tds = ManifestDataset(tman, plant_store / "store")
        total = np.zeros(10)
        total_sq = np.zeros(10)
        n_px = 0
        for entry in tds.entries("train"):
            cube = normalize(tds.load_cube(entry), tman.norm_stats).astype(np.float64)
            total += cube.sum(axis=(1, 2))
            total_sq += (cube ** 2).sum(axis=(1, 2))
            n_px += cube.shape[1] * cube.shape[2]
        mean = total / n_px
        std = np.sqrt(total_sq / n_px - mean ** 2)
        assert np.all(np.abs(mean) <= 1e-4)
        assert np.all(np.abs(std - 1.0) <= 1e-4)

        # all 64 pairwise compositions land back in the 8-element group
        probe = np.arange(2 * 5 * 5, dtype=np.float32).reshape(2, 5, 5)
        for a in range(8):
            for b in range(8):
                sequential = apply_transform(apply_transform(probe, a), b)
                composed = compose_transforms(a, b)
                assert 0 <= composed < 8
                assert np.array_equal(sequential, apply_transform(probe, composed))


def test_criterion_07_cam_algebra(announce):
    line = ("criterion 7: activation-map mean recovers the logit minus head "
            "bias (50 random triples, 1e-4); heatmaps normalized")
    with verdict(announce, line):
        rng = np.random.default_rng(77)
        checked = 0
        for init_seed in range(5):
            num_classes = int(rng.integers(3, 12))
            params = build_model(tiny_spec(num_classes), init_seed=init_seed)
            bias = head_bias(params)
            for _ in range(10):
                cube = rng.normal(0.0, 1.0, size=(10, 100, 100)).astype(np.float32)
                class_index = int(rng.integers(num_classes))
                res = compute_cam(params, cube, class_index)
                logit = predict_logits(params, cube[None])[0, class_index]
                assert abs(res.raw_map.mean() - (logit - bias[class_index])) <= 1e-4
                assert res.heatmap.min() >= 0.0 and res.heatmap.max() <= 1.0
                if not res.constant:
                    assert res.heatmap.max() == 1.0
                checked += 1
        assert checked == 50


def test_criterion_08_evaluation_protocol(plant_store, announce):
    line = ("criterion 8: a perfect predictor yields the exact identity "
            "confusion; a random one stays within 3-sigma of chance")
    with verdict(announce, line):
        manifest = load_manifest(plant_store / "manifest.json")
        ds = ManifestDataset(manifest, plant_store / "store", cache=True)
        n_classes = len(manifest.classes)

        table = {}
        for entry in ds.entries("test"):
            cube = normalize(ds.load_cube(entry), manifest.norm_stats)
            label = manifest.class_index(entry[manifest.label_field])
            table[cube.astype(np.float32).tobytes()] = label

        def perfect(x):
            return np.eye(n_classes)[[table[row.tobytes()] for row in x]]

        report = evaluate_predictor(perfect, ds, split="test", n_draws=10, seed=3)
        assert np.array_equal(report.mean_confusion, 100.0 * np.eye(n_classes))
        assert np.all(report.std_confusion == 0.0)
        assert np.allclose(report.mean_confusion.sum(axis=1), 100.0, atol=1e-6)

        per_class = 16
        random_report = evaluate_predictor(
            uniform_random_predictor(n_classes, seed=5), ds,
            split="train", n_draws=10, per_class=per_class, seed=3,
        )
        assert np.allclose(random_report.mean_confusion.sum(axis=1), 100.0, atol=1e-6)
        p = 1.0 / n_classes
        sigma = 100.0 * math.sqrt(p * (1.0 - p) / (10 * per_class))
        deviation = np.abs(random_report.per_class_accuracy - 100.0 * p)
        assert np.all(deviation <= 3.0 * sigma), f"max deviation {deviation.max():.2f}"


def test_criterion_09_pipeline_determinism(scene_corpus, tmp_path, announce):
    line = ("criterion 9: two identical pipeline runs agree byte for byte "
            "(timestamps live only in run manifests)")
    with verdict(announce, line):
        lines = (scene_corpus / "catalog.csv").read_text(encoding="utf-8").splitlines()
        catalog = tmp_path / "catalog.csv"
        catalog.write_text("\n".join(lines[:3]) + "\n", encoding="utf-8")
        config = tmp_path / "config.json"
        config.write_text(
            json.dumps({
                "per_class": 8, "batch_size": 8, "learning_rate": 0.02,
                "plateau_patience": 10, "early_stop_patience": None,
            }),
            encoding="utf-8",
        )

        def chain(root):
            store, ds, run, rep = (root / n for n in ("store", "ds", "run", "rep"))
            assert cli_main([
                "ingest", str(catalog), str(scene_corpus / "rasters"),
                "--out", str(store), "--seed", "3",
            ]) == 0
            assert cli_main([
                "build", str(store), "--out", str(ds), "--split-seed", "1",
            ]) == 0
            manifest = ds / "dataset_manifest.json"
            assert cli_main([
                "train", str(manifest), "--store", str(store), "--out", str(run),
                "--arch", "tiny", "--epochs", "3", "--seed", "0",
                "--config", str(config),
            ]) == 0
            assert cli_main([
                "evaluate", str(run / "checkpoint_best.npz"), str(manifest),
                "--store", str(store), "--out", str(rep),
                "--n-draws", "3", "--seed", "5",
            ]) == 0
            return store, ds, run, rep

        store_a, ds_a, run_a, rep_a = chain(tmp_path / "a")
        store_b, ds_b, run_b, rep_b = chain(tmp_path / "b")

        assert tree_digest(store_a) == tree_digest(store_b)
        assert (ds_a / "dataset_manifest.json").read_bytes() == \
            (ds_b / "dataset_manifest.json").read_bytes()

        def log_rows(path):
            # per-epoch wall time is the log's only nondeterministic field
            return [
                {k: v for k, v in json.loads(line).items() if k != "wall_time_s"}
                for line in path.read_text(encoding="utf-8").splitlines()
            ]

        assert log_rows(run_a / "train_log.jsonl") == log_rows(run_b / "train_log.jsonl")
        assert (run_a / "checkpoint_best.npz").read_bytes() == \
            (run_b / "checkpoint_best.npz").read_bytes()
        assert (rep_a / "report.json").read_bytes() == (rep_b / "report.json").read_bytes()
        assert (rep_a / "confusion.csv").read_bytes() == \
            (rep_b / "confusion.csv").read_bytes()


def test_criterion_10_ingestion_geometry(announce):
    line = ("criterion 10: crop centers within 10 m of requests (100 draws); "
            "background centers honor the exclusion radius (10,000 draws)")
    with verdict(announce, line):
        # independent frame oracle: equirectangular tangent plane, 10 m grid
        meters_per_degree = 111_320.0
        lat0, lon0 = 48.0, 11.0
        cos0 = math.cos(math.radians(lat0))
        crs = local_crs(lat0, lon0)
        gt = GeoTransform(-1800.0, 10.0, 0.0, 1800.0, 0.0, -10.0)
        shape = (360, 360)
        raster = RasterSource(
            raster_id="geometry",
            acquisition_date=dt.date(2020, 1, 1),
            bands={
                name: Band(np.ones(shape, dtype=np.float32), 10.0)
                for name in BAND_ORDER
            },
            geotransform=gt,
            crs=crs,
            cloud_cover=0.0,
        )

        rng = np.random.default_rng(123)
        for _ in range(100):
            x = float(rng.uniform(-1290.0, 1290.0))
            y = float(rng.uniform(-1290.0, 1290.0))
            lat = lat0 + y / meters_per_degree
            lon = lon0 + x / (meters_per_degree * cos0)
            patch = crop_patch(raster, (lat, lon))
            assert patch.data.shape == (10, 100, 100)
            pgt = patch.geotransform
            center_x = pgt.x0 + 50 * pgt.dx + 50 * pgt.rx
            center_y = pgt.y0 + 50 * pgt.ry + 50 * pgt.dy
            assert math.hypot(center_x - x, center_y - y) <= 10.0

        exclusions_xy = [(0.0, 0.0), (600.0, -500.0), (-900.0, 800.0)]
        exclusions = [
            (lat0 + ey / meters_per_degree, lon0 + ex / (meters_per_degree * cos0))
            for ex, ey in exclusions_xy
        ]
        offsets = itertools.islice(
            background_offsets(shape, gt, crs, exclusions, rng_seed=7, exclusion_m=500.0),
            10_000,
        )
        for row_off, col_off in offsets:
            center_x = gt.x0 + (col_off + 50) * gt.dx
            center_y = gt.y0 + (row_off + 50) * gt.dy
            assert all(
                math.hypot(center_x - ex, center_y - ey) >= 500.0
                for ex, ey in exclusions_xy
            )
