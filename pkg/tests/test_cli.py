"""Command-line tests driving every pipeline stage in process."""

import hashlib
import json
import logging
import shutil

import pytest

from powersat import __version__
from powersat.cli import DATASET_MANIFEST_NAME, RUN_MANIFEST_NAME, main
from powersat.evaluation import load_report
from powersat.training import CHECKPOINT_NAME, LOG_NAME


def tree_digest(root):
    # the run manifest is the one artifact that carries wall-clock state
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name == RUN_MANIFEST_NAME:
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_manifest(out_dir):
    return json.loads((out_dir / RUN_MANIFEST_NAME).read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def pipeline(scene_corpus, tmp_path_factory):
    """ingest -> build -> train -> evaluate -> cam over two same-class sites."""
    root = tmp_path_factory.mktemp("cli")
    lines = (scene_corpus / "catalog.csv").read_text(encoding="utf-8").splitlines()
    catalog = root / "catalog.csv"
    catalog.write_text("\n".join(lines[:3]) + "\n", encoding="utf-8")

    store = root / "store"
    ingest_argv = [
        "ingest", str(catalog), str(scene_corpus / "rasters"),
        "--out", str(store), "--seed", "3",
    ]
    assert main(ingest_argv) == 0

    dataset = root / "dataset"
    assert main(["build", str(store), "--out", str(dataset), "--split-seed", "1"]) == 0
    manifest = dataset / DATASET_MANIFEST_NAME

    config = root / "train_config.json"
    config.write_text(
        json.dumps({
            "per_class": 8, "batch_size": 8, "learning_rate": 0.02,
            "plateau_patience": 10, "early_stop_patience": None,
        }),
        encoding="utf-8",
    )
    run = root / "run"
    assert main([
        "train", str(manifest), "--store", str(store), "--out", str(run),
        "--arch", "tiny", "--epochs", "3", "--seed", "0", "--config", str(config),
    ]) == 0

    report_dir = root / "eval"
    ckpt = run / CHECKPOINT_NAME
    assert main([
        "evaluate", str(ckpt), str(manifest), "--store", str(store),
        "--out", str(report_dir), "--n-draws", "3", "--seed", "5",
    ]) == 0

    cam_dir = root / "cam"
    patch = sorted(store.glob("SITE00_*.patch"))[0]
    assert main([
        "cam", str(ckpt), str(patch), "--manifest", str(manifest),
        "--out", str(cam_dir), "--alpha", "0.6",
    ]) == 0

    return {
        "root": root, "catalog": catalog, "store": store, "manifest": manifest,
        "config": config, "run": run, "ckpt": ckpt, "report_dir": report_dir,
        "cam_dir": cam_dir, "ingest_argv": ingest_argv, "patch": patch,
        "rasters": scene_corpus / "rasters",
    }


def test_pipeline_artifacts(pipeline):
    assert len(list(pipeline["store"].glob("*.patch"))) == 50
    manifest = json.loads(pipeline["manifest"].read_text(encoding="utf-8"))
    assert manifest["classes"] == ["Background", "BrownCoal"]

    log_lines = pipeline["run"].joinpath(LOG_NAME).read_text().splitlines()
    assert len(log_lines) == 3
    assert pipeline["ckpt"].is_file()

    report = load_report(pipeline["report_dir"] / "report.json")
    assert report.label_map == ["Background", "BrownCoal"]
    assert (pipeline["report_dir"] / "confusion.png").is_file()
    assert (pipeline["report_dir"] / "confusion.csv").is_file()

    stem = pipeline["patch"].stem
    for suffix in ("rgb.png", "cam.png", "overlay.png", "cam.json"):
        assert (pipeline["cam_dir"] / f"{stem}_{suffix}").is_file()


def test_every_stage_writes_a_run_manifest(pipeline):
    for key, command in (
        ("store", "ingest"), ("run", "train"),
        ("report_dir", "evaluate"), ("cam_dir", "cam"),
    ):
        record = run_manifest(pipeline[key])
        assert record["command"] == command
        assert record["exit_status"] == 0
        assert record["version"] == __version__
    build_record = run_manifest(pipeline["manifest"].parent)
    assert build_record["command"] == "build"
    assert build_record["seeds"] == {"split_seed": 1}


def test_train_run_manifest_contents(pipeline):
    record = run_manifest(pipeline["run"])
    assert record["config"]["epochs"] == 3
    assert record["config"]["arch"] == "tiny"
    assert record["seeds"] == {"seed": 0}
    assert str(pipeline["manifest"]) in record["inputs"]
    assert str(pipeline["config"]) in record["inputs"]
    assert record["outputs"] == [
        str(pipeline["ckpt"]), str(pipeline["run"] / LOG_NAME),
    ]
    assert record["started"] <= record["finished"]


def test_ingest_rerun_skips_existing(pipeline, capsys):
    before = tree_digest(pipeline["store"])
    assert main(pipeline["ingest_argv"]) == 0
    assert "50 already stored" in capsys.readouterr().out
    assert tree_digest(pipeline["store"]) == before


def test_ingest_source_from_environment(pipeline, tmp_path, monkeypatch):
    one_site = tmp_path / "one.csv"
    lines = pipeline["catalog"].read_text(encoding="utf-8").splitlines()
    one_site.write_text("\n".join(lines[:2]) + "\n", encoding="utf-8")

    monkeypatch.delenv("POWERSAT_PROVIDER_URL", raising=False)
    assert main(["ingest", str(one_site), "--out", str(tmp_path / "s0")]) == 2

    monkeypatch.setenv("POWERSAT_PROVIDER_URL", str(pipeline["rasters"]))
    assert main([
        "ingest", str(one_site), "--out", str(tmp_path / "s1"),
        "--n-rasters", "1", "--background-per-raster", "1",
    ]) == 0
    assert len(list((tmp_path / "s1").glob("*.patch"))) == 2


def test_ingest_rejects_bad_catalog(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("site_id,latitude,longitude\nX,40.0,8.0\n", encoding="utf-8")
    assert main([
        "ingest", str(bad), str(pipeline["rasters"]), "--out", str(tmp_path / "s"),
    ]) == 2
    assert "plant_class" in capsys.readouterr().err


def test_unreachable_provider_exit_code(pipeline, tmp_path, capsys):
    assert main([
        "ingest", str(pipeline["catalog"]), "http://127.0.0.1:9/none",
        "--out", str(tmp_path / "s"),
    ]) == 3
    assert "provider error" in capsys.readouterr().err


def test_build_empty_store(tmp_path, capsys):
    (tmp_path / "store").mkdir()
    assert main([
        "build", str(tmp_path / "store"), "--out", str(tmp_path / "d"),
    ]) == 2
    assert "no labeled patches" in capsys.readouterr().err


def test_unknown_config_key_is_named(pipeline, tmp_path, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"learning_rat": 0.1}), encoding="utf-8")
    out = tmp_path / "run"
    assert main([
        "train", str(pipeline["manifest"]), "--store", str(pipeline["store"]),
        "--out", str(out), "--arch", "tiny", "--config", str(config),
    ]) == 2
    assert "learning_rat" in capsys.readouterr().err
    assert run_manifest(out)["exit_status"] == 2


def test_divergence_exit_code_and_manifest(pipeline, tmp_path, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(
        json.dumps({"learning_rate": 1e8, "per_class": 8, "batch_size": 8}),
        encoding="utf-8",
    )
    out = tmp_path / "run"
    assert main([
        "train", str(pipeline["manifest"]), "--store", str(pipeline["store"]),
        "--out", str(out), "--arch", "tiny", "--epochs", "2",
        "--seed", "0", "--config", str(config),
    ]) == 4
    assert "numerical failure" in capsys.readouterr().err
    assert run_manifest(out)["exit_status"] == 4


def test_cooling_without_pretrained_warns(cooling_store, tmp_path, caplog):
    config = tmp_path / "cfg.json"
    config.write_text(
        json.dumps({"per_class": 6, "batch_size": 8, "early_stop_patience": None}),
        encoding="utf-8",
    )
    with caplog.at_level(logging.WARNING, logger="powersat.cli"):
        code = main([
            "train", str(cooling_store / "manifest.json"),
            "--store", str(cooling_store / "store"), "--out", str(tmp_path / "run"),
            "--task", "cooling", "--arch", "tiny", "--epochs", "1", "--seed", "0",
            "--config", str(config),
        ])
    assert code == 0
    assert "without --pretrained" in caplog.text


def test_transfer_via_pretrained_flag(pipeline, cooling_store, tmp_path):
    from powersat.model import load_checkpoint

    config = tmp_path / "cfg.json"
    config.write_text(
        json.dumps({"per_class": 6, "batch_size": 8, "early_stop_patience": None}),
        encoding="utf-8",
    )
    out = tmp_path / "run"
    assert main([
        "train", str(cooling_store / "manifest.json"),
        "--store", str(cooling_store / "store"), "--out", str(out),
        "--task", "cooling", "--arch", "tiny", "--epochs", "1", "--seed", "0",
        "--pretrained", str(pipeline["ckpt"]), "--config", str(config),
    ]) == 0
    params = load_checkpoint(out / CHECKPOINT_NAME)
    assert params.metadata["task"] == "cooling_4"
    assert "transferred_from" in params.metadata


def test_cam_directory_with_named_class(pipeline, tmp_path):
    picks = tmp_path / "picks"
    picks.mkdir()
    for path in sorted(pipeline["store"].glob("SITE01_*.patch"))[:2]:
        shutil.copy(path, picks / path.name)
        sidecar = path.with_suffix(".json")
        shutil.copy(sidecar, picks / sidecar.name)

    out = tmp_path / "cam"
    assert main([
        "cam", str(pipeline["ckpt"]), str(picks), "--manifest",
        str(pipeline["manifest"]), "--out", str(out), "--class", "BrownCoal",
    ]) == 0
    records = sorted(out.glob("*_cam.json"))
    assert len(records) == 2
    assert len(list(out.glob("*.png"))) == 6
    for path in records:
        record = json.loads(path.read_text(encoding="utf-8"))
        assert record["class_name"] == "BrownCoal"


def test_cam_rejects_bad_class(pipeline, tmp_path, capsys):
    assert main([
        "cam", str(pipeline["ckpt"]), str(pipeline["patch"]), "--manifest",
        str(pipeline["manifest"]), "--out", str(tmp_path / "a"), "--class", "99",
    ]) == 2
    assert "class index" in capsys.readouterr().err

    assert main([
        "cam", str(pipeline["ckpt"]), str(pipeline["patch"]), "--manifest",
        str(pipeline["manifest"]), "--out", str(tmp_path / "b"),
        "--class", "NoSuchClass",
    ]) == 2
    assert "unknown class" in capsys.readouterr().err


def test_rebuild_is_byte_identical(pipeline, tmp_path):
    again = tmp_path / "dataset"
    assert main([
        "build", str(pipeline["store"]), "--out", str(again), "--split-seed", "1",
    ]) == 0
    assert (again / DATASET_MANIFEST_NAME).read_bytes() == \
        pipeline["manifest"].read_bytes()


def test_synth_fixtures_command(tmp_path, capsys):
    out = tmp_path / "fixtures"
    assert main([
        "synth-fixtures", "--out", str(out), "--task", "cooling",
        "--per-class", "2", "--seed", "9",
    ]) == 0
    assert "wrote 8 synthetic patches (cooling)" in capsys.readouterr().out
    assert len(list(out.glob("*.patch"))) == 8

    scenes = tmp_path / "scenes"
    assert main([
        "synth-fixtures", "--out", str(scenes), "--kind", "scenes",
        "--sites-per-class", "1", "--rasters-per-site", "2",
        "--scene-px", "120", "--seed", "9",
    ]) == 0
    assert (scenes / "catalog.csv").is_file()
    assert any((scenes / "rasters").iterdir())


def test_help_version_and_usage_errors(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--help"])
    assert err.value.code == 0
    assert "COMMAND" in capsys.readouterr().out

    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
    assert __version__ in capsys.readouterr().out

    with pytest.raises(SystemExit) as err:
        main(["train", "--no-such-flag"])
    assert err.value.code == 2

    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
