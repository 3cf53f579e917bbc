"""Command-line entry point tying the pipeline stages together.

Subcommands::

    powersat ingest CATALOG [SOURCE] --out STORE   # rasters -> patch store
    powersat build STORE --out DIR                 # store -> dataset manifest
    powersat train MANIFEST --store S --out DIR    # manifest -> checkpoint
    powersat evaluate CKPT MANIFEST --store S --out DIR
    powersat cam CKPT PATCH_OR_DIR --manifest M --out DIR
    powersat synth-fixtures --out DIR              # generate test fixtures

Exit codes: 0 success; 2 usage or input error; 3 raster-provider error;
4 numerical failure (non-finite loss). Every run writes a
``run_manifest.json`` into its output directory recording the command,
configuration, seeds, paths, version, timestamps, and exit status — the
only artifact that carries wall-clock state, so identical invocations
reproduce every other artifact byte for byte.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .errors import (
    CatalogError,
    ConfigError,
    CropError,
    MissingBandError,
    NonFiniteLossError,
    PatchFormatError,
    PowersatError,
    ProviderError,
    SamplingError,
    SpecMismatchError,
)

PROG = "powersat"
ENV_PROVIDER_URL = "POWERSAT_PROVIDER_URL"
RUN_MANIFEST_NAME = "run_manifest.json"
DATASET_MANIFEST_NAME = "dataset_manifest.json"
REPORT_NAME = "report.json"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PROVIDER = 3
EXIT_NUMERIC = 4

_INPUT_ERRORS = (
    CatalogError,
    ConfigError,
    CropError,
    MissingBandError,
    PatchFormatError,
    SamplingError,
    SpecMismatchError,
    FileNotFoundError,
    NotADirectoryError,
)

_TASK_NAMES = {"plant": "plant_11", "cooling": "cooling_4"}

log = logging.getLogger(__name__)


@dataclass
class RunManifest:
    """Record of one CLI run, written into the output directory."""

    command: str
    config: dict
    seeds: dict
    inputs: list[str]
    outputs: list[str]
    version: str
    started: str
    finished: str
    exit_status: int


def write_run_manifest(out_dir: str | Path, manifest: RunManifest) -> Path:
    """Atomically write the run manifest (write-then-rename)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_MANIFEST_NAME
    tmp = out_dir / f".{RUN_MANIFEST_NAME}.tmp"
    tmp.write_text(json.dumps(asdict(manifest), indent=2), encoding="utf-8")
    os.replace(tmp, path)
    return path


def _utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _config_snapshot(args: argparse.Namespace) -> dict:
    skip = {"func", "input_attrs"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, tuple):
            value = list(value)
        if value is None or isinstance(value, (str, int, float, bool, list)):
            out[key] = value
    return out


def _collect_inputs(args: argparse.Namespace) -> list[str]:
    paths = []
    for attr in getattr(args, "input_attrs", ()):
        value = getattr(args, attr, None)
        if value:
            paths.append(str(value))
    return paths


def _set_jobs(args: argparse.Namespace):
    jobs = getattr(args, "jobs", None)
    if jobs:
        import torch

        torch.set_num_threads(jobs)


def _task_name(value: str) -> str:
    return _TASK_NAMES.get(value, value)


# --- subcommand implementations ---------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> list[str]:
    from .catalog import load_catalog
    from .ingest import ingest_sites
    from .rasters import HttpRasterProvider, LocalRasterProvider

    source = args.source or os.environ.get(ENV_PROVIDER_URL)
    if not source:
        raise ConfigError(
            f"no raster source: pass SOURCE or set {ENV_PROVIDER_URL}"
        )
    if source.startswith(("http://", "https://")):
        provider = HttpRasterProvider(source)
    else:
        provider = LocalRasterProvider(source)

    records = load_catalog(args.catalog)
    summary = ingest_sites(
        records,
        provider,
        args.out,
        year=args.year,
        max_cloud=args.max_cloud,
        n_rasters=args.n_rasters,
        background_per_raster=args.background_per_raster,
        seed=args.seed,
    )
    print(
        f"ingested {summary.sites} sites / {summary.rasters} rasters: "
        f"{summary.site_patches} site + {summary.background_patches} background "
        f"patches written, {summary.skipped_existing} already stored"
    )
    for note in summary.shortfalls:
        print(f"shortfall: {note}")
    for note in summary.failures:
        print(f"failed: {note}")
    return [str(args.out)]


def cmd_build(args: argparse.Namespace) -> list[str]:
    from .dataset import build_dataset

    label_field = "cooling_class" if _task_name(args.task) == "cooling_4" else "plant_class"
    manifest_path = Path(args.out) / DATASET_MANIFEST_NAME
    manifest = build_dataset(
        args.store,
        manifest_path,
        label_field=label_field,
        seed=args.split_seed,
        group_by=args.granularity,
        stats_scope=args.stats_scope,
    )
    sizes = ", ".join(f"{s}={len(manifest.splits[s])}" for s in manifest.splits)
    print(f"dataset manifest: {manifest_path} ({len(manifest.classes)} classes; {sizes})")
    return [str(manifest_path)]


def cmd_train(args: argparse.Namespace) -> list[str]:
    from .dataset import load_manifest
    from .model import tiny_spec
    from .training import LOG_NAME, TrainConfig, train

    task = _task_name(args.task) if args.task else None
    if task == "cooling_4" and not args.pretrained and not (
        args.config and "pretrained" in json.loads(Path(args.config).read_text(encoding="utf-8"))
    ):
        log.warning("cooling task without --pretrained: training from scratch")

    overrides = {
        "task": task,
        "pretrained": args.pretrained,
        "init_seed": args.seed,
        "sampler_seed": args.seed,
        "epochs": args.epochs,
    }
    if args.config:
        config = TrainConfig.from_json(args.config, overrides)
    else:
        config = TrainConfig.from_dict(
            {k: v for k, v in overrides.items() if v is not None}
        )

    manifest = load_manifest(args.manifest)
    spec = tiny_spec(len(manifest.classes)) if args.arch == "tiny" else None
    state, ckpt_path = train(manifest, config, args.store, args.out, spec=spec)
    print(
        f"trained {config.task} for {state.epoch} epochs: best val accuracy "
        f"{state.best_val_accuracy:.3f} at epoch {state.best_epoch} -> {ckpt_path}"
    )
    return [str(ckpt_path), str(Path(args.out) / LOG_NAME)]


def cmd_evaluate(args: argparse.Namespace) -> list[str]:
    from .dataset import load_manifest
    from .evaluation import accuracy_summary, evaluate, render_confusion, save_report
    from .model import load_checkpoint

    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(
        params,
        manifest,
        args.store,
        split=args.split,
        n_draws=args.n_draws,
        per_class=args.per_class,
        seed=args.seed,
    )
    report_path = save_report(report, Path(args.out) / REPORT_NAME)
    png_path, csv_path = render_confusion(report, args.out)
    print(accuracy_summary(report))
    return [str(report_path), str(png_path), str(csv_path)]


def cmd_cam(args: argparse.Namespace) -> list[str]:
    from .dataset import load_manifest
    from .explain import explain_patch
    from .model import load_checkpoint
    from .patches import PATCH_SUFFIX, list_patches, read_patch

    params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if params.spec.num_classes != len(manifest.classes):
        raise ConfigError(
            f"checkpoint has {params.spec.num_classes} classes, manifest has "
            f"{len(manifest.classes)}"
        )

    target = Path(args.patches)
    if target.is_dir():
        paths = list_patches(target)
        if not paths:
            raise ConfigError(f"no {PATCH_SUFFIX} files under {target}")
    elif target.is_file():
        paths = [target]
    else:
        raise ConfigError(f"patch path not found: {target}")

    class_index = None
    if args.target_class is not None:
        try:
            class_index = int(args.target_class)
        except ValueError:
            try:
                class_index = manifest.class_index(args.target_class)
            except ValueError:
                raise ConfigError(
                    f"unknown class {args.target_class!r}; "
                    f"expected an index or one of {manifest.classes}"
                ) from None

    outputs = []
    for path in paths:
        patch = read_patch(path)
        record = explain_patch(
            params,
            patch,
            manifest.norm_stats,
            args.out,
            class_index=class_index,
            class_names=manifest.classes,
            alpha=args.alpha,
        )
        outputs.extend(str(Path(args.out) / f) for f in record["files"].values())
        outputs.append(str(Path(args.out) / f"{patch.patch_id}_cam.json"))
    print(f"wrote CAM visuals for {len(paths)} patch(es) to {args.out}")
    return outputs


def cmd_synth_fixtures(args: argparse.Namespace) -> list[str]:
    from .synthetic import SyntheticSpec, write_scene_corpus, write_synthetic_store

    if args.kind == "scenes":
        root = write_scene_corpus(
            args.out,
            sites_per_class=args.sites_per_class,
            rasters_per_site=args.rasters_per_site,
            scene_px=args.scene_px,
            seed=args.seed,
        )
        print(f"scene corpus at {root}")
        return [str(root)]

    if _task_name(args.task) == "cooling_4":
        spec = SyntheticSpec.cooling()
    else:
        spec = SyntheticSpec.plants()
    paths = write_synthetic_store(
        args.out, spec, args.per_class, args.seed,
        images_per_site=args.images_per_site,
    )
    print(f"wrote {len(paths)} synthetic patches ({spec.name}) to {args.out}")
    return [str(args.out)]


# --- parser ------------------------------------------------------------------


def _add_jobs(p: argparse.ArgumentParser):
    p.add_argument("--jobs", type=int, default=None, metavar="N",
                   help="cap compute worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Power plant classification pipeline over 10-band satellite patches.",
    )
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest", help="build a patch store from a catalog and rasters")
    p.add_argument("catalog", help="site catalog CSV")
    p.add_argument("source", nargs="?", default=None,
                   help=f"raster directory or http(s) endpoint (default: ${ENV_PROVIDER_URL})")
    p.add_argument("--out", required=True, help="patch store directory")
    p.add_argument("--max-cloud", type=float, default=0.10, metavar="FRAC",
                   help="maximum metadata cloud fraction (default 0.10)")
    p.add_argument("--n-rasters", type=int, default=10, metavar="N",
                   help="rasters per site (default 10)")
    p.add_argument("--background-per-raster", type=int, default=4, metavar="N",
                   help="background patches per raster (default 4)")
    p.add_argument("--year", type=int, default=2020)
    p.add_argument("--seed", type=int, default=0, help="background sampling seed")
    _add_jobs(p)
    p.set_defaults(func=cmd_ingest, input_attrs=("catalog", "source"))

    p = sub.add_parser("build", help="split a patch store and write a dataset manifest")
    p.add_argument("store", help="patch store directory")
    p.add_argument("--out", required=True, help="output directory for the manifest")
    p.add_argument("--task", choices=("plant", "cooling"), default="plant",
                   help="label set: plant types or cooling mechanisms")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--granularity", choices=("image", "site"), default="image",
                   help="split unit (default image)")
    p.add_argument("--stats-scope", choices=("all", "train"), default="all",
                   help="which images feed normalization statistics")
    _add_jobs(p)
    p.set_defaults(func=cmd_build, input_attrs=("store",))

    p = sub.add_parser("train", help="train a classifier from a dataset manifest")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--store", required=True, help="patch store directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=("plant", "cooling"), default=None,
                   help="training task (default from config file, else plant)")
    p.add_argument("--config", default=None, help="JSON training config file")
    p.add_argument("--pretrained", default=None, metavar="CKPT",
                   help="checkpoint to transfer the backbone from")
    p.add_argument("--arch", choices=("full", "tiny"), default="full",
                   help="architecture size (tiny fits CPU-scale fixtures)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="sets both init and sampler seeds")
    _add_jobs(p)
    p.set_defaults(func=cmd_train, input_attrs=("manifest", "store", "config", "pretrained"))

    p = sub.add_parser("evaluate", help="confusion-matrix report over balanced draws")
    p.add_argument("checkpoint", help="model checkpoint (.npz)")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--store", required=True, help="patch store directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--n-draws", type=int, default=10, metavar="N",
                   help="balanced evaluation draws (default 10)")
    p.add_argument("--per-class", type=int, default=None, metavar="N",
                   help="images per class per draw (default: smallest class)")
    p.add_argument("--seed", type=int, default=0)
    _add_jobs(p)
    p.set_defaults(func=cmd_evaluate, input_attrs=("checkpoint", "manifest", "store"))

    p = sub.add_parser("cam", help="class activation map overlays for patches")
    p.add_argument("checkpoint", help="model checkpoint (.npz)")
    p.add_argument("patches", help="a .patch file or a directory of them")
    p.add_argument("--manifest", required=True,
                   help="dataset manifest (normalization stats + class names)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--class", dest="target_class", default=None, metavar="NAME_OR_INDEX",
                   help="class to explain (default: predicted class)")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    _add_jobs(p)
    p.set_defaults(func=cmd_cam, input_attrs=("checkpoint", "patches", "manifest"))

    p = sub.add_parser("synth-fixtures", help="generate synthetic patch or scene fixtures")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=("patches", "scenes"), default="patches")
    p.add_argument("--task", choices=("plant", "cooling"), default="plant")
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--images-per-site", type=int, default=1)
    p.add_argument("--sites-per-class", type=int, default=2)
    p.add_argument("--rasters-per-site", type=int, default=6)
    p.add_argument("--scene-px", type=int, default=360)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_fixtures, input_attrs=())

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    started = _utc_now()

    outputs: list[str] = []
    status = EXIT_OK
    try:
        _set_jobs(args)
        outputs = args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    except ProviderError as exc:
        print(f"{PROG}: provider error: {exc}", file=sys.stderr)
        status = EXIT_PROVIDER
    except NonFiniteLossError as exc:
        print(f"{PROG}: numerical failure: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    except PowersatError as exc:  # anything else from the pipeline
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        status = EXIT_USAGE

    out_dir = getattr(args, "out", None)
    if out_dir:
        manifest = RunManifest(
            command=args.command,
            config=_config_snapshot(args),
            seeds={k: v for k, v in _config_snapshot(args).items() if "seed" in k},
            inputs=_collect_inputs(args),
            outputs=outputs,
            version=__version__,
            started=started,
            finished=_utc_now(),
            exit_status=status,
        )
        write_run_manifest(out_dir, manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
