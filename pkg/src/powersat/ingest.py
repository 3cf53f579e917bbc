"""End-to-end patch-store construction from a site catalog and a provider.

For every catalog site this fetches a year's worth of mostly cloud-free
rasters, crops the site patch from each, and draws random background
patches per distinct raster (centers kept clear of every catalog site).
Writes are content-addressed: a patch whose container bytes already exist
on disk is skipped, so reruns touch nothing and interrupted runs resume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import SiteRecord
from .errors import CropError, MissingBandError, PatchFormatError
from .patches import (
    Patch,
    extract_site_patch,
    patch_digest,
    read_sidecar,
    sample_background,
    write_patch,
)
from .rasters import fetch_rasters

log = logging.getLogger(__name__)

DEFAULT_BACKGROUND_PER_RASTER = 4


@dataclass
class IngestSummary:
    """Counts and notes from one ingest run."""

    sites: int = 0
    rasters: int = 0
    site_patches: int = 0
    background_patches: int = 0
    skipped_existing: int = 0
    shortfalls: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sites": self.sites,
            "rasters": self.rasters,
            "site_patches": self.site_patches,
            "background_patches": self.background_patches,
            "skipped_existing": self.skipped_existing,
            "shortfalls": list(self.shortfalls),
            "failures": list(self.failures),
        }


def store_patch(out_dir: Path, patch: Patch) -> bool:
    """Write a patch unless identical bytes are already stored.

    Returns True when the container was (re)written, False when an existing
    file with the same content hash made the write unnecessary.
    """
    sidecar = out_dir / f"{patch.patch_id}.json"
    if sidecar.is_file():
        try:
            existing = read_sidecar(out_dir / patch.patch_id)
            if existing.get("content_hash") == patch_digest(patch):
                return False
        except (PatchFormatError, ValueError):
            pass  # unreadable sidecar: rewrite below
    write_patch(out_dir, patch)
    return True


def ingest_sites(
    records: list[SiteRecord],
    provider,
    out_dir: str | Path,
    year: int = 2020,
    max_cloud: float = 0.10,
    n_rasters: int = 10,
    background_per_raster: int = DEFAULT_BACKGROUND_PER_RASTER,
    seed: int = 0,
    exclusion_m: float = 1000.0,
) -> IngestSummary:
    """Build (or resume) a patch store for a list of catalog sites.

    Per site: select up to ``n_rasters`` rasters via the provider, crop the
    site patch from each, and sample ``background_per_raster`` background
    patches from every raster not yet sampled this run. Background centers
    stay at least ``exclusion_m`` from every catalog site. Failures on
    individual patches (no-data windows, scene-edge crops, missing bands)
    are recorded and skipped; provider errors propagate.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exclusions = [(r.latitude, r.longitude) for r in records]
    summary = IngestSummary(sites=len(records))
    background_done: set[str] = set()

    for site in records:
        selection = fetch_rasters(
            site, provider, year=year, max_cloud=max_cloud, n=n_rasters
        )
        if selection.shortfall:
            summary.shortfalls.append(
                f"site {site.site_id}: {len(selection.rasters)}/{n_rasters} rasters"
            )
        for raster in selection.rasters:
            summary.rasters += 1
            try:
                patch = extract_site_patch(raster, site)
            except (CropError, MissingBandError) as exc:
                summary.failures.append(
                    f"{site.site_id}/{raster.raster_id}: {exc}"
                )
            else:
                if store_patch(out_dir, patch):
                    summary.site_patches += 1
                else:
                    summary.skipped_existing += 1

            if raster.raster_id in background_done:
                continue
            background_done.add(raster.raster_id)
            backgrounds = sample_background(
                raster,
                exclusions,
                rng_seed=seed,
                n=background_per_raster,
                exclusion_m=exclusion_m,
                allow_shortfall=True,
            )
            if len(backgrounds) < background_per_raster:
                summary.shortfalls.append(
                    f"raster {raster.raster_id}: "
                    f"{len(backgrounds)}/{background_per_raster} backgrounds"
                )
            for patch in backgrounds:
                if store_patch(out_dir, patch):
                    summary.background_patches += 1
                else:
                    summary.skipped_existing += 1
        log.info(
            "site %s: %d rasters, store at %d site + %d background patches",
            site.site_id, len(selection.rasters),
            summary.site_patches, summary.background_patches,
        )
    return summary
