"""Patch extraction and the on-disk patch container.

A patch is a 10-band, 100x100 pixel (1 km at 10 m/px) reflectance cube
centered on a site or a sampled background location. Band order is fixed::

    B02 B03 B04 B05 B06 B07 B08 B8A B11 B12

20 m bands are upsampled 2x with bilinear interpolation on a native window
just large enough to reproduce the full-scene upsampling exactly, so
cropping commutes with upsampling.

Container format (``.patch`` file + ``.json`` sidecar): 8-byte magic
``PLNTPATC``, three little-endian uint32 (channels, rows, cols), then
row-major float32 pixel data channel by channel. The sidecar carries the
label, georeference, and a sha256 of the container bytes. Integer labels
follow CLASS_LABELS (background first, then the ten plant classes).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .catalog import PlantClass
from .errors import CropError, MissingBandError, PatchFormatError, SamplingError
from .geo import (
    GeoTransform,
    lonlat_to_projected,
    projected_distance,
    projected_to_lonlat,
)
from .rasters import RasterSource
from .resample import resize_bilinear

log = logging.getLogger(__name__)

BAND_ORDER = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")
PATCH_SIZE = 100
PIXEL_SIZE_M = 10.0
BACKGROUND_CLASS = "Background"
CLASS_LABELS = (BACKGROUND_CLASS,) + tuple(c.value for c in PlantClass)
PATCH_MAGIC = b"PLNTPATC"
PATCH_SUFFIX = ".patch"


@dataclass
class Patch:
    """One extracted training image with its labels and georeference."""

    patch_id: str
    data: np.ndarray  # (channels, rows, cols) float32 reflectance
    site_id: str  # catalog site id, or "background"
    group_id: str  # sampling-unit key; backgrounds use "background/<raster_id>"
    plant_class: str  # a plant class name or BACKGROUND_CLASS
    cooling_class: str | None
    raster_id: str
    acquisition_date: dt.date
    center_latitude: float
    center_longitude: float
    crs: str
    geotransform: GeoTransform

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"patch data must be 3-D, got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ValueError(f"patch data must be float32, got {self.data.dtype}")
        if self.plant_class not in CLASS_LABELS:
            raise ValueError(f"unknown plant class {self.plant_class!r}")

    @property
    def label(self) -> int:
        return CLASS_LABELS.index(self.plant_class)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def select_bands(raster: RasterSource) -> list[np.ndarray]:
    """The ten required band grids in fixed channel order.

    Atmospheric bands (B01, B09, B10) are never part of the result.
    Raises :class:`MissingBandError` naming any absent band.
    """
    missing = [name for name in BAND_ORDER if name not in raster.bands]
    if missing:
        raise MissingBandError(
            f"raster {raster.raster_id!r} lacks bands: {', '.join(missing)}"
        )
    return [raster.bands[name].data for name in BAND_ORDER]


def _native_window(scale: int, off: int, size: int, native_len: int):
    """Native-band rows needed so a windowed upsample equals the global one.

    Returns (start, count, local_start): crop ``count`` native rows from
    ``start``, upsample by ``scale``, then read ``size`` rows beginning at
    ``local_start``. The window carries the margin bilinear interpolation
    reaches, and clamps only where the full scene itself would clamp.
    """
    lo = math.floor((off + 0.5) / scale - 0.5)
    hi = math.floor((off + size - 0.5) / scale - 0.5) + 1
    lo = max(lo, 0)
    hi = min(hi, native_len - 1)
    return lo, hi - lo + 1, off - scale * lo


def _crop_band(data: np.ndarray, scale: int, row_off: int, col_off: int, size: int) -> np.ndarray:
    if scale == 1:
        return data[row_off:row_off + size, col_off:col_off + size]
    r_lo, r_n, r_local = _native_window(scale, row_off, size, data.shape[0])
    c_lo, c_n, c_local = _native_window(scale, col_off, size, data.shape[1])
    window = data[r_lo:r_lo + r_n, c_lo:c_lo + c_n]
    up = resize_bilinear(window, r_n * scale, c_n * scale)
    return up[r_local:r_local + size, c_local:c_local + size]


def crop_window(
    raster: RasterSource, row_off: int, col_off: int, size: int = PATCH_SIZE
) -> np.ndarray:
    """Extract a (bands, size, size) cube at a 10 m grid window origin.

    Raises :class:`CropError` when the window leaves the scene or contains
    no-data pixels, and :class:`MissingBandError` when bands are absent.
    """
    select_bands(raster)
    rows, cols = raster.shape_10m
    if not (0 <= row_off and 0 <= col_off and row_off + size <= rows and col_off + size <= cols):
        raise CropError(
            f"window ({row_off}, {col_off})+{size} outside raster "
            f"{raster.raster_id!r} of shape {rows}x{cols}"
        )
    planes = []
    for name in BAND_ORDER:
        band = raster.bands[name]
        scale = int(round(band.resolution / 10.0))
        planes.append(_crop_band(band.data, scale, row_off, col_off, size))
    cube = np.stack(planes).astype(np.float32, copy=False)
    bad = int(np.isnan(cube).sum())
    if bad:
        raise CropError(
            f"window ({row_off}, {col_off}) in raster {raster.raster_id!r} has "
            f"{bad} no-data pixels ({bad / cube.size:.1%} of the window)"
        )
    return cube


def center_offsets(
    geotransform: GeoTransform, crs: str, lat: float, lon: float, size: int = PATCH_SIZE
) -> tuple[int, int]:
    """Snap a geographic center to the 10 m grid window origin.

    The window is centered on the nearest pixel corner, so the snapped
    center is within half a pixel (~7 m diagonally) of the request.
    """
    x, y = lonlat_to_projected(crs, lat, lon)
    p_row, p_col = geotransform.projected_to_pixel(x, y)
    row_off = int(math.floor(p_row + 0.5)) - size // 2
    col_off = int(math.floor(p_col + 0.5)) - size // 2
    return row_off, col_off


def _window_metadata(raster: RasterSource, row_off: int, col_off: int, size: int):
    gt = raster.geotransform.shifted(row_off, col_off)
    cx, cy = raster.geotransform.pixel_to_projected(row_off + size / 2, col_off + size / 2)
    lat, lon = projected_to_lonlat(raster.crs, cx, cy)
    return gt, lat, lon


def _window_patch(
    raster: RasterSource, row_off: int, col_off: int, size: int,
    patch_id: str, site_id: str, group_id: str,
    plant_class: str, cooling_class: str | None,
) -> Patch:
    cube = crop_window(raster, row_off, col_off, size)
    gt, lat, lon = _window_metadata(raster, row_off, col_off, size)
    return Patch(
        patch_id=patch_id,
        data=cube,
        site_id=site_id,
        group_id=group_id,
        plant_class=plant_class,
        cooling_class=cooling_class,
        raster_id=raster.raster_id,
        acquisition_date=raster.acquisition_date,
        center_latitude=lat,
        center_longitude=lon,
        crs=raster.crs,
        geotransform=gt,
    )


def crop_patch(
    raster: RasterSource,
    center: tuple[float, float],
    site=None,
    size: int = PATCH_SIZE,
) -> Patch:
    """Crop the patch whose center snaps nearest to (lat, lon).

    With a catalog ``site``, the patch carries the site's identity and
    labels; without one it is labeled background.
    """
    row_off, col_off = center_offsets(raster.geotransform, raster.crs, center[0], center[1], size)
    if site is not None:
        cooling = site.cooling_class.value if site.cooling_class is not None else None
        return _window_patch(
            raster, row_off, col_off, size,
            patch_id=f"{site.site_id}_{raster.raster_id}",
            site_id=site.site_id, group_id=site.site_id,
            plant_class=site.plant_class.value, cooling_class=cooling,
        )
    return _window_patch(
        raster, row_off, col_off, size,
        patch_id=f"bg_{raster.raster_id}_{row_off}_{col_off}",
        site_id="background", group_id=f"background/{raster.raster_id}",
        plant_class=BACKGROUND_CLASS, cooling_class=None,
    )


def extract_site_patch(raster: RasterSource, site, size: int = PATCH_SIZE) -> Patch:
    """Crop the patch centered on a catalog site."""
    return crop_patch(raster, (site.latitude, site.longitude), site=site, size=size)


def background_offsets(
    shape_10m: tuple[int, int],
    geotransform: GeoTransform,
    crs: str,
    exclusions: Sequence[tuple[float, float]],
    rng_seed,
    exclusion_m: float = 1000.0,
    size: int = PATCH_SIZE,
    max_attempts_per_window: int = 10_000,
) -> Iterator[tuple[int, int]]:
    """Yield window origins whose centers keep clear of excluded points.

    Pure geometry (no pixel access): draws uniform window origins and
    rejects any whose center lies within ``exclusion_m`` of an exclusion
    (lat, lon). Deterministic given the seed; callers take what they need.
    Raises :class:`SamplingError` if a single acceptance ever needs more
    than ``max_attempts_per_window`` draws.
    """
    rows, cols = shape_10m
    if rows < size or cols < size:
        raise SamplingError(f"scene {rows}x{cols} smaller than patch size {size}")
    excluded_xy = [lonlat_to_projected(crs, lat, lon) for lat, lon in exclusions]
    rng = np.random.default_rng(rng_seed)
    attempts = 0
    while True:
        attempts += 1
        if attempts > max_attempts_per_window:
            raise SamplingError(
                f"no background window found in {max_attempts_per_window} attempts"
            )
        row_off = int(rng.integers(0, rows - size + 1))
        col_off = int(rng.integers(0, cols - size + 1))
        center = geotransform.pixel_to_projected(row_off + size / 2, col_off + size / 2)
        if all(projected_distance(center, xy) >= exclusion_m for xy in excluded_xy):
            attempts = 0
            yield row_off, col_off


def _raster_stream_seed(base_seed: int, raster_id: str) -> list[int]:
    digest = hashlib.sha256(raster_id.encode("utf-8")).digest()
    return [base_seed, int.from_bytes(digest[:4], "little")]


def sample_background(
    raster: RasterSource,
    exclusions: Sequence[tuple[float, float]],
    rng_seed: int,
    n: int = 4,
    exclusion_m: float = 1000.0,
    size: int = PATCH_SIZE,
    max_attempts_per_patch: int = 200,
    allow_shortfall: bool = False,
) -> list[Patch]:
    """Draw n background patches from a raster, avoiding excluded points.

    Windows with no-data pixels are rejected and redrawn. When the attempt
    budget runs out, raises :class:`SamplingError` reporting the attempts,
    or logs and returns the partial list if ``allow_shortfall`` is set.
    """
    offsets = background_offsets(
        raster.shape_10m, raster.geotransform, raster.crs, exclusions,
        rng_seed=_raster_stream_seed(rng_seed, raster.raster_id),
        exclusion_m=exclusion_m, size=size,
    )
    patches: list[Patch] = []
    budget = n * max_attempts_per_patch
    attempts = 0
    while len(patches) < n and attempts < budget:
        attempts += 1
        row_off, col_off = next(offsets)
        try:
            patch = _window_patch(
                raster, row_off, col_off, size,
                patch_id=f"bg_{raster.raster_id}_{len(patches):03d}",
                site_id="background", group_id=f"background/{raster.raster_id}",
                plant_class=BACKGROUND_CLASS, cooling_class=None,
            )
        except CropError:
            continue
        patches.append(patch)
    if len(patches) < n:
        message = (
            f"raster {raster.raster_id}: placed {len(patches)}/{n} background "
            f"windows in {attempts} attempts"
        )
        if not allow_shortfall:
            raise SamplingError(message)
        log.warning("%s", message)
    return patches


def _container_bytes(data: np.ndarray) -> bytes:
    c, r, k = data.shape
    header = PATCH_MAGIC + struct.pack("<III", c, r, k)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def patch_digest(patch: Patch) -> str:
    """Sha256 hex digest of the container bytes the patch serializes to."""
    return hashlib.sha256(_container_bytes(patch.data)).hexdigest()


def write_patch(directory: str | Path, patch: Patch) -> Path:
    """Write a patch container and its JSON sidecar; returns the container path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{patch.patch_id}{PATCH_SUFFIX}"
    blob = _container_bytes(patch.data)
    path.write_bytes(blob)
    sidecar = {
        "patch_id": patch.patch_id,
        "site_id": patch.site_id,
        "group_id": patch.group_id,
        "label": patch.label,
        "plant_class": patch.plant_class,
        "cooling_class": patch.cooling_class,
        "raster_id": patch.raster_id,
        "date": patch.acquisition_date.isoformat(),
        "center": [patch.center_latitude, patch.center_longitude],
        "pixel_size": PIXEL_SIZE_M,
        "crs": patch.crs,
        "geotransform": list(patch.geotransform.as_tuple()),
        "bands": list(BAND_ORDER),
        "content_hash": hashlib.sha256(blob).hexdigest(),
    }
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8"
    )
    return path


def read_patch_array(path: str | Path) -> np.ndarray:
    """Read only the pixel cube from a container file."""
    blob = Path(path).read_bytes()
    if blob[:8] != PATCH_MAGIC:
        raise PatchFormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 20:
        raise PatchFormatError(f"{path}: truncated header")
    c, r, k = struct.unpack("<III", blob[8:20])
    expected = 20 + 4 * c * r * k
    if len(blob) != expected:
        raise PatchFormatError(
            f"{path}: size {len(blob)} does not match {c}x{r}x{k} payload ({expected})"
        )
    return np.frombuffer(blob[20:], dtype="<f4").reshape(c, r, k).copy()


def read_patch(path: str | Path, verify_hash: bool = False) -> Patch:
    """Read a container plus sidecar back into a :class:`Patch`."""
    path = Path(path)
    data = read_patch_array(path)
    meta = read_sidecar(path)
    if verify_hash:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if digest != meta.get("content_hash"):
            raise PatchFormatError(f"{path}: content hash mismatch")
    return Patch(
        patch_id=meta["patch_id"],
        data=data,
        site_id=meta["site_id"],
        group_id=meta["group_id"],
        plant_class=meta["plant_class"],
        cooling_class=meta.get("cooling_class"),
        raster_id=meta["raster_id"],
        acquisition_date=dt.date.fromisoformat(meta["date"]),
        center_latitude=float(meta["center"][0]),
        center_longitude=float(meta["center"][1]),
        crs=meta["crs"],
        geotransform=GeoTransform.from_tuple(meta["geotransform"]),
    )


def read_sidecar(path: str | Path) -> dict:
    """Load the sidecar for a container path (metadata only, no pixels)."""
    sidecar_path = Path(path).with_suffix(".json")
    if not sidecar_path.is_file():
        raise PatchFormatError(f"{path}: sidecar {sidecar_path.name} missing")
    return json.loads(sidecar_path.read_text(encoding="utf-8"))


def list_patches(directory: str | Path) -> list[Path]:
    """All container files under a directory, sorted for determinism."""
    return sorted(Path(directory).rglob(f"*{PATCH_SUFFIX}"))
