"""Synthetic fixtures: learnable 10-band patches, scene corpora, catalogs.

The generator produces patches that a linear classifier can separate from
spectra alone, so the training stack can be exercised end to end without
real imagery. Recipe per class:

* every patch starts from a fixed base spectrum plus three noise terms
  (global brightness offset, per-band jitter, smooth spatial fields),
* each non-background class adds its own spectral delta (a scaled row of
  a seeded orthonormal matrix, so deltas are mutually orthogonal and
  equally strong) inside a class-specific geometric motif (disc, ring,
  slab, frame, ...) covering a minority of the patch,
* background patches get no delta and no motif.

The delta is strictly additive and confined to the motif support, so
pixels outside the motif are identically distributed for every class.
That gives activation maps a ground truth on the fixture: all class
evidence lives inside the planted motif, and a faithful map concentrates
there.

Two fixture scales are provided: :func:`write_synthetic_store` writes
ready-made patch containers, and :func:`write_scene_corpus` writes a full
ingest corpus (site catalog + multiband rasters with sidecars) so the
pipeline can be driven from raw scenes.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .catalog import THERMAL_CLASSES, CoolingClass, PlantClass
from .geo import GeoTransform, local_crs, projected_to_lonlat
from .patches import BACKGROUND_CLASS, PATCH_SIZE, Patch, write_patch
from .rasters import write_raster_files

# floor high enough that noise plus motif deltas never drive reflectance to
# the 0 clip, which would distort the class-agnostic background distribution
BASE_SPECTRUM = np.array(
    [0.25, 0.27, 0.26, 0.28, 0.31, 0.34, 0.36, 0.37, 0.33, 0.29],
    dtype=np.float64,
)


def _orthonormal_rows(n: int, seed: int) -> np.ndarray:
    """First n rows of a seeded random 10x10 orthogonal matrix.

    Each row is flipped to a nonnegative band mean, so every class delta
    brightens its motif on average. Darkening motifs are only visible to a
    ReLU network as missing background activation, which makes activation
    maps highlight everything but the motif; brightening ones produce the
    positive local evidence the map tests rely on. Sign flips keep the
    rows orthonormal.
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    rows = q.T[:n]
    signs = np.where(rows.mean(axis=1) >= 0.0, 1.0, -1.0)
    return rows * signs[:, None]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic domain (class list + signal strengths)."""

    name: str
    class_names: tuple[str, ...]
    delta_seed: int
    delta_scale: float
    background_index: int | None = None
    noise_brightness: float = 0.008
    noise_band: float = 0.003
    noise_spatial: float = 0.02

    @classmethod
    def plants(cls, delta_scale: float = 0.35, delta_seed: int = 20200501):
        """Background plus the ten plant classes."""
        names = (BACKGROUND_CLASS,) + tuple(c.value for c in PlantClass)
        return cls("plants", names, delta_seed, delta_scale, background_index=0)

    @classmethod
    def cooling(cls, delta_scale: float = 0.22, delta_seed: int = 20200502):
        """The four cooling mechanism classes (no background)."""
        names = tuple(c.value for c in CoolingClass)
        return cls("cooling", names, delta_seed, delta_scale, background_index=None)

    def delta(self, class_index: int) -> np.ndarray:
        """Spectral delta for one class (zero for the background class)."""
        row = self.motif_index(class_index)
        if row is None:
            return np.zeros(10)
        n_signal = len(self.class_names) - (self.background_index is not None)
        rows = _orthonormal_rows(n_signal, self.delta_seed)
        return self.delta_scale * rows[row]

    def motif_index(self, class_index: int) -> int | None:
        if class_index == self.background_index:
            return None
        offset = sum(
            1 for i in range(class_index) if i == self.background_index
        )
        return class_index - offset


def _grids(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _motif_disc(rng, size):
    """Filled disc with concentric amplitude ripples.

    A flat disc carries no interior gradients, so convolutional features
    end up keying on its rim and the activation map drifts outside the
    shape. The ripple keeps the interior textured (weights 0.5..1.5,
    mean close to 1) without changing the footprint.
    """
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    r = 20.0 * rng.uniform(0.85, 1.15)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ripple = 1.0 + 0.5 * np.cos(2.0 * np.pi * d / 7.0)
    return np.where(d <= r, ripple, 0.0)


def _motif_ring(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    u = rng.uniform(0.85, 1.15)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return ((13.0 * u) ** 2 <= d2) & (d2 <= (24.0 * u) ** 2)


def _motif_twin(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    u = rng.uniform(0.85, 1.15)
    r2 = (13.0 * u) ** 2
    a = (yy - cy + 14) ** 2 + (xx - cx + 14) ** 2 <= r2
    b = (yy - cy - 14) ** 2 + (xx - cx - 14) ** 2 <= r2
    return a | b


def _motif_slab(rng, size):
    """Solid vertical slab. Strokes thinner than ~11 px dissolve at the
    13x13 activation-map resolution, so every shape here stays chunky."""
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    u = rng.uniform(0.85, 1.15)
    return (np.abs(yy - cy) <= 28 * u) & (np.abs(xx - cx) <= 10 * u)


def _motif_square(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    u = rng.uniform(0.85, 1.15)
    return (np.abs(yy - cy) <= 17 * u) & (np.abs(xx - cx) <= 17 * u)


def _motif_cross(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    a = (np.abs(yy - cy) <= 6) & (np.abs(xx - cx) <= 30)
    b = (np.abs(xx - cx) <= 6) & (np.abs(yy - cy) <= 30)
    return a | b


def _motif_frame(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    u = rng.uniform(0.85, 1.15)
    outer = (np.abs(yy - cy) <= 23 * u) & (np.abs(xx - cx) <= 23 * u)
    inner = (np.abs(yy - cy) <= 11 * u) & (np.abs(xx - cx) <= 11 * u)
    return outer & ~inner


def _motif_diamond(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    return np.abs(yy - cy) + np.abs(xx - cx) <= 26.0 * rng.uniform(0.85, 1.15)


def _motif_checker(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    a = (np.abs(yy - cy + 12) <= 10) & (np.abs(xx - cx + 12) <= 10)
    b = (np.abs(yy - cy - 12) <= 10) & (np.abs(xx - cx - 12) <= 10)
    c = (np.abs(yy - cy + 12) <= 10) & (np.abs(xx - cx - 12) <= 10)
    return a | b | c


def _motif_stripes(rng, size):
    yy, xx = _grids(size)
    cy, cx = _jitter_center(rng, size)
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= 26.0 ** 2
    stripes = ((yy + xx) // 6).astype(int) % 2 == 0
    return disc & stripes


def _jitter_center(rng, size):
    cy = size / 2 + rng.integers(-8, 9)
    cx = size / 2 + rng.integers(-8, 9)
    return float(cy), float(cx)


MOTIF_RECIPES = (
    _motif_disc, _motif_ring, _motif_twin, _motif_slab, _motif_square,
    _motif_cross, _motif_frame, _motif_diamond, _motif_checker, _motif_stripes,
)


def generate_patch(
    spec: SyntheticSpec,
    class_name: str,
    rng: np.random.Generator,
    size: int = PATCH_SIZE,
    with_mask: bool = False,
):
    """Draw one synthetic reflectance cube for a class.

    Returns the (10, size, size) float32 cube, or (cube, motif mask) when
    ``with_mask`` is set. Deterministic given the generator state.
    """
    idx = spec.class_names.index(class_name)
    brightness = rng.normal(0.0, spec.noise_brightness)
    jitter = rng.normal(0.0, spec.noise_band, size=10)
    shared = gaussian_filter(rng.standard_normal((size, size)), 3.0)
    own = gaussian_filter(rng.standard_normal((10, size, size)), (0.0, 3.0, 3.0))
    field = spec.noise_spatial * (0.6 * shared[None, :, :] + 0.4 * own)

    cube = BASE_SPECTRUM[:, None, None] + brightness + jitter[:, None, None] + field

    motif = spec.motif_index(idx)
    if motif is None:
        mask = np.zeros((size, size), dtype=bool)
    else:
        weight = MOTIF_RECIPES[motif % len(MOTIF_RECIPES)](rng, size)
        weight = weight.astype(np.float64)
        mask = weight > 0
        # strictly additive: pixels outside the motif are identically
        # distributed for every class, so the motif support is the only
        # class evidence and localization has a ground truth
        cube += spec.delta(idx)[:, None, None] * weight[None, :, :]

    np.clip(cube, 0.0, None, out=cube)
    cube = cube.astype(np.float32)
    return (cube, mask) if with_mask else cube


_THERMAL_NAMES = tuple(sorted(c.value for c in THERMAL_CLASSES))
_COOLING_NAMES = tuple(c.value for c in CoolingClass)


def _store_patch(spec, class_name, index, cube, images_per_site) -> Patch:
    gt = GeoTransform(-500.0, 10.0, 0.0, 500.0, 0.0, -10.0)
    if spec.name == "cooling":
        plant = _THERMAL_NAMES[index % len(_THERMAL_NAMES)]
        cooling = class_name
    else:
        plant = class_name
        cooling = None
        if class_name in _THERMAL_NAMES:
            cooling = _COOLING_NAMES[index % len(_COOLING_NAMES)]
    group = f"{class_name}_s{index // images_per_site:04d}"
    return Patch(
        patch_id=f"{class_name}_{index:04d}",
        data=cube,
        site_id="background" if class_name == BACKGROUND_CLASS else group,
        group_id=group,
        plant_class=plant,
        cooling_class=cooling,
        raster_id=f"synthraster_{index % 7}",
        acquisition_date=dt.date(2020, 1, 1) + dt.timedelta(days=(index * 37) % 365),
        center_latitude=48.0,
        center_longitude=11.0,
        crs=local_crs(48.0, 11.0),
        geotransform=gt,
    )


def write_synthetic_store(
    root: str | Path,
    spec: SyntheticSpec,
    per_class: int,
    seed: int,
    size: int = PATCH_SIZE,
    images_per_site: int = 1,
) -> list[Path]:
    """Write per_class patch containers for every class of a spec.

    With ``images_per_site`` > 1, consecutive patches of a class share a
    site id, which exercises grouped splitting.
    """
    root = Path(root)
    paths = []
    for class_idx, class_name in enumerate(spec.class_names):
        rng = np.random.default_rng([seed, class_idx])
        for i in range(per_class):
            cube = generate_patch(spec, class_name, rng, size)
            patch = _store_patch(spec, class_name, i, cube, images_per_site)
            paths.append(write_patch(root, patch))
    return paths


def sample_store(
    spec: SyntheticSpec, per_class: int, seed: int, size: int = PATCH_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """In-memory draw: stacked cubes (N,10,size,size) and integer labels."""
    cubes, labels = [], []
    for class_idx, class_name in enumerate(spec.class_names):
        rng = np.random.default_rng([seed, class_idx])
        for _ in range(per_class):
            cubes.append(generate_patch(spec, class_name, rng, size))
            labels.append(class_idx)
    return np.stack(cubes), np.array(labels)


# --- scene corpus -----------------------------------------------------------

SCENE_BANDS_10M = ("B02", "B03", "B04", "B08")
SCENE_BANDS_20M = ("B05", "B06", "B07", "B8A", "B11", "B12")
SCENE_BANDS_60M = ("B01", "B09", "B10")
_SCENE_BAND_INDEX = {
    "B02": 0, "B03": 1, "B04": 2, "B05": 3, "B06": 4,
    "B07": 5, "B08": 6, "B8A": 7, "B11": 8, "B12": 9,
}


def _block_mean(grid: np.ndarray, factor: int) -> np.ndarray:
    r, c = grid.shape
    return grid.reshape(r // factor, factor, c // factor, factor).mean(axis=(1, 3))


def _scene_reflectance(spec, class_name, rng, scene_px, site_rc):
    """Full-scene 10-band reflectance with the class motif at site_rc."""
    brightness = rng.normal(0.0, spec.noise_brightness)
    jitter = rng.normal(0.0, spec.noise_band, size=10)
    shared = gaussian_filter(rng.standard_normal((scene_px, scene_px)), 6.0)
    own = gaussian_filter(
        rng.standard_normal((10, scene_px, scene_px)), (0.0, 6.0, 6.0)
    )
    cube = (
        BASE_SPECTRUM[:, None, None]
        + brightness
        + jitter[:, None, None]
        + spec.noise_spatial * (0.6 * shared[None, :, :] + 0.4 * own)
    )
    idx = spec.class_names.index(class_name)
    motif = spec.motif_index(idx)
    if motif is not None:
        local = MOTIF_RECIPES[motif % len(MOTIF_RECIPES)](rng, PATCH_SIZE)
        local = local.astype(np.float64)
        r0 = site_rc[0] - PATCH_SIZE // 2
        c0 = site_rc[1] - PATCH_SIZE // 2
        window = cube[:, r0:r0 + PATCH_SIZE, c0:c0 + PATCH_SIZE]
        window += spec.delta(idx)[:, None, None] * local[None, :, :]
    np.clip(cube, 0.0, None, out=cube)
    return cube


def _reflectance_to_dn(refl: np.ndarray) -> np.ndarray:
    dn = np.rint(refl * 10_000.0)
    return np.clip(dn, 1, 65535).astype(np.uint16)


def write_scene_corpus(
    root: str | Path,
    sites_per_class: int = 2,
    rasters_per_site: int = 6,
    scene_px: int = 360,
    seed: int = 11,
    cloudy_rasters_per_site: int = 1,
    class_names: tuple[str, ...] | None = None,
) -> Path:
    """Write a raw-ingest corpus: catalog.csv plus one raster tile per site.

    Each site sits near the center of its own small scene; the last
    ``cloudy_rasters_per_site`` acquisitions of every site get heavy cloud
    cover so selection filtering has something to drop. Returns the corpus
    root. Layout::

        root/catalog.csv
        root/rasters/<raster_id>.json + <raster_id>/<band>.npy
    """
    root = Path(root)
    raster_dir = root / "rasters"
    raster_dir.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec.plants()
    if class_names is None:
        class_names = tuple(c.value for c in PlantClass)

    rows = []
    thermal_count = 0
    site_rc = (scene_px // 2, scene_px // 2)
    for t, class_name in enumerate(
        cn for cn in class_names for _ in range(sites_per_class)
    ):
        lat0 = 40.0 + 0.5 * t
        lon0 = 8.0
        crs = local_crs(lat0, lon0)
        gt = GeoTransform(
            -scene_px / 2 * 10.0, 10.0, 0.0, scene_px / 2 * 10.0, 0.0, -10.0
        )
        # place the site ~6 m off the exact grid center to exercise snapping
        lat, lon = projected_to_lonlat(crs, 4.0, -4.5)
        site_id = f"SITE{t:02d}"
        cooling = ""
        if class_name in _THERMAL_NAMES:
            cooling = _COOLING_NAMES[thermal_count % len(_COOLING_NAMES)]
            thermal_count += 1
        rows.append([site_id, f"{lat:.6f}", f"{lon:.6f}", class_name, cooling])

        for j in range(rasters_per_site):
            rng = np.random.default_rng([seed, t, j])
            refl = _scene_reflectance(spec, class_name, rng, scene_px, site_rc)
            bands_dn: dict[str, tuple[np.ndarray, float]] = {}
            for name in SCENE_BANDS_10M:
                bands_dn[name] = (_reflectance_to_dn(refl[_SCENE_BAND_INDEX[name]]), 10.0)
            for name in SCENE_BANDS_20M:
                native = _block_mean(refl[_SCENE_BAND_INDEX[name]], 2)
                bands_dn[name] = (_reflectance_to_dn(native), 20.0)
            for name in SCENE_BANDS_60M:
                flat = np.full((scene_px // 6, scene_px // 6), 0.05 + 0.01 * j)
                bands_dn[name] = (_reflectance_to_dn(flat), 60.0)
            cloudy = j >= rasters_per_site - cloudy_rasters_per_site
            write_raster_files(
                raster_dir,
                raster_id=f"T{t:02d}_R{j}",
                acquisition_date=dt.date(2020, 2 * j + 1, 15),
                cloud_cover=0.55 if cloudy else 0.02 + 0.01 * j,
                crs=crs,
                geotransform=gt,
                bands_dn=bands_dn,
            )

    catalog_path = root / "catalog.csv"
    with catalog_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "latitude", "longitude", "plant_class", "cooling_class"])
        writer.writerows(rows)
    return root


# --- full-scale demonstration catalog ---------------------------------------

REFERENCE_CLASS_COUNTS = {
    PlantClass.BROWN_COAL: 50,
    PlantClass.GAS: 50,
    PlantClass.HARD_COAL: 50,
    PlantClass.OIL: 30,
    PlantClass.HYDRO_PUMPED_STORAGE: 50,
    PlantClass.HYDRO_RUN_OF_RIVER: 50,
    PlantClass.HYDRO_RESERVOIR: 50,
    PlantClass.NUCLEAR: 50,
    PlantClass.SOLAR: 20,
    PlantClass.WIND_ONSHORE: 50,
}
REFERENCE_COOLING_COUNTS = {
    CoolingClass.AIR_COOLING: 29,
    CoolingClass.MECHANICAL_DRAFT_TOWER: 22,
    CoolingClass.NATURAL_DRAFT_TOWER: 84,
    CoolingClass.ONCE_THROUGH: 90,
}


def write_reference_catalog(path: str | Path, seed: int = 7) -> Path:
    """Write a 450-site demonstration catalog with a realistic class mix.

    Thermal sites receive cooling labels in fixed blocks (29 air cooling,
    22 mechanical draft, 84 natural draft, 90 once-through); the last 5
    thermal sites carry no cooling label. Coordinates are synthetic,
    spread over Europe.
    """
    rng = np.random.default_rng(seed)
    cooling_seq: list[str] = []
    for cooling, count in REFERENCE_COOLING_COUNTS.items():
        cooling_seq.extend([cooling.value] * count)
    cooling_seq.extend([""] * 5)

    rows = []
    thermal_i = 0
    k = 0
    for plant, count in REFERENCE_CLASS_COUNTS.items():
        for _ in range(count):
            lat = float(36.0 + 24.0 * rng.random())
            lon = float(-10.0 + 40.0 * rng.random())
            cooling = ""
            if plant in THERMAL_CLASSES:
                cooling = cooling_seq[thermal_i]
                thermal_i += 1
            rows.append([f"REF{k:03d}", f"{lat:.6f}", f"{lon:.6f}", plant.value, cooling])
            k += 1

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "latitude", "longitude", "plant_class", "cooling_class"])
        writer.writerows(rows)
    return path
