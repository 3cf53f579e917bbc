"""Raster sources and the providers that supply them.

A raster is a set of band grids (uint16 digital numbers on disk, converted
to float32 reflectance = DN / 10000 at load; DN 0 marks no-data and becomes
NaN) plus georeferencing and acquisition metadata.

Two providers implement the same duck-typed interface (``query`` returning
candidate summaries, ``load`` returning a full :class:`RasterSource`):

* :class:`LocalRasterProvider` scans a directory of ``<raster_id>.json``
  metadata sidecars with band files alongside. Read-only, safe for
  concurrent queries.
* :class:`HttpRasterProvider` speaks a small JSON catalog protocol against
  a remote endpoint. One shared ``httpx.Client``; safe for concurrent use.

Directory layout for the local provider::

    root/
      S2_0001.json            # metadata sidecar
      S2_0001/B02.npy ...     # one uint16 .npy per band
"""

from __future__ import annotations

import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ProviderError
from .geo import GeoTransform, lonlat_to_projected
from .resample import upsample_band

log = logging.getLogger(__name__)

ALL_BANDS = (
    "B01", "B02", "B03", "B04", "B05", "B06", "B07",
    "B08", "B8A", "B09", "B10", "B11", "B12",
)
VALID_RESOLUTIONS = (10.0, 20.0, 60.0)
REFLECTANCE_SCALE = 10_000.0
NODATA_DN = 0


@dataclass
class Band:
    """One spectral band: reflectance grid plus its native resolution."""

    data: np.ndarray  # 2-D float32 reflectance, NaN = no-data
    resolution: float  # m / pixel

    def __post_init__(self):
        if self.resolution not in VALID_RESOLUTIONS:
            raise ValueError(f"band resolution {self.resolution} not in {VALID_RESOLUTIONS}")
        if self.data.ndim != 2 or self.data.size == 0:
            raise ValueError("band grid must be a nonempty 2-D array")


@dataclass
class RasterSource:
    """A multiband acquisition with georeference and metadata."""

    raster_id: str
    acquisition_date: dt.date
    bands: dict[str, Band]
    geotransform: GeoTransform  # of the 10 m grid
    crs: str
    cloud_cover: float

    def __post_init__(self):
        if not 0.0 <= self.cloud_cover <= 1.0:
            raise ValueError(f"cloud_cover {self.cloud_cover} outside [0, 1]")

    @property
    def shape_10m(self) -> tuple[int, int]:
        """Scene extent in 10 m pixels (largest band grid scaled up)."""
        best = max(
            self.bands.values(),
            key=lambda b: b.data.shape[0] * 10.0 / b.resolution,
        )
        scale = int(best.resolution / 10.0)
        return best.data.shape[0] * scale, best.data.shape[1] * scale


@dataclass(frozen=True)
class RasterSummary:
    """Catalog entry: enough metadata to rank a raster without loading pixels."""

    raster_id: str
    acquisition_date: dt.date
    cloud_cover: float
    crs: str
    geotransform: tuple[float, ...]
    shape_10m: tuple[int, int]


@dataclass
class RasterSelection:
    """Result of raster selection for one site."""

    rasters: list[RasterSource]
    requested: int
    shortfall: bool = field(init=False)

    def __post_init__(self):
        self.shortfall = len(self.rasters) < self.requested


def dn_to_reflectance(dn: np.ndarray) -> np.ndarray:
    """Digital numbers to surface reflectance; DN 0 becomes NaN (no-data)."""
    out = dn.astype(np.float32) / REFLECTANCE_SCALE
    out[dn == NODATA_DN] = np.nan
    return out


def _summary_covers(summary: RasterSummary, lat: float, lon: float) -> bool:
    x, y = lonlat_to_projected(summary.crs, lat, lon)
    gt = GeoTransform.from_tuple(summary.geotransform)
    row, col = gt.projected_to_pixel(x, y)
    rows, cols = summary.shape_10m
    return 0.0 <= row < rows and 0.0 <= col < cols


def _parse_metadata(raster_id: str, meta: dict) -> RasterSummary:
    try:
        return RasterSummary(
            raster_id=raster_id,
            acquisition_date=dt.date.fromisoformat(meta["acquisition_date"]),
            cloud_cover=float(meta["cloud_cover"]),
            crs=str(meta["crs"]),
            geotransform=tuple(float(c) for c in meta["geotransform"]),
            shape_10m=(int(meta["shape"][0]), int(meta["shape"][1])),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ProviderError(f"invalid raster metadata for {raster_id!r}: {exc}") from exc


class LocalRasterProvider:
    """Serves rasters from a directory of metadata sidecars + .npy bands."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ProviderError(f"raster directory not found: {self.root}")

    def query(
        self, lat: float, lon: float, start: dt.date, end: dt.date
    ) -> list[RasterSummary]:
        out = []
        for sidecar in sorted(self.root.glob("*.json")):
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
            summary = _parse_metadata(sidecar.stem, meta)
            if not start <= summary.acquisition_date <= end:
                continue
            if _summary_covers(summary, lat, lon):
                out.append(summary)
        return out

    def load(self, raster_id: str) -> RasterSource:
        sidecar = self.root / f"{raster_id}.json"
        if not sidecar.is_file():
            raise ProviderError(f"raster not found: {raster_id!r} under {self.root}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        summary = _parse_metadata(raster_id, meta)
        bands = {}
        for name, entry in meta["bands"].items():
            path = self.root / entry["file"]
            if not path.is_file():
                raise ProviderError(f"band file missing: {path}")
            dn = np.load(path)
            bands[name] = Band(dn_to_reflectance(dn), float(entry["resolution"]))
        return RasterSource(
            raster_id=raster_id,
            acquisition_date=summary.acquisition_date,
            bands=bands,
            geotransform=GeoTransform.from_tuple(summary.geotransform),
            crs=summary.crs,
            cloud_cover=summary.cloud_cover,
        )


class HttpRasterProvider:
    """Queries a remote catalog endpoint.

    Protocol: ``GET {base}/catalog?lat&lon&start&end`` returns a JSON list of
    metadata objects (same schema as the local sidecars, plus ``raster_id``);
    ``GET {base}/rasters/{id}`` returns one metadata object; band files are
    fetched from ``GET {base}/rasters/{id}/bands/{band}.npy``.
    """

    def __init__(self, base_url: str, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=30.0)

    def _get(self, path: str, **params):
        import httpx

        try:
            resp = self._client.get(f"{self.base_url}{path}", params=params or None)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ProviderError(f"provider request failed: {path}: {exc}") from exc
        return resp

    def query(
        self, lat: float, lon: float, start: dt.date, end: dt.date
    ) -> list[RasterSummary]:
        resp = self._get(
            "/catalog", lat=lat, lon=lon, start=start.isoformat(), end=end.isoformat()
        )
        return [_parse_metadata(item["raster_id"], item) for item in resp.json()]

    def load(self, raster_id: str) -> RasterSource:
        meta = self._get(f"/rasters/{raster_id}").json()
        summary = _parse_metadata(raster_id, meta)
        bands = {}
        for name, entry in meta["bands"].items():
            resp = self._get(f"/rasters/{raster_id}/bands/{name}.npy")
            dn = np.load(io.BytesIO(resp.content))
            bands[name] = Band(dn_to_reflectance(dn), float(entry["resolution"]))
        return RasterSource(
            raster_id=raster_id,
            acquisition_date=summary.acquisition_date,
            bands=bands,
            geotransform=GeoTransform.from_tuple(summary.geotransform),
            crs=summary.crs,
            cloud_cover=summary.cloud_cover,
        )


def write_raster_files(
    root: str | Path,
    raster_id: str,
    acquisition_date: dt.date,
    cloud_cover: float,
    crs: str,
    geotransform: GeoTransform,
    bands_dn: dict[str, tuple[np.ndarray, float]],
) -> Path:
    """Write one raster (uint16 DN bands + metadata sidecar) for the local provider."""
    root = Path(root)
    band_dir = root / raster_id
    band_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    shape_10m = None
    for name, (dn, res) in bands_dn.items():
        np.save(band_dir / f"{name}.npy", dn.astype(np.uint16))
        entries[name] = {"file": f"{raster_id}/{name}.npy", "resolution": res}
        if res == 10.0:
            shape_10m = list(dn.shape)
    if shape_10m is None:
        first = next(iter(bands_dn.values()))
        scale = int(first[1] / 10.0)
        shape_10m = [first[0].shape[0] * scale, first[0].shape[1] * scale]
    meta = {
        "acquisition_date": acquisition_date.isoformat(),
        "cloud_cover": cloud_cover,
        "crs": crs,
        "geotransform": list(geotransform.as_tuple()),
        "shape": shape_10m,
        "bands": entries,
    }
    sidecar = root / f"{raster_id}.json"
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return sidecar


def spread_dates(candidates: list[RasterSummary], n: int) -> list[RasterSummary]:
    """Pick n candidates greedily maximizing acquisition-date spread.

    Starts from the earliest and latest dates, then repeatedly adds the
    candidate farthest (in days) from everything already selected; ties go
    to the earlier date. Returns the selection sorted by date.
    """
    pool = sorted(candidates, key=lambda s: (s.acquisition_date, s.raster_id))
    if len(pool) <= n:
        return pool
    if n == 1:
        return [pool[0]]

    selected = [pool[0], pool[-1]]
    remaining = pool[1:-1]
    while len(selected) < n:
        best_idx = 0
        best_gap = -1
        for i, cand in enumerate(remaining):
            gap = min(
                abs((cand.acquisition_date - s.acquisition_date).days) for s in selected
            )
            if gap > best_gap:
                best_gap = gap
                best_idx = i
        selected.append(remaining.pop(best_idx))
    return sorted(selected, key=lambda s: s.acquisition_date)


def fetch_rasters(
    site,
    provider,
    year: int = 2020,
    max_cloud: float = 0.10,
    n: int = 10,
) -> RasterSelection:
    """Select up to n mostly-cloud-free rasters covering a site within a year.

    Candidates above the cloud threshold are dropped, the rest thinned by
    :func:`spread_dates` to cover the year evenly. Returns whatever exists
    and flags a shortfall rather than failing when fewer than n qualify.
    """
    start = dt.date(year, 1, 1)
    end = dt.date(year, 12, 31)
    summaries = provider.query(site.latitude, site.longitude, start, end)
    eligible = [s for s in summaries if s.cloud_cover <= max_cloud]
    chosen = spread_dates(eligible, n)
    if len(chosen) < n:
        log.warning(
            "site %s: only %d/%d rasters pass cloud<=%.2f",
            site.site_id, len(chosen), n, max_cloud,
        )
    rasters = [provider.load(s.raster_id) for s in chosen]
    return RasterSelection(rasters=rasters, requested=n)
