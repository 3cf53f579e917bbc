"""Affine georeferencing and coordinate frames.

Geotransforms follow the GDAL six-coefficient convention
``(x0, dx, rx, y0, ry, dy)``: a pixel's upper-left corner at fractional
pixel coordinates (row, col) maps to projected coordinates

    x = x0 + col * dx + row * rx
    y = y0 + col * ry + row * dy

Two CRS families are supported natively:

* ``LOCAL:<lat0>:<lon0>`` -- an equirectangular metric frame tangent at
  (lat0, lon0). This is the frame all synthetic fixtures are generated in;
  it is defined (not approximated) by the formulas below, so round trips
  are exact.
* ``EPSG:<code>`` -- delegated to pyproj when installed; raises a clear
  error otherwise. Real Sentinel-2 granules (UTM) take this path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

METERS_PER_DEGREE = 111_320.0  # defines the LOCAL frame's scale


@dataclass(frozen=True)
class GeoTransform:
    """GDAL-style affine map between pixel and projected coordinates."""

    x0: float
    dx: float
    rx: float
    y0: float
    ry: float
    dy: float

    def __post_init__(self):
        if self.determinant == 0.0:
            raise ValueError("geotransform is singular (zero pixel size)")

    @property
    def determinant(self) -> float:
        return self.dx * self.dy - self.rx * self.ry

    def pixel_to_projected(self, row: float, col: float) -> tuple[float, float]:
        x = self.x0 + col * self.dx + row * self.rx
        y = self.y0 + col * self.ry + row * self.dy
        return x, y

    def projected_to_pixel(self, x: float, y: float) -> tuple[float, float]:
        u = x - self.x0
        v = y - self.y0
        det = self.determinant
        col = (u * self.dy - v * self.rx) / det
        row = (v * self.dx - u * self.ry) / det
        return row, col

    def scaled(self, factor: float) -> "GeoTransform":
        """Geotransform of the same scene sampled at ``factor``x pixel size."""
        return GeoTransform(
            self.x0, self.dx * factor, self.rx * factor,
            self.y0, self.ry * factor, self.dy * factor,
        )

    def shifted(self, row_off: float, col_off: float) -> "GeoTransform":
        """Geotransform of a window whose origin is at (row_off, col_off)."""
        x0, y0 = self.pixel_to_projected(row_off, col_off)
        return GeoTransform(x0, self.dx, self.rx, y0, self.ry, self.dy)

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.x0, self.dx, self.rx, self.y0, self.ry, self.dy)

    @classmethod
    def from_tuple(cls, coeffs) -> "GeoTransform":
        if len(coeffs) != 6:
            raise ValueError(f"expected 6 affine coefficients, got {len(coeffs)}")
        return cls(*(float(c) for c in coeffs))


def local_crs(lat0: float, lon0: float) -> str:
    return f"LOCAL:{lat0:.6f}:{lon0:.6f}"


def _parse_local(crs: str) -> tuple[float, float]:
    parts = crs.split(":")
    if len(parts) != 3:
        raise ValueError(f"malformed LOCAL crs: {crs!r}")
    return float(parts[1]), float(parts[2])


def lonlat_to_projected(crs: str, lat: float, lon: float) -> tuple[float, float]:
    """Project a WGS84 (lat, lon) into the raster's coordinate frame."""
    if crs.startswith("LOCAL:"):
        lat0, lon0 = _parse_local(crs)
        x = (lon - lon0) * METERS_PER_DEGREE * math.cos(math.radians(lat0))
        y = (lat - lat0) * METERS_PER_DEGREE
        return x, y
    if crs.upper().startswith("EPSG:"):
        return _pyproj_transform(crs, lon, lat, inverse=False)
    raise ValueError(f"unsupported crs: {crs!r}")


def projected_to_lonlat(crs: str, x: float, y: float) -> tuple[float, float]:
    """Inverse of :func:`lonlat_to_projected`; returns (lat, lon)."""
    if crs.startswith("LOCAL:"):
        lat0, lon0 = _parse_local(crs)
        lat = lat0 + y / METERS_PER_DEGREE
        lon = lon0 + x / (METERS_PER_DEGREE * math.cos(math.radians(lat0)))
        return lat, lon
    if crs.upper().startswith("EPSG:"):
        lon, lat = _pyproj_transform(crs, x, y, inverse=True)
        return lat, lon
    raise ValueError(f"unsupported crs: {crs!r}")


def _pyproj_transform(crs: str, a: float, b: float, inverse: bool):
    try:
        from pyproj import Transformer
    except ImportError as exc:
        raise ValueError(
            f"crs {crs!r} requires pyproj; install it or use a LOCAL frame"
        ) from exc
    if inverse:
        t = Transformer.from_crs(crs, "EPSG:4326", always_xy=True)
    else:
        t = Transformer.from_crs("EPSG:4326", crs, always_xy=True)
    return t.transform(a, b)


def projected_distance(p: tuple[float, float], q: tuple[float, float]) -> float:
    """Euclidean distance between two points of a metric projected frame."""
    return math.hypot(p[0] - q[0], p[1] - q[1])
