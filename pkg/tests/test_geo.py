"""Affine geotransform and coordinate frame tests."""

import math

import numpy as np
import pytest

from powersat.geo import (
    METERS_PER_DEGREE,
    GeoTransform,
    local_crs,
    lonlat_to_projected,
    projected_distance,
    projected_to_lonlat,
)

GT = GeoTransform(600000.0, 10.0, 0.0, 5200000.0, 0.0, -10.0)


def test_pixel_to_projected_follows_affine_convention():
    x, y = GT.pixel_to_projected(0.0, 0.0)
    assert (x, y) == (600000.0, 5200000.0)
    x, y = GT.pixel_to_projected(3.0, 7.0)
    assert x == 600000.0 + 7 * 10.0
    assert y == 5200000.0 - 3 * 10.0


def test_projected_to_pixel_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(25):
        row, col = rng.uniform(0, 10980, size=2)
        x, y = GT.pixel_to_projected(row, col)
        r2, c2 = GT.projected_to_pixel(x, y)
        assert abs(r2 - row) < 1e-6
        assert abs(c2 - col) < 1e-6


def test_round_trip_with_rotation_terms():
    gt = GeoTransform(100.0, 9.7, 0.8, -50.0, -0.4, -10.2)
    row, col = 123.25, 456.75
    assert gt.projected_to_pixel(*gt.pixel_to_projected(row, col)) == pytest.approx(
        (row, col), abs=1e-9
    )


def test_singular_transform_rejected():
    with pytest.raises(ValueError):
        GeoTransform(0.0, 0.0, 0.0, 0.0, 0.0, -10.0)


def test_scaled_keeps_origin_and_scales_pixel_size():
    half = GT.scaled(2.0)
    assert half.pixel_to_projected(0.0, 0.0) == GT.pixel_to_projected(0.0, 0.0)
    # pixel (1, 1) of the 20 m grid lands where pixel (2, 2) of the 10 m grid does
    assert half.pixel_to_projected(1.0, 1.0) == GT.pixel_to_projected(2.0, 2.0)


def test_shifted_window_addresses_same_ground():
    win = GT.shifted(40.0, 60.0)
    for row, col in [(0.0, 0.0), (10.5, 3.25)]:
        assert win.pixel_to_projected(row, col) == pytest.approx(
            GT.pixel_to_projected(row + 40.0, col + 60.0), abs=1e-9
        )


def test_tuple_round_trip_and_length_check():
    assert GeoTransform.from_tuple(GT.as_tuple()) == GT
    with pytest.raises(ValueError):
        GeoTransform.from_tuple((1.0, 2.0, 3.0))


def test_local_frame_round_trips_exactly():
    crs = local_crs(48.25, 11.5)
    for lat, lon in [(48.25, 11.5), (48.3, 11.4), (47.9, 12.1)]:
        x, y = lonlat_to_projected(crs, lat, lon)
        lat2, lon2 = projected_to_lonlat(crs, x, y)
        assert abs(lat2 - lat) < 1e-12
        assert abs(lon2 - lon) < 1e-12


def test_local_frame_origin_and_scale():
    crs = local_crs(50.0, 8.0)
    assert lonlat_to_projected(crs, 50.0, 8.0) == (0.0, 0.0)
    # one degree north is exactly the frame's meters-per-degree constant
    _, y = lonlat_to_projected(crs, 51.0, 8.0)
    assert y == pytest.approx(METERS_PER_DEGREE)
    # east-west distances shrink with cos(lat0)
    x, _ = lonlat_to_projected(crs, 50.0, 9.0)
    assert x == pytest.approx(METERS_PER_DEGREE * math.cos(math.radians(50.0)))


def test_unsupported_crs_rejected():
    with pytest.raises(ValueError):
        lonlat_to_projected("UTM32N", 48.0, 11.0)
    with pytest.raises(ValueError):
        projected_to_lonlat("LOCAL:only-one-part", 0.0, 0.0)


def test_epsg_path_needs_pyproj():
    pytest.importorskip("pyproj")
    x, y = lonlat_to_projected("EPSG:32632", 48.0, 11.0)
    lat, lon = projected_to_lonlat("EPSG:32632", x, y)
    assert (lat, lon) == pytest.approx((48.0, 11.0), abs=1e-6)


def test_projected_distance_is_euclidean():
    assert projected_distance((0.0, 0.0), (3.0, 4.0)) == 5.0
    assert projected_distance((1.0, 1.0), (1.0, 1.0)) == 0.0
