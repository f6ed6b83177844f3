"""Geostationary fixed-grid navigation, raster downsampling and AoI cropping.

The fixed-grid equations follow the GOES-R ABI navigation model: a ray from the
satellite at scan angles (x, y) is intersected with the Earth ellipsoid.
Scan angles are in radians, geodetic coordinates in degrees.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    MissingProjection,
    NonDivisible,
    NotVisible,
    OffDisk,
    OutOfBounds,
)


class CRS(str, enum.Enum):
    FIXED_GRID = "FixedGrid"
    GEODETIC = "Geodetic"


@dataclass(frozen=True)
class FixedGridProjection:
    """Geostationary CRS parameters; defaults are the GOES-East constants."""

    satellite_height_m: float = 35_786_023.0
    semi_major_m: float = 6_378_137.0
    semi_minor_m: float = 6_356_752.31414
    lon_origin_deg: float = -75.0

    def __post_init__(self):
        if not self.satellite_height_m > 0:
            raise ValueError("satellite_height_m must be positive")
        if not self.semi_major_m >= self.semi_minor_m > 0:
            raise ValueError("need semi_major_m >= semi_minor_m > 0")
        if not -180.0 <= self.lon_origin_deg <= 180.0:
            raise ValueError("lon_origin_deg outside [-180, 180]")

    @property
    def orbit_radius_m(self) -> float:
        # distance from the Earth's centre to the satellite
        return self.satellite_height_m + self.semi_major_m

    @property
    def axis_ratio_sq(self) -> float:
        return (self.semi_major_m / self.semi_minor_m) ** 2


GOES_EAST = FixedGridProjection()


@dataclass(frozen=True)
class LatLon:
    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        if not -90.0 <= self.lat_deg <= 90.0:
            raise ValueError(f"latitude {self.lat_deg} outside [-90, 90]")
        if not -180.0 <= self.lon_deg <= 180.0:
            raise ValueError(f"longitude {self.lon_deg} outside [-180, 180]")


def _wrap_lon(lon):
    return (np.asarray(lon) + 180.0) % 360.0 - 180.0


def intersection_discriminant(proj: FixedGridProjection, scan_x, scan_y):
    """Discriminant of the ray/ellipsoid quadratic; negative means the ray misses."""
    a, b, c = _quadratic(proj, np.asarray(scan_x, float), np.asarray(scan_y, float))
    return b * b - 4.0 * a * c


def _quadratic(proj, x, y):
    cx, sx, cy, sy = np.cos(x), np.sin(x), np.cos(y), np.sin(y)
    H = proj.orbit_radius_m
    a = sx**2 + cx**2 * (cy**2 + proj.axis_ratio_sq * sy**2)
    b = -2.0 * H * cx * cy
    c = H**2 - proj.semi_major_m**2
    return a, b, c


def fixed_grid_to_latlon_array(proj: FixedGridProjection, scan_x, scan_y):
    """Vectorised navigation. Off-disk pixels come back as NaN."""
    x = np.asarray(scan_x, float)
    y = np.asarray(scan_y, float)
    a, b, c = _quadratic(proj, x, y)
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid="ignore"):
        rs = (-b - np.sqrt(disc)) / (2.0 * a)
    H = proj.orbit_radius_m
    s_x = rs * np.cos(x) * np.cos(y)
    s_y = -rs * np.sin(x)
    s_z = rs * np.cos(x) * np.sin(y)
    lat = np.degrees(np.arctan(proj.axis_ratio_sq * s_z / np.hypot(H - s_x, s_y)))
    lon = _wrap_lon(proj.lon_origin_deg - np.degrees(np.arctan(s_y / (H - s_x))))
    off = disc < 0
    lat = np.where(off, np.nan, lat)
    lon = np.where(off, np.nan, lon)
    return lat, lon


def fixed_grid_to_latlon(proj: FixedGridProjection, scan_x: float, scan_y: float) -> LatLon:
    if intersection_discriminant(proj, scan_x, scan_y) < 0:
        raise OffDisk(f"scan angles ({scan_x}, {scan_y}) miss the Earth")
    lat, lon = fixed_grid_to_latlon_array(proj, scan_x, scan_y)
    return LatLon(float(lat), float(lon))


def latlon_to_fixed_grid_array(proj: FixedGridProjection, lat_deg, lon_deg):
    """Vectorised forward navigation; returns (x, y, visible)."""
    phi = np.radians(np.asarray(lat_deg, float))
    dlam = np.radians(np.asarray(lon_deg, float) - proj.lon_origin_deg)
    req, rpol = proj.semi_major_m, proj.semi_minor_m
    H = proj.orbit_radius_m
    e2 = (req**2 - rpol**2) / req**2
    phi_c = np.arctan((rpol**2 / req**2) * np.tan(phi))
    rc = rpol / np.sqrt(1.0 - e2 * np.cos(phi_c) ** 2)
    s_x = H - rc * np.cos(phi_c) * np.cos(dlam)
    s_y = -rc * np.cos(phi_c) * np.sin(dlam)
    s_z = rc * np.sin(phi_c)
    visible = H * (H - s_x) >= s_y**2 + proj.axis_ratio_sq * s_z**2
    y = np.arctan(s_z / s_x)
    x = np.arcsin(-s_y / np.sqrt(s_x**2 + s_y**2 + s_z**2))
    return x, y, visible


def latlon_to_fixed_grid(proj: FixedGridProjection, p: LatLon) -> tuple[float, float]:
    x, y, visible = latlon_to_fixed_grid_array(proj, p.lat_deg, p.lon_deg)
    if not bool(visible):
        raise NotVisible(f"({p.lat_deg}, {p.lon_deg}) is not visible from {proj.lon_origin_deg} deg")
    return float(x), float(y)


@dataclass
class GeoGrid:
    """A georeferenced raster.

    ``origin_x/origin_y`` locate the centre of pixel (row 0, col 0); column ``j``
    of row ``i`` sits at ``(origin_x + j*step_x, origin_y + i*step_y)``. Units are
    radians for ``CRS.FIXED_GRID`` and degrees (x = lon, y = lat) for ``CRS.GEODETIC``.
    """

    values: np.ndarray
    crs: CRS
    origin_x: float
    origin_y: float
    step_x: float
    step_y: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.crs = CRS(self.crs)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"values must be a non-empty 2-D raster, got shape {self.values.shape}")
        if self.step_x == 0 or self.step_y == 0:
            raise ValueError("pixel steps must be non-zero")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def same_geometry(self, other: "GeoGrid") -> bool:
        return (
            self.values.shape == other.values.shape
            and self.crs == other.crs
            and self.origin_x == other.origin_x
            and self.origin_y == other.origin_y
            and self.step_x == other.step_x
            and self.step_y == other.step_y
        )

    def with_values(self, values: np.ndarray) -> "GeoGrid":
        return replace(self, values=values, meta=dict(self.meta))

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) coordinate arrays of shape (height, width)."""
        xs = self.origin_x + self.step_x * np.arange(self.width)
        ys = self.origin_y + self.step_y * np.arange(self.height)
        return np.meshgrid(xs, ys)


def downsample_grid(g: GeoGrid, factor: int) -> GeoGrid:
    """Block-mean reduction by an integer factor in both directions."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if g.height % factor or g.width % factor:
        raise NonDivisible(f"{g.height}x{g.width} grid is not divisible by {factor}")
    if factor == 1:
        return g.with_values(g.values.copy())
    h, w = g.height // factor, g.width // factor
    blocks = g.values.astype(np.float64).reshape(h, factor, w, factor)
    out = blocks.mean(axis=(1, 3))
    shift = (factor - 1) / 2.0
    return replace(
        g,
        values=out,
        origin_x=g.origin_x + shift * g.step_x,
        origin_y=g.origin_y + shift * g.step_y,
        step_x=g.step_x * factor,
        step_y=g.step_y * factor,
        meta=dict(g.meta),
    )


def nearest_pixel(g: GeoGrid, center: LatLon, proj: FixedGridProjection | None = None) -> tuple[int, int]:
    """(row, col) of the pixel whose centre is nearest to ``center``; may lie outside the grid."""
    if g.crs is CRS.FIXED_GRID:
        if proj is None:
            raise MissingProjection("a FixedGrid raster needs a projection to locate a lat/lon point")
        cx, cy = latlon_to_fixed_grid(proj, center)
    else:
        cx, cy = center.lon_deg, center.lat_deg
    col = math.floor((cx - g.origin_x) / g.step_x + 0.5)
    row = math.floor((cy - g.origin_y) / g.step_y + 0.5)
    return row, col


def aoi_window(g: GeoGrid, center: LatLon, size_pixels: int, proj: FixedGridProjection | None = None):
    """Row/column slices of the AoI window; the centre pixel lands at index size//2."""
    if size_pixels < 1:
        raise ValueError("size_pixels must be positive")
    row, col = nearest_pixel(g, center, proj)
    half = size_pixels // 2
    r0, c0 = row - half, col - half
    r1, c1 = r0 + size_pixels, c0 + size_pixels
    if r0 < 0 or c0 < 0 or r1 > g.height or c1 > g.width:
        raise OutOfBounds(
            f"{size_pixels}px window around pixel ({row}, {col}) exceeds the {g.height}x{g.width} grid"
        )
    return slice(r0, r1), slice(c0, c1)


def crop_aoi(g: GeoGrid, center: LatLon, size_pixels: int, proj: FixedGridProjection | None = None) -> GeoGrid:
    rows, cols = aoi_window(g, center, size_pixels, proj)
    return replace(
        g,
        values=g.values[rows, cols].copy(),
        origin_x=g.origin_x + cols.start * g.step_x,
        origin_y=g.origin_y + rows.start * g.step_y,
        meta=dict(g.meta),
    )


def local_km(lat_deg, lon_deg, ref: LatLon):
    """Equirectangular east/north offsets (km) from ``ref``; adequate at AoI scale."""
    north = (np.asarray(lat_deg) - ref.lat_deg) * 110.574
    east = _wrap_lon(np.asarray(lon_deg) - ref.lon_deg) * 111.320 * math.cos(math.radians(ref.lat_deg))
    return east, north


def pixel_footprint_km(proj: FixedGridProjection, step_rad: float) -> float:
    """Ground size of one scan-angle step at the sub-satellite point."""
    return proj.satellite_height_m * step_rad / 1000.0
