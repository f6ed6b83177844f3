"""Deterministic synthetic weather episodes.

Each gateway is visited by advecting Gaussian cloud blobs. A blob's cloud shows
up in the satellite-like channels as soon as it forms; rain (a flat-topped core
inside the cloud) only switches on after ``rain_lag_minutes``. Radar therefore
sees rain as it happens while satellite imagery leads it. Beacon power drops by
``fade_coupling_db`` per unit of rain intensity over the gateway.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidParams
from .geo import CRS, GOES_EAST, FixedGridProjection, GeoGrid, LatLon, fixed_grid_to_latlon_array, latlon_to_fixed_grid, local_km
from .labeling import BeaconSeries

FRAME_S = 300
BEACON_S = 60
DEFAULT_START = 1_609_459_200  # 2021-01-01T00:00:00Z

# Illustrative western-US sites; not the locations of any real network.
DEFAULT_GATEWAYS = [
    LatLon(41.14, -104.82),
    LatLon(43.62, -116.20),
    LatLon(35.08, -106.65),
    LatLon(40.76, -111.89),
    LatLon(45.78, -108.50),
    LatLon(39.53, -119.81),
    LatLon(33.45, -112.07),
]


@dataclass
class Blob:
    gateway_idx: int
    birth_s: float
    x0_km: float  # east offset from the gateway at birth
    y0_km: float  # north offset
    sigma_km: float
    rain_on_s: float
    rain_off_s: float
    intensity: float
    core_km: float  # radius of the flat-top rain core
    ptype: int = 0  # 0 rain, 1 mix, 2 snow

    def alive_until(self, ramp_s: float) -> float:
        return self.rain_off_s + ramp_s


@dataclass
class SceneParams:
    duration_minutes: int = 30 * 1440
    start_timestamp: int = DEFAULT_START
    blobs_per_day: float = 20.0  # per gateway
    cloud_sigma_km: tuple = (10.0, 20.0)
    core_ratio: tuple = (0.5, 1.0)  # rain-core radius / cloud sigma, drawn per blob
    velocity_kmpm: float = 0.5  # advection speed; direction drawn per episode
    rain_intensity: tuple = (5.0, 16.0)
    rain_lag_minutes: float = 60.0
    cloud_growth_minutes: float = 60.0  # opacity rises linearly from birth over this long
    rain_duration_minutes: tuple = (60.0, 150.0)
    ramp_minutes: float = 10.0
    spawn_radius_km: float = 50.0
    fade_coupling_db: float = 1.0
    noise_std_db: float = 0.3
    truth_margin_db: float = 3.0
    beacon_base_db: tuple = (-42.0, -38.0)
    diurnal_amp_db: float = 0.5
    mixed_fraction: float = 0.15
    snow_fraction: float = 0.10
    goes_noise: float = 0.01
    goes_step_rad: float = 0.000056
    goes_fine_factor: int = 4
    radar_step_deg: float = 0.009  # latitude step of the ~1 km mosaic
    radar_fine_factor: int = 2
    tile_pixels: int = 34  # coarse pixels per tile side
    seed: int = 0
    blobs: list | None = None  # explicit blobs override random sampling

    def validate(self, horizon_minutes: int = 0, n_p: int = 0) -> None:
        pos = {
            "duration_minutes": self.duration_minutes,
            "velocity_kmpm": self.velocity_kmpm + 1e-300,
            "cloud_growth_minutes": self.cloud_growth_minutes,
            "ramp_minutes": self.ramp_minutes,
            "spawn_radius_km": self.spawn_radius_km,
            "fade_coupling_db": self.fade_coupling_db,
            "goes_step_rad": self.goes_step_rad,
            "goes_fine_factor": self.goes_fine_factor,
            "radar_step_deg": self.radar_step_deg,
            "radar_fine_factor": self.radar_fine_factor,
            "tile_pixels": self.tile_pixels,
        }
        for k, v in pos.items():
            if not v > 0:
                raise InvalidParams(f"{k} must be positive")
        for k in ("cloud_sigma_km", "core_ratio", "rain_intensity", "rain_duration_minutes"):
            lo, hi = getattr(self, k)
            if not 0 < lo <= hi:
                raise InvalidParams(f"{k} must be an increasing positive range")
        if self.rain_intensity[1] > 16:
            raise InvalidParams("rain intensity is capped at 16")
        if min(self.blobs_per_day, self.noise_std_db, self.rain_lag_minutes, self.goes_noise, self.diurnal_amp_db) < 0:
            raise InvalidParams("rates, lags and noise levels must be non-negative")
        if not 0 <= self.mixed_fraction + self.snow_fraction <= 1:
            raise InvalidParams("mixed_fraction + snow_fraction must lie in [0, 1]")
        if self.duration_minutes % 5:
            raise InvalidParams("duration_minutes must be a multiple of the 5 min imagery cadence")
        if self.duration_minutes < horizon_minutes + 5 * n_p:
            raise InvalidParams("episode shorter than horizon plus the imagery history")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("blobs")
        return d


@dataclass
class GatewayGeometry:
    """Tile templates and per-pixel local offsets (km) for one gateway."""

    goes_fine: GeoGrid
    goes_coarse: GeoGrid
    radar_fine: GeoGrid
    km_goes_fine: tuple
    km_goes_coarse: tuple
    km_radar: tuple


def _goes_tile(proj, center: LatLon, step: float, tiles: int, factor: int) -> tuple[GeoGrid, GeoGrid]:
    xg, yg = latlon_to_fixed_grid(proj, center)
    half = tiles // 2
    j0 = round(xg / step) - half
    i0 = round(yg / step) + half  # rows run north to south
    coarse = GeoGrid(np.zeros((tiles, tiles)), CRS.FIXED_GRID, j0 * step, i0 * step, step, -step)
    fs = step / factor
    off = (factor - 1) / 2.0 * fs
    fine = GeoGrid(
        np.zeros((tiles * factor, tiles * factor)), CRS.FIXED_GRID, j0 * step - off, i0 * step + off, fs, -fs
    )
    return fine, coarse


def _radar_tile(center: LatLon, step_lat: float, tiles: int, factor: int) -> GeoGrid:
    coarse_lat = step_lat * factor
    coarse_lon = coarse_lat * 1.3  # ~square pixels at mid latitudes
    half = tiles // 2
    j0 = round(center.lon_deg / coarse_lon) - half
    i0 = round(center.lat_deg / coarse_lat) + half
    off_lat = (factor - 1) / 2.0 * step_lat
    off_lon = (factor - 1) / 2.0 * coarse_lon / factor
    return GeoGrid(
        np.zeros((tiles * factor, tiles * factor)),
        CRS.GEODETIC,
        j0 * coarse_lon - off_lon,
        i0 * coarse_lat + off_lat,
        coarse_lon / factor,
        -step_lat,
    )


def _grid_km(g: GeoGrid, ref: LatLon, proj) -> tuple[np.ndarray, np.ndarray]:
    x, y = g.pixel_centers()
    if g.crs is CRS.FIXED_GRID:
        lat, lon = fixed_grid_to_latlon_array(proj, x, y)
    else:
        lat, lon = y, x
    e, n = local_km(lat, lon, ref)
    return e.ravel().astype(np.float64), n.ravel().astype(np.float64)


class Episode:
    """A generated scene. Imagery is rendered lazily, one day-sized chunk at a time."""

    def __init__(self, params: SceneParams, gateways, proj: FixedGridProjection = GOES_EAST):
        self.params = params
        self.gateways = list(gateways)
        self.proj = proj
        rng = np.random.default_rng([params.seed, 0xC10D])
        heading = rng.uniform(0, 2 * math.pi)
        self.velocity = (params.velocity_kmpm * math.cos(heading), params.velocity_kmpm * math.sin(heading))
        self.beacon_base = rng.uniform(*params.beacon_base_db, size=len(self.gateways))
        self.diurnal_phase = rng.uniform(0, 2 * math.pi, size=len(self.gateways))
        if params.blobs is not None:
            self.blobs = [list(b for b in params.blobs if b.gateway_idx == g) for g in range(len(self.gateways))]
        else:
            self.blobs = [self._sample_blobs(g, rng) for g in range(len(self.gateways))]

    # scene sampling -----------------------------------------------------------
    def _sample_blobs(self, g: int, rng) -> list[Blob]:
        p = self.params
        days = p.duration_minutes / 1440.0
        n = int(rng.poisson(p.blobs_per_day * days))
        lag = p.rain_lag_minutes * 60
        lead = lag + p.rain_duration_minutes[1] * 60 + 2 * p.ramp_minutes * 60
        t0 = p.start_timestamp - lead
        t1 = p.start_timestamp + p.duration_minutes * 60
        vx, vy = self.velocity
        out = []
        for _ in range(n):
            birth = rng.uniform(t0, t1)
            dur = rng.uniform(*p.rain_duration_minutes) * 60
            r = p.spawn_radius_km * math.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * math.pi)
            # place the blob's mid-rain position within the spawn disk
            mid = (lag + dur / 2) / 60.0
            x0 = r * math.cos(a) - vx * mid
            y0 = r * math.sin(a) - vy * mid
            u = rng.uniform()
            ptype = 2 if u < p.snow_fraction else (1 if u < p.snow_fraction + p.mixed_fraction else 0)
            sigma = rng.uniform(*p.cloud_sigma_km)
            out.append(
                Blob(g, birth, x0, y0, sigma, birth + lag, birth + lag + dur, rng.uniform(*p.rain_intensity),
                     sigma * rng.uniform(*p.core_ratio), ptype)
            )
        return out

    # geometry -----------------------------------------------------------------
    @cached_property
    def geometry(self) -> list[GatewayGeometry]:
        p = self.params
        out = []
        for gw in self.gateways:
            fine, coarse = _goes_tile(self.proj, gw, p.goes_step_rad, p.tile_pixels, p.goes_fine_factor)
            radar = _radar_tile(gw, p.radar_step_deg, p.tile_pixels, p.radar_fine_factor)
            out.append(
                GatewayGeometry(fine, coarse, radar, _grid_km(fine, gw, self.proj), _grid_km(coarse, gw, self.proj),
                                _grid_km(radar, gw, self.proj))
            )
        return out

    @property
    def frame_times(self) -> np.ndarray:
        p = self.params
        return p.start_timestamp + FRAME_S * np.arange(p.duration_minutes // 5, dtype=np.int64)

    @property
    def n_chunks(self) -> int:
        return -(-len(self.frame_times) // 288)

    def chunk_times(self, chunk: int) -> np.ndarray:
        return self.frame_times[chunk * 288 : (chunk + 1) * 288]

    # fields -------------------------------------------------------------------
    def _cloud_amp(self, b: Blob, t):
        ramp = self.params.ramp_minutes * 60
        up = np.clip((t - b.birth_s) / (self.params.cloud_growth_minutes * 60), 0.0, 1.0)
        down = np.clip((b.alive_until(ramp) - t) / ramp, 0.0, 1.0)
        return np.minimum(up, down)

    def _rain_amp(self, b: Blob, t):
        ramp = self.params.ramp_minutes * 60
        up = np.clip((t - b.rain_on_s) / ramp, 0.0, 1.0)
        down = np.clip((b.rain_off_s - t) / ramp, 0.0, 1.0)
        return np.minimum(up, down)

    def _centers(self, b: Blob, t):
        dt = (np.asarray(t, np.float64) - b.birth_s) / 60.0
        return b.x0_km + self.velocity[0] * dt, b.y0_km + self.velocity[1] * dt

    def _active(self, g: int, t0: float, t1: float):
        ramp = self.params.ramp_minutes * 60
        return [b for b in self.blobs[g] if b.birth_s <= t1 and b.alive_until(ramp) >= t0]

    def opacity(self, g: int, times, km) -> np.ndarray:
        """Cloud opacity in [0, 1) on pixels ``km`` for each time: (len(times), n_pix)."""
        times = np.asarray(times, np.float64)
        log_clear = np.zeros((times.size, km[0].size))
        for b in self._active(g, times[0], times[-1]):
            amp = self._cloud_amp(b, times)
            live = np.flatnonzero(amp > 0)
            if live.size == 0:
                continue
            cx, cy = self._centers(b, times[live])
            d2 = (km[0][None, :] - cx[:, None]) ** 2 + (km[1][None, :] - cy[:, None]) ** 2
            a = amp[live, None] * np.exp(-d2 / (2 * b.sigma_km**2))
            log_clear[live] += np.log1p(-np.minimum(a, 0.999))
        return -np.expm1(log_clear)

    def rain(self, g: int, times, km) -> tuple[np.ndarray, np.ndarray]:
        """(intensity, precipitation type) on pixels ``km``; max over overlapping cores."""
        times = np.asarray(times, np.float64)
        inten = np.zeros((times.size, km[0].size))
        ptype = np.zeros(inten.shape, np.int8)
        for b in self._active(g, times[0], times[-1]):
            amp = self._rain_amp(b, times)
            live = np.flatnonzero(amp > 0)
            if live.size == 0:
                continue
            cx, cy = self._centers(b, times[live])
            d2 = (km[0][None, :] - cx[:, None]) ** 2 + (km[1][None, :] - cy[:, None]) ** 2
            core = d2 <= b.core_km**2
            val = np.where(core, b.intensity * amp[live, None], 0.0)
            sub = inten[live]
            upd = val > sub
            sub[upd] = val[upd]
            inten[live] = sub
            pt = ptype[live]
            pt[upd] = b.ptype
            ptype[live] = pt
        return inten, ptype

    # rendered products -----------------------------------------------------------
    def goes_chunk(self, g: int, chunk: int):
        """Raw satellite-like channels: (times, fine (N,Hf,Wf) reflectance, coarse (N,H,W) brightness temperature)."""
        p = self.params
        times = self.chunk_times(chunk)
        geo = self.geometry[g]
        rng = np.random.default_rng([p.seed, 1, g, chunk])
        op_f = self.opacity(g, times, geo.km_goes_fine).reshape((times.size,) + geo.goes_fine.values.shape)
        op_c = self.opacity(g, times, geo.km_goes_coarse).reshape((times.size,) + geo.goes_coarse.values.shape)
        refl = (0.08 + 0.8 * op_f).astype(np.float32)
        refl += np.float32(p.goes_noise) * rng.standard_normal(op_f.shape, dtype=np.float32)
        btemp = (285.0 - 65.0 * op_c).astype(np.float32)
        btemp += np.float32(30.0 * p.goes_noise) * rng.standard_normal(op_c.shape, dtype=np.float32)
        return times, refl, btemp

    def radar_chunk(self, g: int, chunk: int):
        """Radar mosaic codes 0..48 on the fine geodetic tile: (times, (N,Hf,Wf) uint8)."""
        times = self.chunk_times(chunk)
        geo = self.geometry[g]
        inten, ptype = self.rain(g, times, geo.km_radar)
        level = np.clip(np.rint(inten), 0, 16).astype(np.int16)
        codes = np.where(level > 0, level + 16 * ptype, 0).astype(np.uint8)
        return times, codes.reshape((times.size,) + geo.radar_fine.values.shape)

    def beacon_times(self) -> np.ndarray:
        p = self.params
        return p.start_timestamp + BEACON_S * np.arange(p.duration_minutes, dtype=np.int64)

    def rain_at_gateway(self, g: int, times=None) -> np.ndarray:
        times = self.beacon_times() if times is None else times
        return self.rain(g, times, (np.zeros(1), np.zeros(1)))[0][:, 0]

    def clear_sky(self, g: int, times) -> np.ndarray:
        tod = (np.asarray(times) % 86_400) / 86_400.0
        return self.beacon_base[g] + self.params.diurnal_amp_db * np.sin(2 * math.pi * tod + self.diurnal_phase[g])

    def noiseless_beacon(self, g: int, times=None) -> np.ndarray:
        times = self.beacon_times() if times is None else times
        return self.clear_sky(g, times) - self.params.fade_coupling_db * self.rain_at_gateway(g, times)

    def beacon(self, g: int) -> BeaconSeries:
        t = self.beacon_times()
        rng = np.random.default_rng([self.params.seed, 2, g])
        power = self.noiseless_beacon(g, t) + self.params.noise_std_db * rng.standard_normal(t.size)
        return BeaconSeries(g, t, power)

    def truth_intervals(self, g: int) -> list[tuple[int, int]]:
        """Maximal runs of 1-min samples whose noiseless dip exceeds the truth margin, as (first, last) timestamps."""
        t = self.beacon_times()
        fade = self.params.fade_coupling_db * self.rain_at_gateway(g, t) > self.params.truth_margin_db
        edges = np.flatnonzero(np.diff(np.r_[0, fade.astype(np.int8), 0]))
        return [(int(t[a]), int(t[b - 1])) for a, b in zip(edges[::2], edges[1::2])]


def gen_episode(params: SceneParams, gateways=None, proj: FixedGridProjection = GOES_EAST,
                horizon_minutes: int = 0, n_p: int = 0) -> Episode:
    params.validate(horizon_minutes, n_p)
    return Episode(params, DEFAULT_GATEWAYS if gateways is None else gateways, proj)
