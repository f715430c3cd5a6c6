"""Station datasets: binary series I/O, z-scoring, chronological windows, synthetic data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .spatial_graph import (DataValidationError, StationSet, haversine_matrix, read_stations_csv,
                            write_stations_csv)

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    stations: StationSet
    series: np.ndarray  # N x T_total x C, float32
    channel_names: list[str]
    interval: str = "1h"

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float32)
        if self.series.ndim != 3:
            raise DataValidationError(f"series must be N x T x C, got shape {self.series.shape}")
        if self.series.shape[0] != len(self.stations):
            raise DataValidationError("series rows do not match the station count")
        if self.series.shape[2] != len(self.channel_names):
            raise DataValidationError("channel names do not match the channel axis")
        if not np.isfinite(self.series).all():
            bad = np.argwhere(~np.isfinite(self.series))[0].tolist()
            raise DataValidationError(f"series contains NaN/Inf (first at station, step, channel = {bad})")

    @property
    def n(self) -> int:
        return self.series.shape[0]

    @property
    def t_total(self) -> int:
        return self.series.shape[1]

    @property
    def c(self) -> int:
        return self.series.shape[2]


def save_series(dataset: Dataset, path) -> None:
    """Header line of JSON, then little-endian float32 values laid out time-major (T x N x C)."""
    header = {
        "n": dataset.n,
        "t_total": dataset.t_total,
        "c": dataset.c,
        "channel_names": list(dataset.channel_names),
        "station_ids": list(dataset.stations.ids),
        "interval": dataset.interval,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(dataset.series.transpose(1, 0, 2), dtype="<f4").tobytes())


def save_dataset(dataset: Dataset, stations_csv, series_file) -> None:
    write_stations_csv(dataset.stations, stations_csv)
    save_series(dataset, series_file)


def load_dataset(stations_csv, series_file) -> Dataset:
    stations = read_stations_csv(stations_csv)
    with open(series_file, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataValidationError(f"{series_file}: unreadable header") from exc
        payload = fh.read()
    missing = {"n", "t_total", "c", "channel_names", "station_ids"} - set(header)
    if missing:
        raise DataValidationError(f"{series_file}: header lacks {sorted(missing)}")
    ids = [str(i) for i in header["station_ids"]]
    if ids != list(stations.ids):
        raise DataValidationError(
            f"station ids differ: series header has {sorted(set(ids))}, "
            f"stations file has {sorted(set(stations.ids))}")
    n, t, c = int(header["n"]), int(header["t_total"]), int(header["c"])
    if n != len(ids):
        raise DataValidationError(f"{series_file}: n={n} but {len(ids)} station ids")
    if len(payload) != 4 * n * t * c:
        raise DataValidationError(f"{series_file}: payload has {len(payload)} bytes, expected {4 * n * t * c}")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, n, c).transpose(1, 0, 2)
    return Dataset(stations, np.ascontiguousarray(values), list(header["channel_names"]),
                   header.get("interval", "1h"))


# --------------------------------------------------------------------------
# splits and normalisation


def split_bounds(t_total: int, split: Sequence[float]) -> dict[str, tuple[int, int]]:
    """Chronological ``[start, stop)`` spans per split, cut at whole timesteps."""
    if len(split) != 3 or min(split) <= 0 or abs(sum(split) - 1) > 1e-9:
        raise ValueError("split must be three positive fractions summing to 1")
    b1 = int(math.floor(t_total * split[0]))
    b2 = int(math.floor(t_total * (split[0] + split[1])))
    return {"train": (0, b1), "val": (b1, b2), "test": (b2, t_total)}


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Normalizer":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


def fit_normalizer(dataset: Dataset, split: Sequence[float]) -> Normalizer:
    """Per-channel mean and standard deviation over the training span only."""
    start, stop = split_bounds(dataset.t_total, split)["train"]
    x = dataset.series[:, start:stop, :].astype(np.float64).reshape(-1, dataset.c)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if (std <= 0).any():
        raise DataValidationError(f"zero-variance channels: {np.flatnonzero(std <= 0).tolist()}")
    return Normalizer(mean, std)


# --------------------------------------------------------------------------
# windows


@dataclass
class ForecastBatch:
    input: np.ndarray  # N x T x C
    target: np.ndarray  # N x F x C
    t0: int  # absolute index of the first target step


def window_starts(span: tuple[int, int], t_in: int, f_out: int, stride: int = 1) -> np.ndarray:
    """Absolute start indices of windows lying wholly inside ``span``."""
    start, stop = span
    count = (stop - start) - t_in - f_out + 1
    if count < 1:
        raise DataValidationError(f"span of {stop - start} steps is too short for T={t_in}, F={f_out}")
    return start + np.arange(0, count, stride)


def stack_windows(series: np.ndarray, starts: np.ndarray, t_in: int, f_out: int):
    """Gather ``(B, N, T, C)`` inputs and ``(B, N, F, C)`` targets from an ``N x T_total x C`` array."""
    starts = np.asarray(starts)
    idx_in = starts[:, None] + np.arange(t_in)
    idx_out = starts[:, None] + t_in + np.arange(f_out)
    x = series[:, idx_in, :].transpose(1, 0, 2, 3)
    y = series[:, idx_out, :].transpose(1, 0, 2, 3)
    return x, y


def windows(series: np.ndarray, span: tuple[int, int], t_in: int = 48, f_out: int = 24,
            stride: int = 1) -> Iterator[ForecastBatch]:
    for s in window_starts(span, t_in, f_out, stride).tolist():
        yield ForecastBatch(series[:, s:s + t_in, :], series[:, s + t_in:s + t_in + f_out, :], s + t_in)


# --------------------------------------------------------------------------
# synthetic data


def _cap_points(n: int, rng, center_lat: float, center_lon: float, radius_deg: float):
    """Uniform samples on a spherical cap."""
    cos_r = math.cos(math.radians(radius_deg))
    delta = np.arccos(rng.uniform(cos_r, 1.0, n))
    bearing = rng.uniform(0.0, 2 * math.pi, n)
    lat1, lon1 = math.radians(center_lat), math.radians(center_lon)
    lat2 = np.arcsin(math.sin(lat1) * np.cos(delta) + math.cos(lat1) * np.sin(delta) * np.cos(bearing))
    lon2 = lon1 + np.arctan2(np.sin(bearing) * np.sin(delta) * math.cos(lat1),
                             np.cos(delta) - math.sin(lat1) * np.sin(lat2))
    lon_deg = (np.degrees(lon2) + 180.0) % 360.0 - 180.0
    lon_deg[lon_deg == -180.0] = 180.0
    return np.degrees(lat2), lon_deg


def synth_stations(n_stations: int, seed: int = 0, cap_center: tuple[float, float] = (45.0, 10.0),
                   cap_radius_deg: float = 6.0) -> StationSet:
    """Stations drawn uniformly on a spherical cap (radius 180 covers the globe)."""
    rng = np.random.default_rng(seed)
    lat, lon = _cap_points(n_stations, rng, cap_center[0], cap_center[1], cap_radius_deg)
    return StationSet.from_arrays([f"S{i:05d}" for i in range(n_stations)], lat, lon)


def synth_generate(n_stations: int, steps: int, seed: int = 0, spatial_length_scale_km: float = 300.0,
                   noise: float = 0.5, *, n_channels: int = 1, ar_coef: float = 0.99,
                   diurnal_amplitude: float = 1.0, lat_trend: float = 0.5,
                   cap_center: tuple[float, float] = (45.0, 10.0), cap_radius_deg: float = 6.0) -> Dataset:
    """Spatially correlated station series.

    Each channel is a shared diurnal cycle, plus a latitude-dependent level and
    drift, plus an AR(1) field whose spatial covariance is ``exp(-d / length_scale)``
    in great-circle distance, plus white observation noise.
    """
    if n_stations < 2:
        raise ValueError("need at least two stations")
    rng = np.random.default_rng(seed)
    lat, lon = _cap_points(n_stations, rng, cap_center[0], cap_center[1], cap_radius_deg)
    stations = StationSet.from_arrays([f"S{i:05d}" for i in range(n_stations)], lat, lon)

    dist = haversine_matrix(lat, lon, lat, lon)
    with np.errstate(divide="ignore"):
        cov = np.exp(-dist / spatial_length_scale_km) if math.isfinite(spatial_length_scale_km) else np.ones_like(dist)
    evals, evecs = np.linalg.eigh(cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))

    t = np.arange(steps)
    lat_off = (lat - cap_center[0]) / 10.0
    innov = math.sqrt(1.0 - ar_coef ** 2)
    series = np.empty((n_stations, steps, n_channels))
    for ch in range(n_channels):
        z = root @ rng.standard_normal((n_stations, steps))
        field = np.empty_like(z)
        field[:, 0] = z[:, 0]
        for k in range(1, steps):
            field[:, k] = ar_coef * field[:, k - 1] + innov * z[:, k]
        diurnal = diurnal_amplitude * np.sin(2 * math.pi * t / 24.0 + 0.7 * ch)
        trend = lat_trend * lat_off[:, None] * (1.0 + t[None, :] / steps)
        series[:, :, ch] = diurnal[None, :] + trend + field + noise * rng.standard_normal((n_stations, steps))
    names = [f"var{ch}" for ch in range(n_channels)]
    return Dataset(stations, series.astype(np.float32), names, "1h")
