"""Legendre functions, real spherical harmonics and the learnable location encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spatial_graph import StationSet


def _check_x(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        raise ValueError("argument must lie in [-1, 1]")
    return x


def legendre(l: int, x):
    """P_l(x) by Bonnet's recurrence."""
    if l < 0:
        raise ValueError("degree must be non-negative")
    x = _check_x(x)
    p_prev, p = np.ones_like(x), x.copy()
    if l == 0:
        return p_prev
    for k in range(2, l + 1):
        p_prev, p = p, ((2 * k - 1) * x * p - (k - 1) * p_prev) / k
    return p


def assoc_legendre(l: int, m: int, x):
    """Unnormalised P_l^m(x), 0 <= m <= l, including the Condon-Shortley phase."""
    if not 0 <= m:
        raise ValueError("order must be non-negative; use the symmetry relation for m < 0")
    if m > l:
        raise ValueError(f"order {m} exceeds degree {l}")
    x = _check_x(x)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    pmm = np.ones_like(x)
    for k in range(1, m + 1):
        pmm = -(2 * k - 1) * s * pmm
    if l == m:
        return pmm
    pm1 = x * (2 * m + 1) * pmm
    for k in range(m + 2, l + 1):
        pmm, pm1 = pm1, (x * (2 * k - 1) * pm1 - (k + m - 1) * pmm) / (k - m)
    return pm1


def assoc_legendre_negative(l: int, m: int, x):
    """P_l^{-m}(x) = (-1)^m (l-m)!/(l+m)! P_l^m(x) for m >= 0."""
    return (-1) ** m * math.factorial(l - m) / math.factorial(l + m) * assoc_legendre(l, m, x)


def normalized_assoc_legendre_table(l_max: int, x) -> np.ndarray:
    """All normalised P̄_l^m(x) for 0 <= m <= l <= l_max, shape ``(l_max+1, l_max+1, *x.shape)``.

    P̄_l^m = sqrt((2l+1)/(4π) (l-m)!/(l+m)!) P_l^m. The normalisation is folded into
    the recurrence coefficients so no factorial is ever formed.
    """
    x = _check_x(x)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    out = np.zeros((l_max + 1, l_max + 1) + x.shape)
    out[0, 0] = math.sqrt(1.0 / (4.0 * math.pi))
    for m in range(1, l_max + 1):
        out[m, m] = -math.sqrt((2 * m + 1) / (2.0 * m)) * s * out[m - 1, m - 1]
    for m in range(0, l_max):
        out[m + 1, m] = math.sqrt(2 * m + 3) * x * out[m, m]
    for m in range(0, l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = math.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = math.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            out[l, m] = a * (x * out[l - 1, m] - b * out[l - 2, m])
    return out


def _real_from_table(table, l: int, m: int, lon):
    am = abs(m)
    if m == 0:
        return table[l, 0]
    sign = -1.0 if am % 2 else 1.0
    trig = np.sin(am * lon) if m < 0 else np.cos(am * lon)
    return sign * math.sqrt(2.0) * table[l, am] * trig


def real_sph_harm(l: int, m: int, colat_rad, lon_rad):
    """Real spherical harmonic Y_l^m at polar angle ``colat_rad`` and azimuth ``lon_rad``."""
    if abs(m) > l:
        raise ValueError(f"|m|={abs(m)} exceeds l={l}")
    colat = np.asarray(colat_rad, dtype=np.float64)
    lon = np.asarray(lon_rad, dtype=np.float64)
    table = normalized_assoc_legendre_table(l, np.clip(np.cos(colat), -1.0, 1.0))
    return _real_from_table(table, l, m, lon)


def harmonic_index(l_max: int) -> list[tuple[int, int]]:
    """Column order of a basis: (l, m) lexicographic, m from -l to l."""
    return [(l, m) for l in range(l_max + 1) for m in range(-l, l + 1)]


def sph_basis(colat_rad, lon_rad, l_max: int) -> np.ndarray:
    colat = np.asarray(colat_rad, dtype=np.float64)
    lon = np.asarray(lon_rad, dtype=np.float64)
    table = normalized_assoc_legendre_table(l_max, np.clip(np.cos(colat), -1.0, 1.0))
    cols = [_real_from_table(table, l, m, lon) for l, m in harmonic_index(l_max)]
    return np.stack(cols, axis=-1)


def latlon_to_sphere(lat_deg, lon_deg):
    """Station (lat, lon) in degrees -> (colatitude, longitude) in radians."""
    return np.pi / 2 - np.radians(lat_deg), np.radians(lon_deg)


@dataclass
class HarmonicBasis:
    l_max: int
    values: np.ndarray

    @property
    def n_features(self) -> int:
        return (self.l_max + 1) ** 2


def build_basis(stations: StationSet, l_max: int) -> HarmonicBasis:
    if l_max < 0:
        raise ValueError("l_max must be non-negative")
    colat, lon = latlon_to_sphere(stations.lat, stations.lon)
    return HarmonicBasis(l_max, sph_basis(colat, lon, l_max))


@dataclass
class LocationEncoder:
    """Basis matrix plus one learnable weight per (l, m), shared by every station."""

    basis: HarmonicBasis
    weights: np.ndarray

    @classmethod
    def initial(cls, basis: HarmonicBasis) -> "LocationEncoder":
        return cls(basis, np.ones(basis.n_features))

    def __post_init__(self):
        if self.weights.shape != (self.basis.n_features,):
            raise ValueError("weight length does not match basis columns")


def encode_locations(encoder: LocationEncoder) -> np.ndarray:
    """Plain-array embedding ``w * basis``. The differentiable version lives in the model."""
    return encoder.basis.values * encoder.weights
