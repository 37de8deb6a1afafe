"""Figures of merit for reconstructed lesions: CNR, plane profiles, FWHM, ASF.

Volumes are indexed ``[x, y, z]``. Regions of interest are disks inside a
single slice, given in voxel indices.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

__all__ = [
    "FWHM_FACTOR",
    "Roi",
    "Cnr",
    "Profile",
    "GaussianFit",
    "cnr_mass",
    "cnr_mc",
    "plane_profile",
    "fit_gaussian",
    "fwhm",
    "width_mm",
    "asf",
]

log = logging.getLogger(__name__)

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class Roi:
    center: tuple[int, int]
    diameter: float
    slice: int

    def mask(self, shape) -> np.ndarray:
        """Boolean in-slice mask of voxels whose centre lies in the disk."""
        nx, ny = shape[:2]
        if self.diameter < 1:
            raise ValueError("ROI diameter must be >= 1 voxel")
        r = 0.5 * self.diameter
        ci, cj = self.center
        if ci - r < -0.5 or cj - r < -0.5 or ci + r > nx - 0.5 or cj + r > ny - 0.5:
            raise ValueError(f"ROI at {self.center} with diameter {self.diameter} leaves the slice")
        if not 0 <= self.slice < shape[2]:
            raise ValueError(f"ROI slice {self.slice} out of range")
        i = np.arange(nx)[:, None]
        j = np.arange(ny)[None, :]
        return (i - ci) ** 2 + (j - cj) ** 2 <= r * r

    def values(self, vol: np.ndarray) -> np.ndarray:
        return vol[:, :, self.slice][self.mask(vol.shape)]


class Cnr(NamedTuple):
    value: float
    valid: bool


def cnr_mass(vol: np.ndarray, roi_ms: Roi, roi_bg: Roi) -> Cnr:
    """``(mean_MS - mean_BG) / (std_MS - std_BG)``.

    The denominator can vanish or turn negative; the raw value is returned
    with ``valid=False`` when it is not positive.
    """
    ms, bg = roi_ms.values(vol), roi_bg.values(vol)
    num = ms.mean() - bg.mean()
    den = ms.std() - bg.std()
    if den == 0:
        return Cnr(math.copysign(math.inf, num) if num else math.nan, False)
    return Cnr(float(num / den), bool(den > 0))


def cnr_mc(vol: np.ndarray, roi_mc: Roi, roi_bg: Roi) -> Cnr:
    """``(max_MC - mean_BG) / std_BG``."""
    peak = roi_mc.values(vol).max()
    bg = roi_bg.values(vol)
    sd = bg.std()
    num = peak - bg.mean()
    if sd == 0:
        return Cnr(math.copysign(math.inf, num) if num else math.nan, False)
    return Cnr(float(num / sd), True)


class Profile(NamedTuple):
    samples: np.ndarray
    spacing: float
    anchor: tuple


def plane_profile(vol: np.ndarray, slice: int, x: int, y_range: Sequence[int],
                  spacing: float = 1.0) -> Profile:
    """Values along y at fixed ``x`` and ``slice``; ``y_range`` is ``(start, stop)``."""
    start, stop = int(y_range[0]), int(y_range[1])
    nx, ny, nz = vol.shape
    if not (0 <= x < nx and 0 <= slice < nz and 0 <= start < stop <= ny):
        raise IndexError(f"profile at x={x}, slice={slice}, y={start}:{stop} outside {vol.shape}")
    return Profile(np.array(vol[x, start:stop, slice], dtype=np.float64), float(spacing),
                   (slice, x, start, stop))


class GaussianFit(NamedTuple):
    amplitude: float
    mean: float
    sd: float
    offset: float
    residual: float
    ok: bool = True


_FAILED = GaussianFit(math.nan, math.nan, math.nan, math.nan, math.nan, False)


def _linear_part(t, s, m, d):
    g = np.exp(-0.5 * ((t - m) / d) ** 2)
    A = np.stack([g, np.ones_like(g)], axis=1)
    coef, *_ = np.linalg.lstsq(A, s, rcond=None)
    r = A @ coef - s
    return coef, float(r @ r)


def fit_gaussian(profile, max_sweeps: int = 200, tol: float = 1e-10) -> GaussianFit:
    """Least-squares fit of ``a exp(-(t - m)^2 / (2 d^2)) + c`` to a profile.

    Amplitude and offset are solved exactly for given centre and width; the
    centre and width are refined one at a time with bounded scalar searches
    starting from the profile moments. Profiles with fewer than five samples
    or whose maximum sits on an end point give ``ok=False``.
    """
    s = np.asarray(profile.samples if isinstance(profile, Profile) else profile, dtype=np.float64)
    n = s.size
    if n < 5:
        return _FAILED
    peak = int(np.argmax(s))
    if peak in (0, n - 1) or s[peak] <= s.min():
        return _FAILED
    t = np.arange(n, dtype=np.float64)
    w = s - s.min()
    m = float(np.sum(t * w) / np.sum(w))
    d = float(np.sqrt(np.sum(w * (t - m) ** 2) / np.sum(w)))
    d = min(max(d, 0.1), float(n))
    d_lo, d_hi = 1e-3, 2.0 * n

    def cost_m(mm):
        return _linear_part(t, s, mm, d)[1]

    def cost_d(dd):
        return _linear_part(t, s, m, dd)[1]

    for _ in range(max_sweeps):
        m_old, d_old = m, d
        m = float(minimize_scalar(cost_m, bounds=(max(0.0, m - d), min(n - 1.0, m + d)),
                                  method="bounded", options={"xatol": 1e-13}).x)
        d = float(minimize_scalar(cost_d, bounds=(max(d_lo, 0.5 * d), min(d_hi, 2.0 * d)),
                                  method="bounded", options={"xatol": 1e-13}).x)
        if abs(m - m_old) < tol and abs(d - d_old) < tol:
            break
    (a, c), res = _linear_part(t, s, m, d)
    if not (d > 0 and a > 0):
        return _FAILED
    return GaussianFit(float(a), m, d, float(c), math.sqrt(res), True)


def fwhm(fit: GaussianFit) -> float:
    """Full width at half maximum in samples."""
    return FWHM_FACTOR * fit.sd


def width_mm(fwhm_samples: float, dy: float) -> float:
    return fwhm_samples * dy


def _neighbourhood(shape, center, kind):
    i, j = center
    if kind == "cross":
        pts = [(i, j), (i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
    elif kind == "disk":
        pts = [(i + a, j + b) for a in (-1, 0, 1) for b in (-1, 0, 1) if a * a + b * b <= 2.25]
    else:
        raise ValueError(f"unknown neighbourhood {kind!r}")
    for a, b in pts:
        if not (0 <= a < shape[0] and 0 <= b < shape[1]):
            raise ValueError(f"ASF neighbourhood around {center} leaves the slice")
    idx = np.array(pts)
    return idx[:, 0], idx[:, 1]


def asf(vol: np.ndarray, mc_center: Sequence[int], bg_center: Sequence[int],
        neighbourhood: str = "cross") -> np.ndarray:
    """Artifact spread function along z.

    ``|mean_MC(z) - mean_BG(z)|`` over all slices, normalised by its value at
    the focus slice ``mc_center[2]``. The three-pixel-diameter regions are a
    5-voxel cross by default, or the 3x3 block with ``neighbourhood="disk"``.
    Returns NaNs (with a warning) when the focus contrast is zero.
    """
    ci, cj, focus = (int(v) for v in mc_center)
    bi, bj = int(bg_center[0]), int(bg_center[1])
    mi, mj = _neighbourhood(vol.shape, (ci, cj), neighbourhood)
    gi, gj = _neighbourhood(vol.shape, (bi, bj), neighbourhood)
    diff = np.abs(vol[mi, mj, :].mean(axis=0) - vol[gi, gj, :].mean(axis=0))
    if diff[focus] == 0:
        log.warning("zero object contrast at the focus slice; ASF undefined")
        return np.full(vol.shape[2], math.nan)
    out = diff / diff[focus]
    out[focus] = 1.0
    return out
