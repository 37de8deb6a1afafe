"""Synthetic breast-phantom volumes and simulated projection data.

Objects are spheres added on top of a (optionally textured) background.
A voxel belongs to a sphere when its centre lies inside it, which keeps the
attenuation bookkeeping exact; ``supersample > 1`` instead adds the covered
fraction of ``supersample**3`` sub-voxel centres.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Geometry, VoxelGrid
from .projector import Projector

__all__ = [
    "MC_DIAMETERS_UM",
    "MS_DIAMETERS_UM",
    "SphereObject",
    "Cluster",
    "PhantomSpec",
    "NoiseSpec",
    "PhantomError",
    "generate_phantom",
    "simulate_projections",
    "sphere_mask",
]

# BR3D microcalcification and mass diameters, largest first
MC_DIAMETERS_UM = (400.0, 290.0, 230.0, 196.0, 165.0, 130.0)
MS_DIAMETERS_UM = (6300.0, 4700.0, 3900.0, 3100.0, 2300.0, 1800.0)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class SphereObject:
    """A microcalcification (``"MC"``) or mass (``"MS"``).

    ``diameter_um`` is in micrometres for both kinds, ``center`` in mm and
    ``contrast`` in 1/mm above the background.
    """

    kind: str
    center: tuple[float, float, float]
    diameter_um: float
    contrast: float

    def __post_init__(self):
        if self.kind not in ("MC", "MS"):
            raise PhantomError(f"object kind must be 'MC' or 'MS', got {self.kind!r}")
        if not self.diameter_um > 0:
            raise PhantomError("object diameter must be positive")
        if self.kind == "MC" and not self.contrast > 0:
            raise PhantomError("microcalcification contrast must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def radius_mm(self) -> float:
        return 0.5e-3 * self.diameter_um


@dataclass(frozen=True)
class Cluster:
    """``count`` equal microcalcifications in a row along x, ``spacing`` mm apart."""

    center: tuple[float, float, float]
    count: int
    spacing: float
    diameter_um: float
    contrast: float

    def objects(self) -> list[SphereObject]:
        offsets = self.spacing * (np.arange(self.count) - 0.5 * (self.count - 1))
        cx, cy, cz = self.center
        return [SphereObject("MC", (cx + float(o), cy, cz), self.diameter_um, self.contrast)
                for o in offsets]


@dataclass(frozen=True)
class PhantomSpec:
    background: float = 0.05
    texture: float = 0.1
    texture_seed: int = 0
    texture_terms: int = 4
    objects: tuple[SphereObject, ...] = ()
    clusters: tuple[Cluster, ...] = ()
    supersample: int = 1

    def all_objects(self) -> list[SphereObject]:
        out = list(self.objects)
        for c in self.clusters:
            out.extend(c.objects())
        return out


@dataclass(frozen=True)
class NoiseSpec:
    model: str = "none"
    sigma: float = 0.0
    i0: float = 1e5
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("none", "gaussian", "poisson"):
            raise PhantomError(f"noise model must be none, gaussian or poisson, got {self.model!r}")
        if self.sigma < 0:
            raise PhantomError("noise sigma must be non-negative")
        if not self.i0 > 0:
            raise PhantomError("photon count i0 must be positive")


def _texture(grid: VoxelGrid, terms: int, seed: int) -> np.ndarray:
    # sum of a few low-frequency cosines, normalised to [-1, 1]
    rng = np.random.default_rng(seed)
    xs, ys, zs = (grid.centers(a) - grid.origin[a] for a in range(3))
    extent = np.array([grid.n_x * grid.dx, grid.n_y * grid.dy, grid.n_z * grid.dz])
    field_ = np.zeros(grid.shape)
    for _ in range(terms):
        freq = rng.uniform(0.5, 2.0, size=3) / extent
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (freq[0] * xs[:, None, None] + freq[1] * ys[None, :, None]
                                      + freq[2] * zs[None, None, :]) + phase)
    return field_ / terms


def sphere_mask(grid: VoxelGrid, obj: SphereObject, supersample: int = 1) -> np.ndarray:
    """Fraction of each voxel inside the sphere (0/1 when ``supersample == 1``).

    Sub-voxel sampling uses ``supersample`` points along the finest axis and
    proportionally more along coarser ones, so thin slabs are not skipped.
    """
    r = obj.radius_mm
    hmin = min(grid.spacing)
    out = np.zeros(grid.shape)
    axes = []
    for a in range(3):
        h = grid.spacing[a]
        n = 1 if supersample == 1 else supersample * int(np.ceil(h / hmin - 1e-9))
        offsets = (np.arange(n) + 0.5) / n
        lo = int(np.floor((obj.center[a] - r - grid.origin[a]) / h))
        hi = int(np.ceil((obj.center[a] + r - grid.origin[a]) / h))
        lo, hi = max(lo, 0), min(hi, grid.shape[a])
        idx = np.arange(lo, hi)
        pos = grid.origin[a] + h * (idx[:, None] + offsets[None, :]) - obj.center[a]
        axes.append((slice(lo, hi), pos))
    (sx, px), (sy, py), (sz, pz) = axes
    d2 = (px[:, None, None, :, None, None] ** 2 + py[None, :, None, None, :, None] ** 2
          + pz[None, None, :, None, None, :] ** 2)
    inside = (d2 <= r * r).mean(axis=(3, 4, 5))
    out[sx, sy, sz] = inside
    return out


def _check_inside(grid: VoxelGrid, obj: SphereObject):
    r = obj.radius_mm
    for a, name in enumerate("xyz"):
        lo = grid.origin[a]
        hi = lo + grid.shape[a] * grid.spacing[a]
        if obj.center[a] - r < lo or obj.center[a] + r > hi:
            raise PhantomError(f"{obj.kind} at {obj.center} (diameter {obj.diameter_um} um) "
                               f"extends outside the grid along {name}")


def generate_phantom(spec: PhantomSpec, grid: VoxelGrid) -> np.ndarray:
    x = np.full(grid.shape, float(spec.background))
    if spec.texture:
        x += spec.texture * spec.background * _texture(grid, spec.texture_terms, spec.texture_seed)
    for obj in spec.all_objects():
        _check_inside(grid, obj)
        x += obj.contrast * sphere_mask(grid, obj, spec.supersample)
    return x


def simulate_projections(geom: Geometry, x_true: np.ndarray, noise: NoiseSpec = NoiseSpec(),
                         projector: Optional[Projector] = None) -> np.ndarray:
    """Noiseless line integrals plus optional Gaussian or Poisson noise.

    Poisson data are ``-ln(counts / i0)`` with ``counts ~ Poisson(i0 exp(-b))``
    floored at one photon.
    """
    if np.any(np.asarray(x_true) < 0):
        raise PhantomError("ground-truth volume must be non-negative")
    projector = projector or Projector(geom)
    b = projector.forward(x_true)
    if noise.model == "none":
        return b
    rng = np.random.default_rng(noise.seed)
    if noise.model == "gaussian":
        return b + noise.sigma * rng.standard_normal(b.shape)
    counts = np.maximum(rng.poisson(noise.i0 * np.exp(-b)), 1)
    return -np.log(counts / noise.i0)
