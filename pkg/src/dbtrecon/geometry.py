"""Acquisition geometry for limited-angle cone-beam tomosynthesis.

Coordinates are in millimetres. The flat detector lies in the plane z = 0,
the compressed volume rests on it and the source travels along an arc in
the XZ plane, pivoting about ``SourceArc.center``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "DetectorSpec",
    "SourceArc",
    "VoxelGrid",
    "Geometry",
    "build_geometry",
    "voxel_center",
    "linear_index",
    "unravel_index",
    "desk_geometry",
    "tiny_geometry",
]


class GeometryError(ValueError):
    pass


def _point(p: Sequence[float], name: str) -> tuple[float, float, float]:
    if len(p) != 3:
        raise GeometryError(f"{name} must have 3 coordinates, got {len(p)}")
    return (float(p[0]), float(p[1]), float(p[2]))


@dataclass(frozen=True)
class DetectorSpec:
    n_u: int
    n_v: int
    pitch: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "origin", _point(self.origin, "detector.origin"))
        if self.n_u < 1 or self.n_v < 1:
            raise GeometryError("detector must have at least one pixel per axis")
        if not self.pitch > 0:
            raise GeometryError(f"detector pitch must be positive, got {self.pitch}")
        if self.origin[2] != 0.0:
            raise GeometryError("detector must lie in the plane z = 0")

    @property
    def n_pixels(self) -> int:
        return self.n_u * self.n_v

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin[0] + 0.5 * self.n_u * self.pitch,
                self.origin[1] + 0.5 * self.n_v * self.pitch)

    def u_edges(self) -> np.ndarray:
        return self.origin[0] + self.pitch * np.arange(self.n_u + 1)

    def v_edges(self) -> np.ndarray:
        return self.origin[1] + self.pitch * np.arange(self.n_v + 1)

    @classmethod
    def centered(cls, n_u: int, n_v: int, pitch: float, xy=(0.0, 0.0)) -> "DetectorSpec":
        """Detector whose centre sits at ``xy`` on the z = 0 plane."""
        return cls(n_u, n_v, pitch,
                   (xy[0] - 0.5 * n_u * pitch, xy[1] - 0.5 * n_v * pitch, 0.0))


@dataclass(frozen=True)
class SourceArc:
    """Equally spaced source positions on a circular arc.

    ``height`` is the distance from the detector plane to the source at the
    central (topmost) position. The arc radius is ``height - center[2]``.
    When ``center`` is None the pivot is placed on the detector plane below
    the detector centre by :func:`build_geometry`.
    """

    n_angles: int
    span_deg: float
    height: float
    center: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        if self.center is not None:
            object.__setattr__(self, "center", _point(self.center, "arc.center"))
        if self.n_angles < 1:
            raise GeometryError("arc.n_angles must be >= 1")
        if not 0.0 < self.span_deg < 180.0:
            raise GeometryError(f"arc.span_deg must be in (0, 180), got {self.span_deg}")
        if not self.height > 0:
            raise GeometryError(f"arc.height must be positive, got {self.height}")

    def angles_deg(self) -> np.ndarray:
        if self.n_angles == 1:
            return np.zeros(1)
        step = self.span_deg / (self.n_angles - 1)
        return -0.5 * self.span_deg + step * np.arange(self.n_angles)


@dataclass(frozen=True)
class VoxelGrid:
    n_x: int
    n_y: int
    n_z: int
    dx: float
    dy: float
    dz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "origin", _point(self.origin, "grid.origin"))
        if min(self.n_x, self.n_y, self.n_z) < 1:
            raise GeometryError("grid counts must be >= 1")
        if not min(self.dx, self.dy, self.dz) > 0:
            raise GeometryError("grid spacings must be positive")
        if self.origin[2] < 0:
            raise GeometryError("grid must sit above the detector plane (origin z >= 0)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def n_voxels(self) -> int:
        return self.n_x * self.n_y * self.n_z

    @property
    def voxel_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def top(self) -> float:
        return self.origin[2] + self.n_z * self.dz

    def edges(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n + 1)

    def centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.origin[axis] + self.spacing[axis] * (np.arange(n) + 0.5)

    @classmethod
    def centered(cls, shape, spacing, xy=(0.0, 0.0), z0: float = 0.0) -> "VoxelGrid":
        """Grid centred over ``xy`` with its bottom face at height ``z0``."""
        nx, ny, nz = shape
        dx, dy, dz = spacing
        return cls(nx, ny, nz, dx, dy, dz,
                   (xy[0] - 0.5 * nx * dx, xy[1] - 0.5 * ny * dy, z0))


@dataclass(frozen=True)
class Geometry:
    detector: DetectorSpec
    arc: SourceArc
    grid: VoxelGrid
    source_positions: np.ndarray = field(repr=False, compare=False)

    @property
    def n_angles(self) -> int:
        return self.arc.n_angles

    @property
    def n_data(self) -> int:
        return self.detector.n_pixels * self.arc.n_angles

    @property
    def data_shape(self) -> tuple[int, int, int]:
        return (self.arc.n_angles, self.detector.n_u, self.detector.n_v)

    def to_dict(self) -> dict:
        """Plain-data form used by the pipeline config."""
        d, a, g = self.detector, self.arc, self.grid
        arc = {"n_angles": a.n_angles, "span_deg": a.span_deg, "height": a.height}
        if a.center is not None:
            arc["center"] = list(a.center)
        return {
            "detector": {"n_u": d.n_u, "n_v": d.n_v, "pitch": d.pitch,
                         "origin": list(d.origin)},
            "arc": arc,
            "grid": {"shape": [g.n_x, g.n_y, g.n_z],
                     "spacing": [g.dx, g.dy, g.dz],
                     "origin": list(g.origin)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Geometry":
        det = data["detector"]
        arc = data["arc"]
        grid = data["grid"]
        detector = DetectorSpec(int(det["n_u"]), int(det["n_v"]), float(det["pitch"]),
                                tuple(det.get("origin", (0.0, 0.0, 0.0))))
        source = SourceArc(int(arc["n_angles"]), float(arc["span_deg"]),
                           float(arc["height"]),
                           tuple(arc["center"]) if arc.get("center") is not None else None)
        nx, ny, nz = (int(n) for n in grid["shape"])
        dx, dy, dz = (float(s) for s in grid["spacing"])
        voxels = VoxelGrid(nx, ny, nz, dx, dy, dz, tuple(grid.get("origin", (0.0, 0.0, 0.0))))
        return build_geometry(detector, source, voxels)


def build_geometry(detector: DetectorSpec, arc: SourceArc, grid: VoxelGrid) -> Geometry:
    """Place the sources on the arc and validate the assembled geometry."""
    if arc.center is None:
        cx, cy = detector.center
        pivot = (cx, cy, 0.0)
    else:
        pivot = arc.center
    radius = arc.height - pivot[2]
    if radius <= 0:
        raise GeometryError("arc pivot must lie below the topmost source position")
    theta = np.deg2rad(arc.angles_deg())
    positions = np.stack([
        pivot[0] + radius * np.sin(theta),
        np.full_like(theta, pivot[1]),
        pivot[2] + radius * np.cos(theta),
    ], axis=1)
    positions.setflags(write=False)

    lowest = positions[:, 2].min()
    if lowest < grid.top + grid.dz:
        raise GeometryError(
            f"source at z={lowest:.6g} mm is too close to the volume top "
            f"(z={grid.top:.6g} mm); every source must clear it by one slab")
    return Geometry(detector, arc, grid, positions)


def voxel_center(grid: VoxelGrid, i: int, j: int, k: int) -> tuple[float, float, float]:
    if not (0 <= i < grid.n_x and 0 <= j < grid.n_y and 0 <= k < grid.n_z):
        raise IndexError(f"voxel index {(i, j, k)} outside grid {grid.shape}")
    ox, oy, oz = grid.origin
    return (ox + (i + 0.5) * grid.dx, oy + (j + 0.5) * grid.dy, oz + (k + 0.5) * grid.dz)


def linear_index(grid: VoxelGrid, i: int, j: int, k: int) -> int:
    """x-fastest flat index, the ordering used by the volume file format."""
    if not (0 <= i < grid.n_x and 0 <= j < grid.n_y and 0 <= k < grid.n_z):
        raise IndexError(f"voxel index {(i, j, k)} outside grid {grid.shape}")
    return i + grid.n_x * (j + grid.n_y * k)


def unravel_index(grid: VoxelGrid, n: int) -> tuple[int, int, int]:
    if not 0 <= n < grid.n_voxels:
        raise IndexError(f"flat index {n} outside grid of {grid.n_voxels} voxels")
    k, rem = divmod(n, grid.n_x * grid.n_y)
    j, i = divmod(rem, grid.n_x)
    return (i, j, k)


def desk_geometry(n_angles: int = 11, span_deg: float = 30.0) -> Geometry:
    """Laptop-sized stand-in for a clinical unit.

    64x64x16 voxels of 0.09x0.09x1 mm, 11 sources over 30 degrees with the
    top source 700 mm above a 96x96 detector of 0.12 mm pitch.
    """
    detector = DetectorSpec.centered(96, 96, 0.12)
    arc = SourceArc(n_angles, span_deg, 700.0)
    grid = VoxelGrid.centered((64, 64, 16), (0.09, 0.09, 1.0))
    return build_geometry(detector, arc, grid)


def tiny_geometry() -> Geometry:
    """4x4x3 voxels, 3 sources, 6x6 detector: small enough for dense oracles.

    The wide 120 degree arc keeps the 108x48 system matrix well conditioned
    (condition number about 6.3), so noiseless data determine the volume.
    """
    detector = DetectorSpec.centered(6, 6, 1.1)
    arc = SourceArc(3, 120.0, 8.0)
    grid = VoxelGrid.centered((4, 4, 3), (0.8, 0.8, 0.8))
    return build_geometry(detector, arc, grid)
