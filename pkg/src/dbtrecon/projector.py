"""Matrix-free distance-driven projector for a flat stationary detector.

For every source position and every slab ``k`` the voxel boundaries at the
slab's central plane are projected from the source onto the detector plane.
Because the detector is parallel to the slabs the footprint is separable:
x-boundaries map to u-boundaries and y-boundaries to v-boundaries, so a
slab's contribution to a projection is ``Wx @ X_k @ Wy.T`` where ``Wx[a, i]``
is the fraction of pixel column ``a`` covered by the projection of voxel
column ``i``. Each pixel is finally weighted by the path length of its
central ray through one slab, ``dz / cos(gamma)``.

Volumes are arrays of shape ``(n_x, n_y, n_z)`` and projection stacks are
arrays of shape ``(n_angles, n_u, n_v)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .geometry import Geometry

__all__ = [
    "Projector",
    "DenseOperator",
    "forward_project",
    "back_project",
    "build_dense_operator",
    "DENSE_ENTRY_LIMIT",
]

DENSE_ENTRY_LIMIT = 10_000_000


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)


def _footprint_weights(pixel_edges, voxel_edges, src, mag, pitch):
    """Fraction of each pixel covered by each projected voxel interval."""
    proj = src + (voxel_edges - src) * mag
    return _overlap(pixel_edges[:-1, None], pixel_edges[1:, None],
                    proj[None, :-1], proj[None, 1:]) / pitch


class Projector:
    """Forward projection ``M x`` and its exact adjoint ``M^T y``.

    Parameters
    ----------
    geom : Geometry
    workers : int
        Threads used to process source positions. Each angle is computed
        independently and back-projections are summed in angle order, so the
        output does not depend on this number.
    """

    def __init__(self, geom: Geometry, workers: int = 1):
        self.geom = geom
        self.workers = max(1, int(workers))
        det, grid = geom.detector, geom.grid
        u_edges, v_edges = det.u_edges(), det.v_edges()
        x_edges, y_edges = grid.edges(0), grid.edges(1)
        z_mid = grid.centers(2)
        u_mid = 0.5 * (u_edges[:-1] + u_edges[1:])
        v_mid = 0.5 * (v_edges[:-1] + v_edges[1:])

        self._wx = []
        self._wy = []
        self._path = []
        for sx, sy, sz in geom.source_positions:
            mags = sz / (sz - z_mid)
            self._wx.append(np.stack([_footprint_weights(u_edges, x_edges, sx, m, det.pitch)
                                      for m in mags]))
            self._wy.append(np.stack([_footprint_weights(v_edges, y_edges, sy, m, det.pitch)
                                      for m in mags]))
            dist = np.sqrt((u_mid[:, None] - sx) ** 2 + (v_mid[None, :] - sy) ** 2 + sz ** 2)
            self._path.append(grid.dz * dist / sz)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.geom.n_data, self.geom.grid.n_voxels)

    @property
    def vol_shape(self):
        return self.geom.grid.shape

    @property
    def data_shape(self):
        return self.geom.data_shape

    def _map(self, fn, n):
        if self.workers == 1 or n == 1:
            return [fn(t) for t in range(n)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, range(n)))

    def _forward_angle(self, x, t):
        wx, wy = self._wx[t], self._wy[t]
        out = np.zeros((wx.shape[1], wy.shape[1]))
        for k in range(x.shape[2]):
            out += wx[k] @ x[:, :, k] @ wy[k].T
        return out * self._path[t]

    def _back_angle(self, y, t):
        wx, wy = self._wx[t], self._wy[t]
        weighted = y[t] * self._path[t]
        out = np.empty(self.vol_shape)
        for k in range(out.shape[2]):
            out[:, :, k] = wx[k].T @ weighted @ wy[k]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.vol_shape:
            raise ValueError(f"volume shape {x.shape} does not match grid {self.vol_shape}")
        frames = self._map(lambda t: self._forward_angle(x, t), self.geom.n_angles)
        return np.stack(frames)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.data_shape:
            raise ValueError(f"projection shape {y.shape} does not match {self.data_shape}")
        parts = self._map(lambda t: self._back_angle(y, t), self.geom.n_angles)
        out = parts[0].copy()
        for p in parts[1:]:
            out += p
        return out

    __call__ = forward


def forward_project(geom: Geometry, x: np.ndarray, workers: int = 1) -> np.ndarray:
    return Projector(geom, workers).forward(x)


def back_project(geom: Geometry, y: np.ndarray, workers: int = 1) -> np.ndarray:
    return Projector(geom, workers).adjoint(y)


class DenseOperator:
    """Explicit system matrix with the same interface as :class:`Projector`.

    Rows follow the C-order flattening of ``(n_angles, n_u, n_v)`` and
    columns the C-order flattening of ``(n_x, n_y, n_z)``.
    """

    def __init__(self, matrix: np.ndarray, vol_shape, data_shape):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.vol_shape = tuple(vol_shape)
        self.data_shape = tuple(data_shape)
        if self.matrix.shape != (int(np.prod(data_shape)), int(np.prod(vol_shape))):
            raise ValueError("matrix shape inconsistent with volume/data shapes")

    @property
    def shape(self):
        return self.matrix.shape

    def forward(self, x):
        return (self.matrix @ np.ravel(x)).reshape(self.data_shape)

    def adjoint(self, y):
        return (self.matrix.T @ np.ravel(y)).reshape(self.vol_shape)

    __call__ = forward


def build_dense_operator(geom: Geometry) -> DenseOperator:
    """Assemble the projector coefficients entry by entry.

    Written with scalar loops, independently of the vectorised
    :class:`Projector`, so the two can check each other on small grids.
    """
    det, grid = geom.detector, geom.grid
    n_rows, n_cols = geom.n_data, grid.n_voxels
    if n_rows * n_cols > DENSE_ENTRY_LIMIT:
        raise MemoryError(f"dense operator would hold {n_rows * n_cols} entries "
                          f"(limit {DENSE_ENTRY_LIMIT})")
    nx, ny, nz = grid.shape
    ox, oy, oz = grid.origin
    A = np.zeros((geom.n_angles, det.n_u, det.n_v, nx, ny, nz))
    for t, (sx, sy, sz) in enumerate(geom.source_positions):
        for a in range(det.n_u):
            u0 = det.origin[0] + a * det.pitch
            u1 = u0 + det.pitch
            for b in range(det.n_v):
                v0 = det.origin[1] + b * det.pitch
                v1 = v0 + det.pitch
                uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
                path = grid.dz * np.sqrt((uc - sx) ** 2 + (vc - sy) ** 2 + sz ** 2) / sz
                for k in range(nz):
                    z = oz + (k + 0.5) * grid.dz
                    m = sz / (sz - z)
                    for i in range(nx):
                        x0 = sx + (ox + i * grid.dx - sx) * m
                        x1 = sx + (ox + (i + 1) * grid.dx - sx) * m
                        fu = max(0.0, min(u1, x1) - max(u0, x0)) / det.pitch
                        if fu == 0.0:
                            continue
                        for j in range(ny):
                            y0 = sy + (oy + j * grid.dy - sy) * m
                            y1 = sy + (oy + (j + 1) * grid.dy - sy) * m
                            fv = max(0.0, min(v1, y1) - max(v0, y0)) / det.pitch
                            A[t, a, b, i, j, k] = path * fu * fv
    return DenseOperator(A.reshape(n_rows, n_cols), grid.shape, geom.data_shape)
