"""Discrete forward operators and exact adjoints for parallel-beam and cone-beam CT.

Ray model: interpolated ray marching (bilinear in 2D, trilinear in 3D) with a
step of half the voxel size and one central ray per detector bin. The adjoint
scatters exactly the same interpolation weights, so ``<A x, y> == <x, A^T y>``
up to floating-point accumulation. Accumulation happens in float64; stored
outputs are float32.

Coordinate conventions
----------------------
2D image of shape (ny, nx): pixel [i, j] is centered at
``x = (j - (nx-1)/2) * voxel``, ``y = (i - (ny-1)/2) * voxel``.
A view at angle psi (degrees, theta in radians) marches along direction
``d = (cos theta, sin theta)``; the detector runs along ``(-sin theta, cos theta)``.

3D volume of shape (nz, ny, nx), z-major: voxel [k, i, j] adds
``z = (k - (nz-1)/2) * voxel``. The cone source orbits in the z=0 plane at
radius L_sb; the detector plane sits L_bd behind the rotation axis with its
row axis along z and its column axis in-plane.

Sample positions along every ray sit on the absolute grid ``t = m * step``,
so restricting a call to a subset of views reproduces the corresponding rows
of the full operator bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geometry import (
    AngleSet,
    ConeBeamGeometry,
    ParallelGeometry2D,
    VolumeGrid,
    validate_cone_coverage,
    validate_parallel_coverage,
)

__all__ = [
    "Sinogram2D",
    "ProjectionStack",
    "ParallelProjector",
    "ConeProjector",
    "forward_parallel",
    "adjoint_parallel",
    "forward_cone",
    "adjoint_cone",
    "forward_view",
]


@dataclass(frozen=True)
class Sinogram2D:
    """Per-view line integrals for 2D parallel beam, shape (K, detector_pixels)."""

    data: np.ndarray
    angle_set: AngleSet

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.angle_set.count:
            raise ValueError(f"sinogram shape {self.data.shape} inconsistent with {self.angle_set.count} views")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")


@dataclass(frozen=True)
class ProjectionStack:
    """Per-view cone-beam line integrals, shape (K, detector_rows, detector_cols)."""

    data: np.ndarray
    angle_set: AngleSet
    geometry: ConeBeamGeometry

    def __post_init__(self):
        expected = (self.angle_set.count, self.geometry.detector_rows, self.geometry.detector_cols)
        if self.data.shape != expected:
            raise ValueError(f"stack shape {self.data.shape} != expected {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("projection stack contains non-finite values")


# ---------------------------------------------------------------------------
# Numba kernels (2D parallel beam)
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _par_forward_kernel(imgs, voxel, thetas, ndet, dspacing, step, radius, out):
    nb, ny, nx = imgs.shape
    nk = thetas.size
    u0 = -(ndet - 1) * 0.5 * dspacing
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    for w in prange(nb * nk):
        b = w // nk
        k = w % nk
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        for d in range(ndet):
            u = u0 + d * dspacing
            half = radius * radius - u * u
            acc = 0.0
            if half > 0.0:
                thalf = math.sqrt(half) + step
                m0 = int(math.floor(-thalf / step))
                m1 = int(math.ceil(thalf / step))
                px = -u * s
                py = u * c
                for m in range(m0, m1 + 1):
                    t = m * step
                    fx = (px + t * c) / voxel + cx
                    fy = (py + t * s) / voxel + cy
                    ix = int(math.floor(fx))
                    iy = int(math.floor(fy))
                    if ix < -1 or ix > nx - 1 or iy < -1 or iy > ny - 1:
                        continue
                    wx = fx - ix
                    wy = fy - iy
                    if 0 <= ix and 0 <= iy:
                        acc += (1.0 - wx) * (1.0 - wy) * imgs[b, iy, ix]
                    if ix + 1 <= nx - 1 and 0 <= iy:
                        acc += wx * (1.0 - wy) * imgs[b, iy, ix + 1]
                    if 0 <= ix and iy + 1 <= ny - 1:
                        acc += (1.0 - wx) * wy * imgs[b, iy + 1, ix]
                    if ix + 1 <= nx - 1 and iy + 1 <= ny - 1:
                        acc += wx * wy * imgs[b, iy + 1, ix + 1]
            out[b, k, d] = acc * step


@njit(cache=True, parallel=True)
def _par_adjoint_kernel(sinos, voxel, thetas, ndet, dspacing, step, radius, out):
    # One thread per image: views accumulate sequentially into that image, so
    # the result is bitwise reproducible for any thread count.
    nb = sinos.shape[0]
    nk = thetas.size
    ny, nx = out.shape[1], out.shape[2]
    u0 = -(ndet - 1) * 0.5 * dspacing
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    for b in prange(nb):
        for k in range(nk):
            c = math.cos(thetas[k])
            s = math.sin(thetas[k])
            for d in range(ndet):
                q = sinos[b, k, d] * step
                if q == 0.0:
                    continue
                u = u0 + d * dspacing
                half = radius * radius - u * u
                if half <= 0.0:
                    continue
                thalf = math.sqrt(half) + step
                m0 = int(math.floor(-thalf / step))
                m1 = int(math.ceil(thalf / step))
                px = -u * s
                py = u * c
                for m in range(m0, m1 + 1):
                    t = m * step
                    fx = (px + t * c) / voxel + cx
                    fy = (py + t * s) / voxel + cy
                    ix = int(math.floor(fx))
                    iy = int(math.floor(fy))
                    if ix < -1 or ix > nx - 1 or iy < -1 or iy > ny - 1:
                        continue
                    wx = fx - ix
                    wy = fy - iy
                    if 0 <= ix and 0 <= iy:
                        out[b, iy, ix] += (1.0 - wx) * (1.0 - wy) * q
                    if ix + 1 <= nx - 1 and 0 <= iy:
                        out[b, iy, ix + 1] += wx * (1.0 - wy) * q
                    if 0 <= ix and iy + 1 <= ny - 1:
                        out[b, iy + 1, ix] += (1.0 - wx) * wy * q
                    if ix + 1 <= nx - 1 and iy + 1 <= ny - 1:
                        out[b, iy + 1, ix + 1] += wx * wy * q


# ---------------------------------------------------------------------------
# Numba kernels (3D cone beam)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _trilinear_gather(vol, fz, fy, fx):
    nz, ny, nx = vol.shape
    ix = int(math.floor(fx))
    iy = int(math.floor(fy))
    iz = int(math.floor(fz))
    if ix < -1 or ix > nx - 1 or iy < -1 or iy > ny - 1 or iz < -1 or iz > nz - 1:
        return 0.0
    wx = fx - ix
    wy = fy - iy
    wz = fz - iz
    acc = 0.0
    for dz in range(2):
        z = iz + dz
        if z < 0 or z > nz - 1:
            continue
        wgtz = wz if dz == 1 else 1.0 - wz
        for dy in range(2):
            y = iy + dy
            if y < 0 or y > ny - 1:
                continue
            wgty = wy if dy == 1 else 1.0 - wy
            for dx in range(2):
                x = ix + dx
                if x < 0 or x > nx - 1:
                    continue
                wgtx = wx if dx == 1 else 1.0 - wx
                acc += wgtz * wgty * wgtx * vol[z, y, x]
    return acc


@njit(cache=True, inline="always")
def _trilinear_scatter(vol, fz, fy, fx, q):
    nz, ny, nx = vol.shape
    ix = int(math.floor(fx))
    iy = int(math.floor(fy))
    iz = int(math.floor(fz))
    if ix < -1 or ix > nx - 1 or iy < -1 or iy > ny - 1 or iz < -1 or iz > nz - 1:
        return
    wx = fx - ix
    wy = fy - iy
    wz = fz - iz
    for dz in range(2):
        z = iz + dz
        if z < 0 or z > nz - 1:
            continue
        wgtz = wz if dz == 1 else 1.0 - wz
        for dy in range(2):
            y = iy + dy
            if y < 0 or y > ny - 1:
                continue
            wgty = wy if dy == 1 else 1.0 - wy
            for dx in range(2):
                x = ix + dx
                if x < 0 or x > nx - 1:
                    continue
                wgtx = wx if dx == 1 else 1.0 - wx
                vol[z, y, x] += wgtz * wgty * wgtx * q


@njit(cache=True, parallel=True)
def _cone_forward_kernel(vol, voxel, thetas, nrows, ncols, dspacing, l_sb, l_bd, step, radius, out):
    nz, ny, nx = vol.shape
    nk = thetas.size
    u0 = -(ncols - 1) * 0.5 * dspacing
    v0 = -(nrows - 1) * 0.5 * dspacing
    cxv = (nx - 1) * 0.5
    cyv = (ny - 1) * 0.5
    czv = (nz - 1) * 0.5
    for k in prange(nk):
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        sx = l_sb * c
        sy = l_sb * s
        for r in range(nrows):
            v = v0 + r * dspacing
            for d in range(ncols):
                u = u0 + d * dspacing
                # Detector cell position and unit ray direction from the source.
                dxp = -l_bd * c - u * s - sx
                dyp = -l_bd * s + u * c - sy
                dzp = v
                norm = math.sqrt(dxp * dxp + dyp * dyp + dzp * dzp)
                ex = dxp / norm
                ey = dyp / norm
                ez = dzp / norm
                # March only near the volume's bounding sphere.
                tc = -(sx * ex + sy * ey)
                dperp2 = sx * sx + sy * sy - tc * tc
                half = radius * radius - dperp2
                acc = 0.0
                if half > 0.0:
                    w = math.sqrt(half) + step
                    m0 = int(math.floor((tc - w) / step))
                    m1 = int(math.ceil((tc + w) / step))
                    for m in range(m0, m1 + 1):
                        t = m * step
                        fx = (sx + t * ex) / voxel + cxv
                        fy = (sy + t * ey) / voxel + cyv
                        fz = (t * ez) / voxel + czv
                        acc += _trilinear_gather(vol, fz, fy, fx)
                out[k, r, d] = acc * step


@njit(cache=True, parallel=True)
def _cone_adjoint_chunk_kernel(stack, voxel, thetas, nrows, ncols, dspacing, l_sb, l_bd, step, radius, bufs):
    # One buffer per view in the chunk; the caller merges them in view order.
    nk = thetas.size
    nz, ny, nx = bufs.shape[1], bufs.shape[2], bufs.shape[3]
    u0 = -(ncols - 1) * 0.5 * dspacing
    v0 = -(nrows - 1) * 0.5 * dspacing
    cxv = (nx - 1) * 0.5
    cyv = (ny - 1) * 0.5
    czv = (nz - 1) * 0.5
    for k in prange(nk):
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        sx = l_sb * c
        sy = l_sb * s
        for r in range(nrows):
            v = v0 + r * dspacing
            for d in range(ncols):
                q = stack[k, r, d] * step
                if q == 0.0:
                    continue
                u = u0 + d * dspacing
                dxp = -l_bd * c - u * s - sx
                dyp = -l_bd * s + u * c - sy
                dzp = v
                norm = math.sqrt(dxp * dxp + dyp * dyp + dzp * dzp)
                ex = dxp / norm
                ey = dyp / norm
                ez = dzp / norm
                tc = -(sx * ex + sy * ey)
                dperp2 = sx * sx + sy * sy - tc * tc
                half = radius * radius - dperp2
                if half <= 0.0:
                    continue
                w = math.sqrt(half) + step
                m0 = int(math.floor((tc - w) / step))
                m1 = int(math.ceil((tc + w) / step))
                for m in range(m0, m1 + 1):
                    t = m * step
                    fx = (sx + t * ex) / voxel + cxv
                    fy = (sy + t * ey) / voxel + cyv
                    fz = (t * ez) / voxel + czv
                    _trilinear_scatter(bufs[k], fz, fy, fx, q)


# ---------------------------------------------------------------------------
# Operator handles
# ---------------------------------------------------------------------------

_ADJOINT_VIEW_CHUNK = 8  # fixed merge granularity keeps results thread-count independent


class ParallelProjector:
    """Forward/adjoint handle binding a 2D parallel geometry, angles, and image grid."""

    def __init__(self, geom: ParallelGeometry2D, angles: AngleSet, image_shape: tuple[int, int],
                 voxel_size: float = 1.0):
        validate_parallel_coverage(geom, image_shape[0], image_shape[1], voxel_size)
        self.geom = geom
        self.angles = angles
        self.image_shape = tuple(image_shape)
        self.voxel_size = float(voxel_size)
        self._thetas = angles.as_radians()
        self._step = 0.5 * voxel_size
        ny, nx = image_shape
        self._radius = 0.5 * math.hypot(nx * voxel_size, ny * voxel_size)

    @property
    def num_views(self) -> int:
        return self.angles.count

    @property
    def view_shape(self) -> tuple[int, ...]:
        return (self.geom.detector_pixels,)

    def forward(self, image: np.ndarray, view_indices=None) -> np.ndarray:
        """Project (ny, nx) or a batch (B, ny, nx); returns (..., K', detector) float32."""
        image = np.asarray(image)
        squeeze = image.ndim == 2
        imgs = np.ascontiguousarray(image[None] if squeeze else image, dtype=np.float32)
        if imgs.shape[-2:] != self.image_shape:
            raise ValueError(f"image shape {imgs.shape[-2:]} != projector grid {self.image_shape}")
        if not np.all(np.isfinite(imgs)):
            raise ValueError("image contains non-finite values")
        thetas = self._thetas if view_indices is None else self._thetas[np.asarray(view_indices)]
        out = np.empty((imgs.shape[0], thetas.size, self.geom.detector_pixels), dtype=np.float64)
        _par_forward_kernel(imgs, self.voxel_size, thetas, self.geom.detector_pixels,
                            self.geom.detector_spacing, self._step, self._radius, out)
        out = out.astype(np.float32)
        return out[0] if squeeze else out

    def adjoint(self, sino: np.ndarray, view_indices=None) -> np.ndarray:
        """Transpose of :meth:`forward`; accepts (K', detector) or (B, K', detector)."""
        sino = np.asarray(sino)
        squeeze = sino.ndim == 2
        sinos = np.ascontiguousarray(sino[None] if squeeze else sino, dtype=np.float32)
        thetas = self._thetas if view_indices is None else self._thetas[np.asarray(view_indices)]
        if sinos.shape[-2:] != (thetas.size, self.geom.detector_pixels):
            raise ValueError(f"sinogram shape {sinos.shape[-2:]} != ({thetas.size}, {self.geom.detector_pixels})")
        if not np.all(np.isfinite(sinos)):
            raise ValueError("sinogram contains non-finite values")
        out = np.zeros((sinos.shape[0],) + self.image_shape, dtype=np.float64)
        _par_adjoint_kernel(sinos, self.voxel_size, thetas, self.geom.detector_pixels,
                            self.geom.detector_spacing, self._step, self._radius, out)
        out = out.astype(np.float32)
        return out[0] if squeeze else out


class ConeProjector:
    """Forward/adjoint handle binding a cone-beam geometry, angles, and volume grid."""

    def __init__(self, geom: ConeBeamGeometry, angles: AngleSet, grid: VolumeGrid):
        validate_cone_coverage(geom, grid)
        self.geom = geom
        self.angles = angles
        self.grid = grid
        self._thetas = angles.as_radians()
        self._step = 0.5 * grid.voxel_size
        hx = grid.nx * grid.voxel_size / 2.0
        hy = grid.ny * grid.voxel_size / 2.0
        hz = grid.nz * grid.voxel_size / 2.0
        self._radius = math.sqrt(hx * hx + hy * hy + hz * hz)

    @property
    def num_views(self) -> int:
        return self.angles.count

    @property
    def view_shape(self) -> tuple[int, ...]:
        return (self.geom.detector_rows, self.geom.detector_cols)

    def forward(self, volume: np.ndarray, view_indices=None) -> np.ndarray:
        volume = np.ascontiguousarray(volume, dtype=np.float32)
        if volume.shape != self.grid.shape:
            raise ValueError(f"volume shape {volume.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(volume)):
            raise ValueError("volume contains non-finite values")
        thetas = self._thetas if view_indices is None else self._thetas[np.asarray(view_indices)]
        out = np.empty((thetas.size, self.geom.detector_rows, self.geom.detector_cols), dtype=np.float64)
        _cone_forward_kernel(volume, self.grid.voxel_size, thetas, self.geom.detector_rows,
                             self.geom.detector_cols, self.geom.detector_spacing,
                             self.geom.source_object_distance, self.geom.object_detector_distance,
                             self._step, self._radius, out)
        return out.astype(np.float32)

    def adjoint(self, stack: np.ndarray, view_indices=None) -> np.ndarray:
        stack = np.ascontiguousarray(stack, dtype=np.float32)
        thetas = self._thetas if view_indices is None else self._thetas[np.asarray(view_indices)]
        expected = (thetas.size, self.geom.detector_rows, self.geom.detector_cols)
        if stack.shape != expected:
            raise ValueError(f"stack shape {stack.shape} != expected {expected}")
        if not np.all(np.isfinite(stack)):
            raise ValueError("stack contains non-finite values")
        total = np.zeros(self.grid.shape, dtype=np.float64)
        for lo in range(0, thetas.size, _ADJOINT_VIEW_CHUNK):
            hi = min(lo + _ADJOINT_VIEW_CHUNK, thetas.size)
            bufs = np.zeros((hi - lo,) + self.grid.shape, dtype=np.float64)
            _cone_adjoint_chunk_kernel(stack[lo:hi], self.grid.voxel_size, thetas[lo:hi],
                                       self.geom.detector_rows, self.geom.detector_cols,
                                       self.geom.detector_spacing, self.geom.source_object_distance,
                                       self.geom.object_detector_distance, self._step, self._radius, bufs)
            for j in range(hi - lo):
                total += bufs[j]
        return total.astype(np.float32)


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------

def forward_parallel(image: np.ndarray, geom: ParallelGeometry2D, angles: AngleSet,
                     voxel_size: float = 1.0) -> Sinogram2D:
    proj = ParallelProjector(geom, angles, image.shape, voxel_size)
    return Sinogram2D(proj.forward(image), angles)


def adjoint_parallel(sino, geom: ParallelGeometry2D, angles: AngleSet,
                     image_shape: tuple[int, int], voxel_size: float = 1.0) -> np.ndarray:
    data = sino.data if isinstance(sino, Sinogram2D) else np.asarray(sino)
    proj = ParallelProjector(geom, angles, image_shape, voxel_size)
    return proj.adjoint(data)


def forward_cone(volume: np.ndarray, geom: ConeBeamGeometry, angles: AngleSet,
                 voxel_size: float = 1.0) -> ProjectionStack:
    grid = VolumeGrid(nx=volume.shape[2], ny=volume.shape[1], nz=volume.shape[0], voxel_size=voxel_size)
    proj = ConeProjector(geom, angles, grid)
    return ProjectionStack(proj.forward(volume), angles, geom)


def adjoint_cone(stack, geom: ConeBeamGeometry, angles: AngleSet, grid: VolumeGrid) -> np.ndarray:
    data = stack.data if isinstance(stack, ProjectionStack) else np.asarray(stack)
    proj = ConeProjector(geom, angles, grid)
    return proj.adjoint(data)


def forward_view(x: np.ndarray, geom, angle: float, voxel_size: float = 1.0) -> np.ndarray:
    """Single-view restriction of the forward operator.

    Concatenating the outputs over an angle set reproduces the full forward
    projection bit for bit, because sample positions do not depend on the set.
    """
    one = AngleSet((float(angle) % 360.0,))
    if isinstance(geom, ParallelGeometry2D):
        return forward_parallel(x, geom, one, voxel_size).data[0]
    if isinstance(geom, ConeBeamGeometry):
        return forward_cone(x, geom, one, voxel_size).data[0]
    raise TypeError(f"unsupported geometry {type(geom)!r}")
