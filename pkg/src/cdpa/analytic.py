"""Analytic reconstruction: FBP for parallel beam, FDK for circular cone beam.

Also hosts the Beer-Lambert raw-count correction. Filtering happens in the
frequency domain on sinogram rows zero-padded to the next power of two at
least twice the detector width; backprojection carries a pi/K angular weight
(full-scan convention, no short-scan weighting).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geometry import ParallelGeometry2D, VolumeGrid
from .projector import ProjectionStack, Sinogram2D

__all__ = [
    "RawProjection",
    "FilterSpec",
    "beer_lambert",
    "fbp",
    "fdk",
]

# Transmittance below this is treated as detector saturation and clipped.
TRANSMITTANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class RawProjection:
    """Raw detector counts with dark-field and flat-field calibration frames."""

    counts: np.ndarray
    dark_field: np.ndarray
    flat_field: np.ndarray

    def __post_init__(self):
        if not (self.counts.shape == self.dark_field.shape == self.flat_field.shape):
            raise ValueError("counts, dark_field, flat_field must share one shape")
        if not np.all(self.flat_field > self.dark_field):
            raise ValueError("flat field must exceed dark field everywhere")


@dataclass(frozen=True)
class FilterSpec:
    """Ramp filter choice: plain ram-lak or Hann-windowed, with a Nyquist cutoff."""

    kind: str = "ram-lak"
    cutoff: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ram-lak", "hann"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if not 0.0 < self.cutoff <= 1.0:
            raise ValueError("cutoff must lie in (0, 1]")


def beer_lambert(raw: RawProjection) -> tuple[np.ndarray, int]:
    """Convert counts to line integrals, -ln((I - I0)/(I1 - I0)).

    Transmittance is clipped below at ``TRANSMITTANCE_FLOOR`` before the log;
    returns the corrected array and the number of saturated (clipped) pixels.
    """
    span = raw.flat_field - raw.dark_field
    trans = (raw.counts - raw.dark_field) / span
    saturated = int(np.count_nonzero(trans < TRANSMITTANCE_FLOOR))
    trans = np.maximum(trans, TRANSMITTANCE_FLOOR)
    return -np.log(trans), saturated


# ---------------------------------------------------------------------------
# Ramp filtering
# ---------------------------------------------------------------------------

def _ramp_filter_rows(rows: np.ndarray, spacing: float, filt: FilterSpec) -> np.ndarray:
    """Filter the last axis of ``rows`` with a (windowed) ramp; returns float64."""
    n = rows.shape[-1]
    padded = 1 << max(int(math.ceil(math.log2(max(2 * n, 2)))), 1)
    freqs = np.fft.rfftfreq(padded, d=spacing)
    kernel = np.abs(freqs)
    nyquist = 0.5 / spacing
    cutoff = filt.cutoff * nyquist
    if filt.kind == "hann":
        window = np.where(freqs <= cutoff, 0.5 * (1.0 + np.cos(np.pi * freqs / cutoff)), 0.0)
        kernel = kernel * window
    else:
        kernel = np.where(freqs <= cutoff + 1e-12, kernel, 0.0)
    spec = np.fft.rfft(rows.astype(np.float64), n=padded, axis=-1)
    out = np.fft.irfft(spec * kernel, n=padded, axis=-1)
    return out[..., :n]


# ---------------------------------------------------------------------------
# Backprojection kernels (interpolating, voxel-driven)
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _bp_parallel_kernel(filtered, thetas, ndet, dspacing, voxel, out):
    nk = thetas.size
    ny, nx = out.shape
    u0 = -(ndet - 1) * 0.5 * dspacing
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    for i in prange(ny):
        y = (i - cy) * voxel
        for j in range(nx):
            x = (j - cx) * voxel
            acc = 0.0
            for k in range(nk):
                u = -x * math.sin(thetas[k]) + y * math.cos(thetas[k])
                f = (u - u0) / dspacing
                d = int(math.floor(f))
                if d < -1 or d > ndet - 1:
                    continue
                w = f - d
                val = 0.0
                if d >= 0:
                    val += (1.0 - w) * filtered[k, d]
                if d + 1 <= ndet - 1:
                    val += w * filtered[k, d + 1]
                acc += val
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _bp_fdk_kernel(filtered, thetas, nrows, ncols, du_virt, dv_virt, l_sb, voxel, out):
    # filtered rows live on the virtual detector through the rotation axis.
    nk = thetas.size
    nz, ny, nx = out.shape
    u0 = -(ncols - 1) * 0.5 * du_virt
    v0 = -(nrows - 1) * 0.5 * dv_virt
    cx = (nx - 1) * 0.5
    cy = (ny - 1) * 0.5
    cz = (nz - 1) * 0.5
    for iz in prange(nz):
        z = (iz - cz) * voxel
        for iy in range(ny):
            y = (iy - cy) * voxel
            for ix in range(nx):
                x = (ix - cx) * voxel
                acc = 0.0
                for k in range(nk):
                    c = math.cos(thetas[k])
                    s = math.sin(thetas[k])
                    big_u = l_sb - (x * c + y * s)
                    if big_u <= 1e-9:
                        continue
                    p = l_sb * (-x * s + y * c) / big_u
                    q = l_sb * z / big_u
                    fu = (p - u0) / du_virt
                    fv = (q - v0) / dv_virt
                    cu = int(math.floor(fu))
                    cv = int(math.floor(fv))
                    if cu < -1 or cu > ncols - 1 or cv < -1 or cv > nrows - 1:
                        continue
                    wu = fu - cu
                    wv = fv - cv
                    val = 0.0
                    if cu >= 0 and cv >= 0:
                        val += (1.0 - wu) * (1.0 - wv) * filtered[k, cv, cu]
                    if cu + 1 <= ncols - 1 and cv >= 0:
                        val += wu * (1.0 - wv) * filtered[k, cv, cu + 1]
                    if cu >= 0 and cv + 1 <= nrows - 1:
                        val += (1.0 - wu) * wv * filtered[k, cv + 1, cu]
                    if cu + 1 <= ncols - 1 and cv + 1 <= nrows - 1:
                        val += wu * wv * filtered[k, cv + 1, cu + 1]
                    weight = (l_sb / big_u) * (l_sb / big_u)
                    acc += weight * val
                out[iz, iy, ix] = acc


# ---------------------------------------------------------------------------
# Public reconstructions
# ---------------------------------------------------------------------------

def fbp(sino: Sinogram2D, geom: ParallelGeometry2D, image_shape: tuple[int, int],
        filt: FilterSpec = FilterSpec(), voxel_size: float = 1.0) -> np.ndarray:
    """Filtered backprojection onto an (ny, nx) grid; float32 output."""
    if sino.angle_set.count < 1:
        raise ValueError("need at least one view")
    filtered = _ramp_filter_rows(sino.data, geom.detector_spacing, filt)
    out = np.zeros(image_shape, dtype=np.float64)
    _bp_parallel_kernel(filtered, sino.angle_set.as_radians(), geom.detector_pixels,
                        geom.detector_spacing, voxel_size, out)
    out *= math.pi / sino.angle_set.count
    return out.astype(np.float32)


def fdk(stack: ProjectionStack, grid: VolumeGrid, filt: FilterSpec = FilterSpec()) -> np.ndarray:
    """Feldkamp reconstruction on a circular trajectory; float32 (nz, ny, nx) output.

    Steps: rescale to the virtual detector through the rotation axis, apply the
    cosine weight L_sb/sqrt(L_sb^2 + u^2 + v^2), ramp-filter each detector row,
    then backproject with the (L_sb/U)^2 distance weight and pi/K scaling.
    """
    geom = stack.geometry
    angles = stack.angle_set
    if angles.count < 1:
        raise ValueError("need at least one view")
    mag = geom.magnification
    du = geom.detector_spacing / mag
    dv = geom.detector_spacing / mag
    u = (np.arange(geom.detector_cols) - (geom.detector_cols - 1) * 0.5) * du
    v = (np.arange(geom.detector_rows) - (geom.detector_rows - 1) * 0.5) * dv
    l_sb = geom.source_object_distance
    cosw = l_sb / np.sqrt(l_sb ** 2 + u[None, :] ** 2 + v[:, None] ** 2)
    weighted = stack.data.astype(np.float64) * cosw[None]
    filtered = _ramp_filter_rows(weighted, du, filt)
    out = np.zeros(grid.shape, dtype=np.float64)
    _bp_fdk_kernel(filtered, angles.as_radians(), geom.detector_rows, geom.detector_cols,
                   du, dv, l_sb, grid.voxel_size, out)
    out *= math.pi / angles.count
    return out.astype(np.float32)
