"""Phantom generation, raw-count simulation, and file persistence.

Volumes travel as a JSON sidecar plus a raw little-endian float32 payload,
z-major (slice-contiguous). All public writers are atomic: they write a
temporary file in the target directory and rename it into place.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .analytic import RawProjection
from .geometry import AngleSet, geometry_from_json, geometry_to_json
from .projector import ProjectionStack, Sinogram2D

__all__ = [
    "VolumeFormatError",
    "PhantomSpec",
    "make_phantom",
    "simulate_counts",
    "write_volume",
    "read_volume",
    "write_projections",
    "read_projections",
    "write_montage",
]

PHANTOM_KINDS = ("shepp-logan-2d", "shepp-logan-3d", "random-ellipsoids", "nested-shells")


class VolumeFormatError(ValueError):
    """Raised when a sidecar or payload fails validation; names the bad field."""


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    size: int
    seed: int = 0
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {PHANTOM_KINDS}")
        if self.size < 4:
            raise ValueError("size must be >= 4")
        lo, hi = self.intensity_range
        if not hi > lo:
            raise ValueError("intensity_range must have hi > lo")


# Classic head phantom ellipses (x0, y0, a, b, angle_deg, value), normalized so
# the summed image peaks at 1.0 in the outer rim.
_SHEPP_LOGAN_2D = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
)

# 3D extension: (x0, y0, z0, a, b, c, angle_deg about z, value).
_SHEPP_LOGAN_3D = (
    (0.0, 0.0, 0.0, 0.69, 0.92, 0.81, 0.0, 1.0),
    (0.0, -0.0184, 0.0, 0.6624, 0.874, 0.78, 0.0, -0.98),
    (0.22, 0.0, 0.0, 0.11, 0.31, 0.22, -18.0, -0.02),
    (-0.22, 0.0, 0.0, 0.16, 0.41, 0.28, 18.0, -0.02),
    (0.0, 0.35, -0.15, 0.21, 0.25, 0.41, 0.0, 0.01),
    (0.0, 0.1, 0.25, 0.046, 0.046, 0.05, 0.0, 0.01),
    (0.0, -0.1, 0.25, 0.046, 0.046, 0.05, 0.0, 0.01),
    (-0.08, -0.605, 0.0, 0.046, 0.023, 0.05, 0.0, 0.01),
    (0.0, -0.605, 0.0, 0.023, 0.023, 0.02, 0.0, 0.01),
    (0.06, -0.605, 0.0, 0.023, 0.046, 0.02, 0.0, 0.01),
)

_SUPERSAMPLE_2D = 4
_SUPERSAMPLE_3D = 2


def _grid_2d(n: int, ss: int) -> tuple[np.ndarray, np.ndarray]:
    # Supersampled normalized coordinates in [-1, 1], cell-centered.
    coords = (np.arange(n * ss) + 0.5) / (n * ss) * 2.0 - 1.0
    return np.meshgrid(coords, coords, indexing="xy")


def _downsample(arr: np.ndarray, ss: int, ndim: int) -> np.ndarray:
    if ss == 1:
        return arr
    if ndim == 2:
        n0, n1 = arr.shape[0] // ss, arr.shape[1] // ss
        return arr.reshape(n0, ss, n1, ss).mean(axis=(1, 3))
    n0, n1, n2 = arr.shape[0] // ss, arr.shape[1] // ss, arr.shape[2] // ss
    return arr.reshape(n0, ss, n1, ss, n2, ss).mean(axis=(1, 3, 5))


def _ellipses_image(n: int, table, ss: int) -> np.ndarray:
    xx, yy = _grid_2d(n, ss)
    img = np.zeros_like(xx)
    for x0, y0, a, b, ang, val in table:
        th = math.radians(ang)
        xr = (xx - x0) * math.cos(th) + (yy - y0) * math.sin(th)
        yr = -(xx - x0) * math.sin(th) + (yy - y0) * math.cos(th)
        img += val * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return _downsample(img, ss, 2)


def _ellipsoids_volume(n: int, table, ss: int) -> np.ndarray:
    coords = (np.arange(n * ss) + 0.5) / (n * ss) * 2.0 - 1.0
    zz = coords[:, None, None]
    yy = coords[None, :, None]
    xx = coords[None, None, :]
    vol = np.zeros((n * ss, n * ss, n * ss))
    for x0, y0, z0, a, b, c, ang, val in table:
        th = math.radians(ang)
        xr = (xx - x0) * math.cos(th) + (yy - y0) * math.sin(th)
        yr = -(xx - x0) * math.sin(th) + (yy - y0) * math.cos(th)
        zr = zz - z0
        vol += val * ((xr / a) ** 2 + (yr / b) ** 2 + (zr / c) ** 2 <= 1.0)
    return _downsample(vol, ss, 3)


def _random_ellipsoid_table(rng: np.random.Generator, three_d: bool):
    count = int(rng.integers(5, 10))
    rows = []
    # One enclosing body first, then smaller internal features.
    if three_d:
        rows.append((0.0, 0.0, 0.0, 0.82, 0.82, 0.82, 0.0, 0.35))
    else:
        rows.append((0.0, 0.0, 0.82, 0.82, 0.0, 0.35))
    for _ in range(count):
        axes = rng.uniform(0.08, 0.30, size=3 if three_d else 2)
        margin = 0.9 - float(axes.max())
        center = rng.uniform(-margin, margin, size=3 if three_d else 2)
        ang = float(rng.uniform(0.0, 180.0))
        val = float(rng.uniform(-0.25, 0.45))
        if three_d:
            rows.append((center[0], center[1], center[2], axes[0], axes[1], axes[2], ang, val))
        else:
            rows.append((center[0], center[1], axes[0], axes[1], ang, val))
    return rows


def _nested_shells(n: int, rng: np.random.Generator, ss: int) -> np.ndarray:
    coords = (np.arange(n * ss) + 0.5) / (n * ss) * 2.0 - 1.0
    zz = coords[:, None, None]
    yy = coords[None, :, None]
    xx = coords[None, None, :]
    # Slightly anisotropic radius so the shells are not perfect spheres.
    stretch = rng.uniform(0.85, 1.0, size=3)
    r = np.sqrt((xx / stretch[0]) ** 2 + (yy / stretch[1]) ** 2 + (zz / stretch[2]) ** 2)
    vol = np.zeros_like(r)
    shell_edges = (0.88, 0.78)  # outer hull
    vol += 0.9 * ((r <= shell_edges[0]) & (r >= shell_edges[1]))
    vol += 0.25 * (r < shell_edges[1])  # flesh
    inner = rng.uniform(0.30, 0.45)
    vol += 0.35 * (r < inner)  # core
    # A few radial partitions cutting the flesh, like septa.
    for _ in range(int(rng.integers(2, 5))):
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        dist = np.abs(xx * normal[0] + yy * normal[1] + zz * normal[2])
        vol += 0.3 * ((dist < 0.025) & (r < shell_edges[1]) & (r > inner))
    return _downsample(np.clip(vol, 0.0, 1.0), ss, 3)


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Generate a deterministic phantom in ``spec.intensity_range``; float32.

    2D kinds return (n, n); 3D kinds return (n, n, n) z-major.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed))
    n = spec.size
    if spec.kind == "shepp-logan-2d":
        base = _ellipses_image(n, _SHEPP_LOGAN_2D, _SUPERSAMPLE_2D)
    elif spec.kind == "shepp-logan-3d":
        base = _ellipsoids_volume(n, _SHEPP_LOGAN_3D, _SUPERSAMPLE_3D)
    elif spec.kind == "random-ellipsoids":
        table = _random_ellipsoid_table(rng, three_d=True)
        base = np.clip(_ellipsoids_volume(n, table, _SUPERSAMPLE_3D), 0.0, 1.0)
    elif spec.kind == "nested-shells":
        base = _nested_shells(n, rng, _SUPERSAMPLE_3D)
    else:  # pragma: no cover - guarded by PhantomSpec
        raise ValueError(spec.kind)
    lo, hi = spec.intensity_range
    return (lo + np.clip(base, 0.0, 1.0) * (hi - lo)).astype(np.float32)


def simulate_counts(projections: np.ndarray, i0_level: float, i1_level: float,
                    photon_count: float = 0.0, seed: int = 0) -> RawProjection:
    """Invert the Beer-Lambert correction into raw counts, optionally noisy.

    Counts are ``I = I0 + (I1 - I0) * exp(-P)`` with Gaussian noise of standard
    deviation ``sqrt(I / photon_count)`` per pixel. ``photon_count <= 0`` means
    noiseless.
    """
    proj = np.asarray(projections, dtype=np.float64)
    if not np.all(np.isfinite(proj)):
        raise ValueError("projections must be finite")
    if np.any(proj < 0):
        raise ValueError("projections must be nonnegative line integrals")
    if not i1_level > i0_level:
        raise ValueError("flat level must exceed dark level")
    clean = i0_level + (i1_level - i0_level) * np.exp(-proj)
    if photon_count and photon_count > 0:
        rng = np.random.Generator(np.random.Philox(seed))
        noisy = clean + rng.standard_normal(clean.shape) * np.sqrt(clean / photon_count)
        counts = noisy
    else:
        counts = clean
    return RawProjection(
        counts=counts,
        dark_field=np.full_like(counts, float(i0_level)),
        flat_field=np.full_like(counts, float(i1_level)),
    )


# ---------------------------------------------------------------------------
# Volume and projection files
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _payload_path(sidecar_path: str, sidecar: dict) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(sidecar_path)), sidecar["data"])


def write_volume(sidecar_path: str, volume: np.ndarray, voxel_size_mm: float = 1.0) -> None:
    """Write a (nz, ny, nx) volume (or a 2D image as a 1-slice volume)."""
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 2:
        vol = vol[None]
    if vol.ndim != 3:
        raise ValueError("volume must be 2D or 3D")
    stem = os.path.splitext(os.path.basename(sidecar_path))[0]
    sidecar = {
        "shape": [int(s) for s in vol.shape],
        "voxel_size_mm": float(voxel_size_mm),
        "dtype": "f32le",
        "order": "z-major",
        "data": stem + ".raw",
    }
    _atomic_write_bytes(_payload_path(sidecar_path, sidecar), vol.astype("<f4").tobytes(order="C"))
    _atomic_write_bytes(sidecar_path, (json.dumps(sidecar, indent=2) + "\n").encode())


def read_volume(sidecar_path: str) -> tuple[np.ndarray, float]:
    """Read a volume written by :func:`write_volume`; returns (array, voxel_size_mm)."""
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    for fieldname in ("shape", "voxel_size_mm", "dtype", "order", "data"):
        if fieldname not in sidecar:
            raise VolumeFormatError(f"sidecar missing field {fieldname!r}")
    if sidecar["dtype"] != "f32le":
        raise VolumeFormatError(f"unsupported dtype {sidecar['dtype']!r} in field 'dtype'")
    if sidecar["order"] != "z-major":
        raise VolumeFormatError(f"unsupported order {sidecar['order']!r} in field 'order'")
    shape = tuple(int(s) for s in sidecar["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"bad field 'shape': {sidecar['shape']!r}")
    payload = _payload_path(sidecar_path, sidecar)
    expected = shape[0] * shape[1] * shape[2] * 4
    actual = os.path.getsize(payload)
    if actual != expected:
        raise VolumeFormatError(
            f"payload size {actual} does not match field 'shape' {shape} ({expected} bytes)")
    vol = np.fromfile(payload, dtype="<f4").reshape(shape)
    return vol, float(sidecar["voxel_size_mm"])


def write_projections(sidecar_path: str, data, angles: AngleSet, geometry=None,
                      voxel_size_mm: float = 1.0) -> None:
    """Write a sinogram (K, D) or projection stack (K, R, C) with its sidecar."""
    if isinstance(data, Sinogram2D):
        arr, angles = data.data, data.angle_set
    elif isinstance(data, ProjectionStack):
        arr, angles, geometry = data.data, data.angle_set, data.geometry
    else:
        arr = np.asarray(data)
    arr = arr.astype(np.float32)
    stem = os.path.splitext(os.path.basename(sidecar_path))[0]
    sidecar = {
        "shape": [int(s) for s in arr.shape],
        "angles_deg": [float(a) for a in angles],
        "geometry": json.loads(geometry_to_json(geometry)) if geometry is not None else None,
        "voxel_size_mm": float(voxel_size_mm),
        "dtype": "f32le",
        "data": stem + ".raw",
    }
    _atomic_write_bytes(_payload_path(sidecar_path, sidecar), arr.astype("<f4").tobytes(order="C"))
    _atomic_write_bytes(sidecar_path, (json.dumps(sidecar, indent=2) + "\n").encode())


def read_projections(sidecar_path: str):
    """Read projections; returns (array, AngleSet, geometry-or-None, voxel_size_mm)."""
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    for fieldname in ("shape", "angles_deg", "dtype", "data"):
        if fieldname not in sidecar:
            raise VolumeFormatError(f"sidecar missing field {fieldname!r}")
    if sidecar["dtype"] != "f32le":
        raise VolumeFormatError(f"unsupported dtype {sidecar['dtype']!r} in field 'dtype'")
    shape = tuple(int(s) for s in sidecar["shape"])
    payload = _payload_path(sidecar_path, sidecar)
    expected = int(np.prod(shape)) * 4
    if os.path.getsize(payload) != expected:
        raise VolumeFormatError(f"payload size does not match field 'shape' {shape}")
    arr = np.fromfile(payload, dtype="<f4").reshape(shape)
    angles = AngleSet(tuple(float(a) for a in sidecar["angles_deg"]))
    geom = geometry_from_json(json.dumps(sidecar["geometry"])) if sidecar.get("geometry") else None
    return arr, angles, geom, float(sidecar.get("voxel_size_mm", 1.0))


# ---------------------------------------------------------------------------
# Montage export
# ---------------------------------------------------------------------------

_AXIS_NAMES = ("axial", "coronal", "sagittal")


def write_montage(volume: np.ndarray, out_prefix: str, window: tuple[float, float] = (0.0, 1.0),
                  axes=(0, 1, 2)) -> dict[str, str]:
    """Export PNG slice grids along the requested axes.

    Each montage is a ceil(sqrt(S)) x ceil(sqrt(S)) grid of S slices windowed
    to ``window``; returns {axis_name: path}.
    """
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 2:
        vol = vol[None]
    lo, hi = window
    if not hi > lo:
        raise ValueError("window must have hi > lo")
    paths: dict[str, str] = {}
    for ax in axes:
        slices = np.moveaxis(vol, ax, 0)
        count = slices.shape[0]
        rows = int(math.ceil(math.sqrt(count)))
        cols = int(math.ceil(count / rows))
        h, w = slices.shape[1], slices.shape[2]
        canvas = np.zeros((rows * h, cols * w), dtype=np.float32)
        for s in range(count):
            r, c = divmod(s, cols)
            canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = slices[s]
        scaled = np.clip((canvas - lo) / (hi - lo), 0.0, 1.0)
        img = Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8), mode="L")
        path = f"{out_prefix}_{_AXIS_NAMES[ax]}.png"
        tmp = path + ".tmp"
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
        paths[_AXIS_NAMES[ax]] = path
    return paths
