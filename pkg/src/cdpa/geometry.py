"""Acquisition geometries: view-angle sets, 2D parallel beam, circular cone beam.

Angles are stored in degrees everywhere (converted to radians only inside ray
computation). All types are immutable value objects and safe to share across
threads.

Geometry JSON schema (read by the CLI via ``--geometry``)::

    {"type": "parallel2d", "detector_pixels": 96, "detector_spacing": 1.0}
    {"type": "conebeam", "detector_rows": 64, "detector_cols": 64,
     "detector_spacing": 1.0, "source_object_distance": 500.0,
     "object_detector_distance": 200.0}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AngleSet",
    "ParallelGeometry2D",
    "ConeBeamGeometry",
    "VolumeGrid",
    "uniform_angles",
    "subselect_views",
    "validate_parallel_coverage",
    "validate_cone_coverage",
    "geometry_to_json",
    "geometry_from_json",
]


@dataclass(frozen=True)
class AngleSet:
    """Strictly increasing set of view angles in degrees, all within [0, 360)."""

    angles: tuple[float, ...]

    def __post_init__(self):
        if len(self.angles) < 1:
            raise ValueError("AngleSet needs at least one angle")
        arr = np.asarray(self.angles, dtype=float)
        if np.any(arr < 0.0) or np.any(arr >= 360.0):
            raise ValueError("angles must lie in [0, 360) degrees")
        if np.any(np.diff(arr) <= 0.0):
            raise ValueError("angles must be strictly increasing")
        object.__setattr__(self, "angles", tuple(float(a) for a in arr))

    @property
    def count(self) -> int:
        return len(self.angles)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=float)

    def as_radians(self) -> np.ndarray:
        return np.deg2rad(self.as_array())

    def __len__(self) -> int:
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)


@dataclass(frozen=True)
class ParallelGeometry2D:
    """Flat 1D detector for 2D parallel-beam acquisition."""

    detector_pixels: int
    detector_spacing: float = 1.0  # mm per pixel

    def __post_init__(self):
        if self.detector_pixels < 1:
            raise ValueError("detector_pixels must be positive")
        if self.detector_spacing <= 0.0:
            raise ValueError("detector_spacing must be positive")

    @property
    def detector_width(self) -> float:
        return self.detector_pixels * self.detector_spacing


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Flat 2D detector on a circular cone-beam trajectory.

    The source rotates at radius ``source_object_distance`` (L_sb) around the
    volume center; the detector sits ``object_detector_distance`` (L_bd)
    behind the rotation axis, perpendicular to the source-axis line.
    """

    detector_rows: int
    detector_cols: int
    detector_spacing: float  # mm per pixel, square pixels
    source_object_distance: float  # L_sb, mm
    object_detector_distance: float  # L_bd, mm

    def __post_init__(self):
        if self.detector_rows < 1 or self.detector_cols < 1:
            raise ValueError("detector dimensions must be positive")
        if self.detector_spacing <= 0.0:
            raise ValueError("detector_spacing must be positive")
        if self.source_object_distance <= 0.0:
            raise ValueError("source_object_distance must be positive")
        if self.object_detector_distance < 0.0:
            raise ValueError("object_detector_distance must be nonnegative")

    @property
    def magnification(self) -> float:
        return (self.source_object_distance + self.object_detector_distance) / self.source_object_distance


@dataclass(frozen=True)
class VolumeGrid:
    """Isotropic voxel grid, array layout (nz, ny, nx), z-major."""

    nx: int
    ny: int
    nz: int
    voxel_size: float = 1.0  # mm

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)


def uniform_angles(count: int, full_range: tuple[float, float] = (0.0, 360.0)) -> AngleSet:
    """Equally spaced angles starting at ``full_range[0]`` with spacing (end-start)/count.

    The end of the range is excluded, matching a full rotation sampled without
    duplicating the 0/360 view.
    """
    start, end = float(full_range[0]), float(full_range[1])
    if count < 1:
        raise ValueError("count must be >= 1")
    if not end > start:
        raise ValueError("range end must exceed start")
    spacing = (end - start) / count
    return AngleSet(tuple(start + i * spacing for i in range(count)))


def subselect_views(available: AngleSet, n: int) -> AngleSet:
    """Pick ``n`` near-uniformly spread views from ``available``.

    Index rule: round(i * K / n) for i in 0..n-1 (half-up). Deterministic, and
    the identity when n equals the available count.
    """
    k = available.count
    if n < 1 or n > k:
        raise ValueError(f"n must be in [1, {k}], got {n}")
    idx = [math.floor(i * k / n + 0.5) for i in range(n)]
    return AngleSet(tuple(available.angles[i] for i in idx))


def validate_parallel_coverage(geom: ParallelGeometry2D, ny: int, nx: int, voxel_size: float = 1.0) -> None:
    """Reject detectors narrower than the image diagonal (rays would miss pixels)."""
    diagonal = math.hypot(nx * voxel_size, ny * voxel_size)
    if geom.detector_width < diagonal - 1e-9:
        raise ValueError(
            f"detector width {geom.detector_width:.3f} mm does not cover image diagonal {diagonal:.3f} mm"
        )


def validate_cone_coverage(geom: ConeBeamGeometry, grid: VolumeGrid) -> None:
    """Reject cone geometries whose detector misses a corner voxel at any rotation.

    The worst case over a full rotation is a corner at in-plane radius
    r = hypot(x_max, y_max) sitting closest to the source; its projection must
    land inside the detector half-extent both across (u) and along z (v).
    """
    hx = grid.nx * grid.voxel_size / 2.0
    hy = grid.ny * grid.voxel_size / 2.0
    hz = grid.nz * grid.voxel_size / 2.0
    r = math.hypot(hx, hy)
    l_sb = geom.source_object_distance
    if r >= l_sb:
        raise ValueError("volume extends past the source orbit radius")
    sdd = l_sb + geom.object_detector_distance
    # Worst in-plane offset over a full rotation: corner tangent to the fan,
    # at cos(phi) = r/L_sb. Worst vertical offset: corner nearest the source.
    u_needed = sdd * r / math.sqrt(l_sb * l_sb - r * r)
    v_needed = sdd * hz / (l_sb - r)
    half_u = geom.detector_cols * geom.detector_spacing / 2.0
    half_v = geom.detector_rows * geom.detector_spacing / 2.0
    if u_needed > half_u + 1e-9 or v_needed > half_v + 1e-9:
        raise ValueError(
            f"cone does not cover the volume corners: need half-detector "
            f"({u_needed:.2f}, {v_needed:.2f}) mm, have ({half_u:.2f}, {half_v:.2f}) mm"
        )


def geometry_to_json(geom) -> str:
    if isinstance(geom, ParallelGeometry2D):
        return json.dumps({
            "type": "parallel2d",
            "detector_pixels": geom.detector_pixels,
            "detector_spacing": geom.detector_spacing,
        })
    if isinstance(geom, ConeBeamGeometry):
        return json.dumps({
            "type": "conebeam",
            "detector_rows": geom.detector_rows,
            "detector_cols": geom.detector_cols,
            "detector_spacing": geom.detector_spacing,
            "source_object_distance": geom.source_object_distance,
            "object_detector_distance": geom.object_detector_distance,
        })
    raise TypeError(f"unknown geometry type {type(geom)!r}")


def geometry_from_json(text: str):
    doc = json.loads(text)
    kind = doc.get("type")
    if kind == "parallel2d":
        return ParallelGeometry2D(
            detector_pixels=int(doc["detector_pixels"]),
            detector_spacing=float(doc.get("detector_spacing", 1.0)),
        )
    if kind == "conebeam":
        return ConeBeamGeometry(
            detector_rows=int(doc["detector_rows"]),
            detector_cols=int(doc["detector_cols"]),
            detector_spacing=float(doc["detector_spacing"]),
            source_object_distance=float(doc["source_object_distance"]),
            object_detector_distance=float(doc["object_detector_distance"]),
        )
    raise ValueError(f"unknown geometry type {kind!r}")
