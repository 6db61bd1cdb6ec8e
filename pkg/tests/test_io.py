import json
import os

import numpy as np
import pytest
from PIL import Image

from cdpa.analytic import beer_lambert
from cdpa.geometry import ConeBeamGeometry, ParallelGeometry2D, uniform_angles
from cdpa.io import (
    PhantomSpec,
    VolumeFormatError,
    make_phantom,
    read_projections,
    read_volume,
    simulate_counts,
    write_montage,
    write_projections,
    write_volume,
)


class TestPhantoms:
    def test_shepp_logan_2d_range(self):
        ph = make_phantom(PhantomSpec("shepp-logan-2d", 64))
        assert ph.shape == (64, 64)
        assert ph.max() <= 1.0 + 1e-6
        assert ph.min() >= 0.0
        assert ph.max() > 0.9  # skull rim present

    def test_deterministic(self):
        a = make_phantom(PhantomSpec("random-ellipsoids", 32, seed=5))
        b = make_phantom(PhantomSpec("random-ellipsoids", 32, seed=5))
        assert np.array_equal(a, b)
        c = make_phantom(PhantomSpec("random-ellipsoids", 32, seed=6))
        assert not np.array_equal(a, c)

    def test_ellipsoids_inside_grid(self):
        for seed in range(5):
            vol = make_phantom(PhantomSpec("random-ellipsoids", 32, seed=seed))
            border = np.concatenate([
                vol[0].ravel(), vol[-1].ravel(),
                vol[:, 0].ravel(), vol[:, -1].ravel(),
                vol[:, :, 0].ravel(), vol[:, :, -1].ravel(),
            ])
            assert np.all(border == 0.0)

    def test_intensity_range_scaling(self):
        ph = make_phantom(PhantomSpec("nested-shells", 32, seed=1, intensity_range=(0.0, 0.084)))
        assert ph.max() <= 0.084 + 1e-6
        assert ph.min() >= 0.0

    def test_shepp_logan_3d(self):
        vol = make_phantom(PhantomSpec("shepp-logan-3d", 32))
        assert vol.shape == (32, 32, 32)
        assert vol.max() <= 1.0 + 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PhantomSpec("cube", 32)


class TestSimulateCounts:
    def test_inverse_pair(self):
        proj = np.linspace(0.0, 3.0, 64).reshape(8, 8)
        raw = simulate_counts(proj, 50.0, 5000.0, photon_count=0.0)
        rec, _ = beer_lambert(raw)
        assert np.abs(rec - proj).max() < 1e-6

    def test_zero_projection_gives_flat(self):
        raw = simulate_counts(np.zeros((4, 4)), 50.0, 5000.0, photon_count=0.0)
        assert np.allclose(raw.counts, 5000.0)

    def test_noise_std_matches(self):
        proj = np.full((400, 250), 1.0)
        photons = 2000.0
        raw = simulate_counts(proj, 100.0, 10000.0, photon_count=photons, seed=3)
        clean = 100.0 + 9900.0 * np.exp(-1.0)
        expected_std = np.sqrt(clean / photons)
        measured = raw.counts.std()
        assert abs(measured - expected_std) / expected_std < 0.05

    def test_bad_levels(self):
        with pytest.raises(ValueError):
            simulate_counts(np.zeros((2, 2)), 100.0, 100.0)
        with pytest.raises(ValueError):
            simulate_counts(np.full((2, 2), -1.0), 0.0, 100.0)


class TestVolumeFiles:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = rng.standard_normal((5, 6, 7)).astype(np.float32)
        path = str(tmp_path / "vol.json")
        write_volume(path, vol, voxel_size_mm=0.5)
        back, voxel = read_volume(path)
        assert voxel == 0.5
        assert np.array_equal(back, vol)

    def test_2d_written_as_single_slice(self, tmp_path):
        img = np.ones((8, 8), np.float32)
        path = str(tmp_path / "img.json")
        write_volume(path, img)
        back, _ = read_volume(path)
        assert back.shape == (1, 8, 8)

    def test_payload_size_mismatch(self, tmp_path):
        vol = np.zeros((4, 4, 4), np.float32)
        path = str(tmp_path / "vol.json")
        write_volume(path, vol)
        with open(path) as fh:
            sidecar = json.load(fh)
        sidecar["shape"] = [4, 4, 5]
        with open(path, "w") as fh:
            json.dump(sidecar, fh)
        with pytest.raises(VolumeFormatError, match="shape"):
            read_volume(path)

    def test_missing_field(self, tmp_path):
        path = str(tmp_path / "vol.json")
        write_volume(path, np.zeros((2, 2, 2), np.float32))
        with open(path) as fh:
            sidecar = json.load(fh)
        del sidecar["voxel_size_mm"]
        with open(path, "w") as fh:
            json.dump(sidecar, fh)
        with pytest.raises(VolumeFormatError, match="voxel_size_mm"):
            read_volume(path)

    def test_no_temp_files_left(self, tmp_path):
        path = str(tmp_path / "vol.json")
        write_volume(path, np.zeros((2, 2, 2), np.float32))
        assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]


class TestProjectionFiles:
    def test_round_trip_with_geometry(self, tmp_path):
        rng = np.random.default_rng(1)
        data = rng.standard_normal((6, 16, 16)).astype(np.float32)
        geom = ConeBeamGeometry(16, 16, 1.0, 100.0, 50.0)
        path = str(tmp_path / "proj.json")
        write_projections(path, data, uniform_angles(6), geom)
        back, angles, geom2, voxel = read_projections(path)
        assert np.array_equal(back, data)
        assert angles.angles == uniform_angles(6).angles
        assert geom2 == geom

    def test_parallel_sidecar(self, tmp_path):
        data = np.zeros((4, 12), np.float32)
        geom = ParallelGeometry2D(12, 1.0)
        path = str(tmp_path / "sino.json")
        write_projections(path, data, uniform_angles(4), geom)
        _, _, geom2, _ = read_projections(path)
        assert geom2 == geom


class TestMontage:
    def test_three_axes_dimensions(self, tmp_path):
        vol = np.random.default_rng(0).random((48, 48, 48)).astype(np.float32)
        paths = write_montage(vol, str(tmp_path / "m"), window=(0.0, 1.0))
        assert set(paths) == {"axial", "coronal", "sagittal"}
        rows = cols = 7  # ceil(sqrt(48))
        for p in paths.values():
            img = Image.open(p)
            assert img.size == (cols * 48, rows * 48)

    def test_window_validation(self, tmp_path):
        with pytest.raises(ValueError):
            write_montage(np.zeros((4, 4, 4)), str(tmp_path / "m"), window=(1.0, 1.0))
