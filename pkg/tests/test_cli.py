import json
import os

import numpy as np
import pytest

from cdpa.cli import main
from cdpa.denoiser import save_weights
from cdpa.experiment import METHOD_ROWS
from cdpa.geometry import ParallelGeometry2D, geometry_to_json
from cdpa.io import read_volume
from conftest import random_weight_store


@pytest.fixture(scope="module")
def weight_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("weights")
    diff = str(d / "diffusion.cdpa")
    den = str(d / "denoiser.cdpa")
    save_weights(diff, random_weight_store("noise-prediction", seed=31))
    save_weights(den, random_weight_store("denoise", seed=37))
    return diff, den


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """phantom -> project -> corrupt chain shared by the command tests."""
    d = tmp_path_factory.mktemp("pipe")
    vol = str(d / "gt.json")
    geo = str(d / "geom.json")
    proj = str(d / "proj.json")
    noisy = str(d / "noisy.json")
    assert main(["phantom", "--kind", "shepp-logan-2d", "--size", "32",
                 "--seed", "3", "--out", vol]) == 0
    with open(geo, "w") as fh:
        fh.write(geometry_to_json(ParallelGeometry2D(detector_pixels=64, detector_spacing=0.75)))
    assert main(["project", "--volume", vol, "--geometry", geo,
                 "--views", "12", "--out", proj]) == 0
    assert main(["corrupt", "--in", proj, "--photons", "0", "--out", noisy]) == 0
    return {"dir": d, "vol": vol, "geom": geo, "proj": proj, "noisy": noisy}


class TestPipelineCommands:
    def test_phantom_manifest_written(self, pipeline_dir):
        assert os.path.exists(pipeline_dir["vol"] + ".manifest.json")

    def test_corrupt_noiseless_round_trip(self, pipeline_dir):
        from cdpa.io import read_projections
        a, _, _, _ = read_projections(pipeline_dir["proj"])
        b, _, _, _ = read_projections(pipeline_dir["noisy"])
        assert np.abs(a - b).max() < 1e-5

    def test_recon_fbp_and_eval(self, pipeline_dir):
        out = str(pipeline_dir["dir"] / "fbp.json")
        assert main(["recon", "--method", "fbp", "--measurements", pipeline_dir["proj"],
                     "--size", "32", "--out", out]) == 0
        report = str(pipeline_dir["dir"] / "metrics.json")
        assert main(["eval", "--ref", pipeline_dir["vol"], "--in", out,
                     "--clamp", "0", "1", "--json", report]) == 0
        doc = json.load(open(report))
        assert doc["psnr_db"] > 10.0
        assert -1.0 <= doc["ssim2d"] <= 1.0

    def test_recon_gd_and_finetune(self, pipeline_dir):
        out = str(pipeline_dir["dir"] / "gd.json")
        assert main(["recon", "--method", "gd", "--measurements", pipeline_dir["proj"],
                     "--size", "32", "--epochs", "30", "--lr", "0.02",
                     "--seed", "1", "--out", out]) == 0
        ft = str(pipeline_dir["dir"] / "gd_ft.json")
        assert main(["finetune", "--in", out, "--measurements", pipeline_dir["proj"],
                     "--steps", "10", "--lr", "0.001", "--out", ft]) == 0
        assert read_volume(ft)[0].shape == (1, 32, 32)

    def test_recon_denoise_and_cdpa(self, pipeline_dir, weight_files):
        diff, den = weight_files
        out = str(pipeline_dir["dir"] / "den.json")
        assert main(["recon", "--method", "denoise", "--measurements", pipeline_dir["proj"],
                     "--size", "32", "--weights", den, "--slice-index", "4",
                     "--out", out]) == 0
        out2 = str(pipeline_dir["dir"] / "cdpa.json")
        assert main(["recon", "--method", "cdpa", "--measurements", pipeline_dir["proj"],
                     "--size", "32", "--weights", diff, "--steps", "5",
                     "--guidance-epochs", "1", "--guidance-lr", "0.01",
                     "--out", out2]) == 0
        assert read_volume(out2)[0].shape == (1, 32, 32)

    def test_posterior_command(self, pipeline_dir, weight_files):
        diff, _ = weight_files
        d = pipeline_dir["dir"]
        report = str(d / "post.json")
        assert main(["posterior", "--measurements", pipeline_dir["proj"],
                     "--weights", diff, "--method", "cdpa", "--samples", "3",
                     "--size", "32", "--steps", "4", "--guidance-epochs", "1",
                     "--guidance-lr", "0.01", "--ref", pipeline_dir["vol"],
                     "--mean-out", str(d / "mean.json"),
                     "--std-out", str(d / "std.raw"), "--report", report]) == 0
        doc = json.load(open(report))
        assert len(doc["seeds"]) == 3
        assert "uncertainty" in doc
        assert os.path.getsize(str(d / "std.raw")) == 32 * 32 * 4


class TestExitCodes:
    def test_missing_file_is_io_error(self, tmp_path):
        assert main(["recon", "--method", "fbp", "--measurements",
                     str(tmp_path / "nope.json"), "--size", "32",
                     "--out", str(tmp_path / "o.json")]) == 4

    def test_bad_method_is_config_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["recon", "--method", "warp", "--measurements", "x", "--size", "8",
                  "--out", "y"])
        assert exc.value.code == 2

    def test_bad_phantom_kind(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["phantom", "--kind", "cube", "--out", str(tmp_path / "o.json")])
        assert exc.value.code == 2

    def test_corrupt_bad_levels(self, pipeline_dir, tmp_path):
        code = main(["corrupt", "--in", pipeline_dir["proj"], "--i0", "100",
                     "--i1", "100", "--out", str(tmp_path / "o.json")])
        assert code == 2

    def test_config_file_merge(self, pipeline_dir, tmp_path):
        cfg = str(tmp_path / "cfg.json")
        with open(cfg, "w") as fh:
            json.dump({"kind": "shepp-logan-2d", "size": 16, "seed": 9}, fh)
        out = str(tmp_path / "p.json")
        assert main(["phantom", "--config", cfg, "--size", "32", "--out", out]) == 0
        vol, _ = read_volume(out)
        assert vol.shape == (1, 32, 32)  # explicit flag beat the config size

    def test_unknown_config_key(self, tmp_path):
        cfg = str(tmp_path / "cfg.json")
        with open(cfg, "w") as fh:
            json.dump({"frobnicate": 1}, fh)
        assert main(["phantom", "--config", cfg, "--out", str(tmp_path / "o.json")]) == 2


@pytest.fixture(scope="module")
def tiny_experiment(tmp_path_factory, weight_files):
    diff, den = weight_files
    out1 = str(tmp_path_factory.mktemp("exp1"))
    out2 = str(tmp_path_factory.mktemp("exp2"))
    argv = ["experiment", "--geometry", "parallel", "--size", "32", "--views", "8",
            "--test-count", "1", "--seed", "5", "--samples", "2", "--steps", "4",
            "--guidance-epochs", "1", "--gd-epochs", "10", "--ft-steps", "5",
            "--diffusion-weights", diff, "--denoiser-weights", den]
    assert main(argv + ["--out-dir", out1]) == 0
    assert main(argv + ["--out-dir", out2]) == 0
    return out1, out2


class TestExperiment:
    def test_all_method_rows_present(self, tiny_experiment):
        out1, _ = tiny_experiment
        doc = json.load(open(os.path.join(out1, "results.json")))
        assert set(doc["rows"]) == set(METHOD_ROWS)
        assert set(doc["summary"]) == set(METHOD_ROWS)
        table = open(os.path.join(out1, "table.md")).read()
        assert table.count("|") >= 10

    def test_bitwise_deterministic(self, tiny_experiment):
        out1, out2 = tiny_experiment
        for name in ("results.json", "manifest.json", "table.md"):
            a = open(os.path.join(out1, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b, f"{name} differs between identical runs"

    def test_manifest_contents(self, tiny_experiment):
        out1, _ = tiny_experiment
        man = json.load(open(os.path.join(out1, "manifest.json")))
        assert man["command"] == "experiment"
        assert "diffusion_weights" in man["input_hashes"]
        assert man["held_out_phantom_seeds"] == [10000]

    @pytest.mark.slow
    def test_cone_geometry_all_rows(self, tmp_path, weight_files):
        diff, den = weight_files
        out = str(tmp_path / "cone")
        assert main(["experiment", "--geometry", "cone", "--size", "32", "--views", "8",
                     "--test-count", "1", "--seed", "3", "--samples", "2", "--steps", "4",
                     "--guidance-epochs", "1", "--gd-epochs", "10", "--ft-steps", "5",
                     "--diffusion-weights", diff, "--denoiser-weights", den,
                     "--out-dir", out]) == 0
        doc = json.load(open(os.path.join(out, "results.json")))
        assert set(doc["rows"]) == set(METHOD_ROWS)

    def test_missing_weights_io_error(self, tmp_path):
        assert main(["experiment", "--size", "32", "--views", "4", "--test-count", "1",
                     "--samples", "1", "--steps", "2", "--gd-epochs", "2",
                     "--diffusion-weights", str(tmp_path / "no.cdpa"),
                     "--denoiser-weights", str(tmp_path / "no2.cdpa"),
                     "--out-dir", str(tmp_path / "out")]) == 4

    @pytest.mark.slow
    def test_views_list_sweep(self, tmp_path, weight_files):
        diff, den = weight_files
        out = str(tmp_path / "sweep")
        assert main(["experiment", "--geometry", "parallel", "--size", "32",
                     "--views-list", "6,12", "--test-count", "1", "--seed", "5",
                     "--samples", "1", "--steps", "3", "--guidance-epochs", "1",
                     "--gd-epochs", "5", "--ft-steps", "3",
                     "--diffusion-weights", diff, "--denoiser-weights", den,
                     "--out-dir", out]) == 0
        sweep = json.load(open(os.path.join(out, "sweep.json")))
        assert set(sweep) == {"6", "12"}
        assert os.path.exists(os.path.join(out, "views_006", "table.md"))
        assert os.path.exists(os.path.join(out, "views_012", "results.json"))
