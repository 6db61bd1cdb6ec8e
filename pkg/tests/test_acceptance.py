"""Primary acceptance criteria, one test per criterion.

Each test prints a PASS line with its measured numbers so a plain
``pytest tests/test_acceptance.py -v -s`` doubles as the acceptance report.
"""
import json
import math
import os
import time

import numpy as np
import pytest

from cdpa.analytic import RawProjection, beer_lambert, fbp, fdk
from cdpa.denoiser import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    MissingTensorError,
    NonFiniteWeightError,
    TensorShapeError,
    TruncatedFileError,
    UNetModel,
    load_weights,
    save_weights,
    write_container,
)
from cdpa.diffusion import AnalyticGaussianScore, NoiseSchedule, SamplerConfig, ddim_sample, dpa_sample
from cdpa.geometry import ConeBeamGeometry, ParallelGeometry2D, VolumeGrid, uniform_angles
from cdpa.io import PhantomSpec, make_phantom, simulate_counts
from cdpa.metrics import MetricConfig, psnr, ssim3
from cdpa.optimize import DCProblem, dc_gradient, dc_loss
from cdpa.posterior import mc_mean, sample_ensemble, uncertainty_report
from cdpa.projector import ConeProjector, ParallelProjector, ProjectionStack, Sinogram2D, forward_cone, forward_parallel

from conftest import random_weight_store, zero_weight_store
from test_diffusion import SCHEDULE, gaussian_toy


def report(name: str, detail: str) -> None:
    print(f"ACCEPTANCE {name}: PASS ({detail})")


class TestAdjointCriterion:
    def test_adjoint_mismatch_below_tolerance(self):
        t0 = time.time()
        rng = np.random.default_rng(100)
        par = ParallelProjector(ParallelGeometry2D(96, 1.0), uniform_angles(16), (64, 64))
        cone = ConeProjector(ConeBeamGeometry(96, 96, 1.3, 150.0, 75.0),
                             uniform_angles(8), VolumeGrid(32, 32, 32))
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal((64, 64)).astype(np.float32)
            y = rng.standard_normal((16, 96)).astype(np.float32)
            lhs = np.vdot(par.forward(x).astype(np.float64), y.astype(np.float64))
            rhs = np.vdot(x.astype(np.float64), par.adjoint(y).astype(np.float64))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
        for _ in range(20):
            x = rng.standard_normal((32, 32, 32)).astype(np.float32)
            y = rng.standard_normal((8, 96, 96)).astype(np.float32)
            lhs = np.vdot(cone.forward(x).astype(np.float64), y.astype(np.float64))
            rhs = np.vdot(x.astype(np.float64), cone.adjoint(y).astype(np.float64))
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
        elapsed = time.time() - t0
        assert worst <= 1e-4
        assert elapsed < 30.0
        report("adjoint", f"worst mismatch {worst:.2e}, {elapsed:.1f}s")


class TestGradientOracleCriterion:
    def test_finite_difference_match(self):
        t0 = time.time()
        geom = ParallelGeometry2D(detector_pixels=24, detector_spacing=1.0)
        proj = ParallelProjector(geom, uniform_angles(8), (16, 16))
        rng = np.random.default_rng(101)
        gt = rng.random((16, 16)).astype(np.float32)
        problem = DCProblem(proj, proj.forward(gt))
        x = (rng.random((16, 16)) * 0.5).astype(np.float32)
        g = dc_gradient(x, problem).astype(np.float64)
        h = 3e-3
        floor = 1e-3 * np.abs(g).max()
        worst = 0.0
        for i in range(16):
            for j in range(16):
                xp = x.copy(); xp[i, j] += h
                xm = x.copy(); xm[i, j] -= h
                fd = (dc_loss(xp, problem) - dc_loss(xm, problem)) / (2.0 * h)
                worst = max(worst, abs(fd - g[i, j]) / max(abs(fd), abs(g[i, j]), floor))
        elapsed = time.time() - t0
        assert worst <= 1e-3
        assert elapsed < 60.0
        report("gradient-oracle", f"max relative error {worst:.2e}, {elapsed:.1f}s")


class TestAnalyticCriterion:
    def test_fbp_and_fdk_quality(self):
        t0 = time.time()
        geom = ParallelGeometry2D(detector_pixels=192, detector_spacing=0.5)
        ph = make_phantom(PhantomSpec("shepp-logan-2d", 64))
        rec = fbp(forward_parallel(ph, geom, uniform_angles(180)), geom, (64, 64))
        fbp_psnr = psnr(rec, ph, MetricConfig())
        n, ss = 48, 2
        c = (np.arange(n * ss) + 0.5) / (n * ss) * 2.0 - 1.0
        zz, yy, xx = c[:, None, None], c[None, :, None], c[None, None, :]
        sph = ((xx ** 2 + yy ** 2 + zz ** 2) <= 0.36).astype(np.float64)
        sph = sph.reshape(n, ss, n, ss, n, ss).mean(axis=(1, 3, 5)).astype(np.float32)
        cone = ConeBeamGeometry(128, 128, 0.9, 150.0, 75.0)
        stack = forward_cone(sph, cone, uniform_angles(180))
        vol = fdk(stack, VolumeGrid(48, 48, 48))
        fdk_psnr = psnr(vol[24], sph[24], MetricConfig())
        elapsed = time.time() - t0
        assert fbp_psnr >= 25.0
        assert fdk_psnr >= 24.0
        assert elapsed < 120.0
        report("analytic", f"FBP {fbp_psnr:.2f} dB, FDK central {fdk_psnr:.2f} dB, {elapsed:.1f}s")


class TestBeerLambertCriterion:
    def test_round_trip_and_point_values(self):
        rng = np.random.default_rng(102)
        proj = (rng.random((32, 40)) * 5.0)
        raw = simulate_counts(proj, 120.0, 9000.0, photon_count=0.0)
        rec, sat = beer_lambert(raw)
        round_trip = np.abs(rec - proj).max()
        assert sat == 0
        assert round_trip <= 1e-6
        flat = RawProjection(np.full((2,), 700.0), np.full((2,), 200.0), np.full((2,), 700.0))
        assert np.allclose(beer_lambert(flat)[0], 0.0, atol=1e-12)
        one = RawProjection(np.full((2,), 200.0 + 500.0 * math.exp(-1.0)),
                            np.full((2,), 200.0), np.full((2,), 700.0))
        assert np.allclose(beer_lambert(one)[0], 1.0, atol=1e-12)
        half = RawProjection(np.full((2,), 450.0), np.full((2,), 200.0), np.full((2,), 700.0))
        assert np.allclose(beer_lambert(half)[0], math.log(2.0), atol=1e-12)
        report("beer-lambert", f"round trip max err {round_trip:.2e}, point values exact")


class TestLinearGaussianCriterion:
    def test_posterior_mean_and_prior_moments(self):
        t0 = time.time()
        problem, score, post_mean, condition, _, _ = gaussian_toy()
        cfg = SamplerConfig(steps=50, guidance_epochs=15, guidance_lr=3e-2,
                            seed=5, schedule=SCHEDULE)
        ens = sample_ensemble(problem, score, cfg, 200, "cdpa",
                              fdk_condition=condition, slice_index=0,
                              num_views=problem.num_views)
        mean = ens.samples.reshape(200, 16).mean(axis=0).astype(np.float64)
        rel = np.linalg.norm(mean - post_mean) / np.linalg.norm(post_mean)
        assert rel <= 0.05
        prior_score = AnalyticGaussianScore(0.3, 1.0, SCHEDULE)
        draws = ddim_sample(prior_score, (100, 100),
                            SamplerConfig(steps=50, guidance_epochs=0, seed=11, schedule=SCHEDULE))
        mean_err = abs(draws.mean() - 0.3)
        var_rel = abs(draws.var(ddof=1) - 1.0)
        elapsed = time.time() - t0
        assert mean_err <= 3.0 * math.sqrt(1.0 / draws.size)
        assert var_rel <= 0.10
        assert elapsed < 300.0
        report("linear-gaussian", f"ensemble mean off by {rel:.2%}, prior mean err "
                                  f"{mean_err:.4f}, var dev {var_rel:.2%}, {elapsed:.0f}s")


class TestScheduleIdentityCriterion:
    def test_schedule_and_tweedie(self):
        assert abs(SCHEDULE.alphas[0] - 1.0) <= 1e-6
        assert abs(SCHEDULE.sigmas[0]) <= 1e-6
        assert np.abs(SCHEDULE.alphas ** 2 + SCHEDULE.sigmas ** 2 - 1.0).max() <= 1e-6
        rng = np.random.default_rng(103)
        x0 = rng.random((12, 12))
        eps = rng.standard_normal((12, 12))
        worst = 0.0
        for t in (1, 77, 500, 1000):
            xt = SCHEDULE.add_noise(x0, t, eps)
            worst = max(worst, np.abs(SCHEDULE.tweedie(xt, eps, t) - x0).max())
        assert worst <= 1e-6
        report("schedule-identities", f"tweedie round trip max err {worst:.2e}")


class TestGuidanceMonotonicityCriterion:
    def test_every_step_non_increasing(self):
        problem, score, _, _, _, _ = gaussian_toy()
        cfg = SamplerConfig(steps=50, guidance_epochs=5, guidance_lr=3e-2,
                            seed=13, schedule=SCHEDULE)
        events = []
        dpa_sample(problem, score, cfg,
                   monitor=lambda kind, t, loss: events.append((kind, t, loss)))
        starts = dict((t, l) for kind, t, l in events if kind == "start")
        ends = dict((t, l) for kind, t, l in events if kind == "end")
        assert len(starts) == 50
        violations = sum(1 for t in starts if ends[t] > starts[t])
        assert violations == 0
        report("guidance-monotonicity", "full-view loss non-increasing at all 50 steps")


class TestVarianceScalingCriterion:
    def test_mc_mean_variance_slope(self):
        rng = np.random.default_rng(104)
        sizes = [1, 2, 4, 8, 16]
        reps = 400
        variances = []
        for n in sizes:
            means = np.stack([mc_mean(rng.standard_normal((n, 64))) for _ in range(reps)])
            variances.append(means.var(axis=0, ddof=1).mean())
        slope = float(np.polyfit(np.log(sizes), np.log(variances), 1)[0])
        assert abs(slope + 1.0) <= 0.15
        report("variance-scaling", f"log-log slope {slope:.3f}")


class TestMetricsCriterion:
    def test_psnr_ssim_auc_closed_forms(self):
        ref = np.full((10, 10), 0.5)
        val = psnr(ref + 0.1, ref, MetricConfig(0.0, 1.0))
        assert abs(val - 20.0) < 1e-9
        vol = np.random.default_rng(105).random((16, 16, 16))
        assert ssim3(vol, vol) == pytest.approx(1.0, abs=1e-12)
        rng = np.random.default_rng(106)
        std = rng.random((40, 40))
        perfect = uncertainty_report(std, 2.0 * std)
        assert all(v == pytest.approx(1.0, abs=1e-12) for v in perfect.auc.values())
        err = rng.random(10000)
        rand = uncertainty_report(rng.permutation(err).reshape(100, 100), err.reshape(100, 100))
        assert all(abs(v - 0.5) <= 0.05 for v in rand.auc.values())
        report("metrics", "PSNR 20.0 dB exact, SSIM(x,x)=1, AUC 1.0 / ~0.5")


class TestDeterminismCriterion:
    def test_experiment_bitwise_reproducible(self, tmp_path):
        from cdpa.cli import main
        diff = str(tmp_path / "d.cdpa")
        den = str(tmp_path / "n.cdpa")
        save_weights(diff, random_weight_store("noise-prediction", seed=41))
        save_weights(den, random_weight_store("denoise", seed=43))
        argv = ["experiment", "--geometry", "parallel", "--size", "32", "--views", "8",
                "--test-count", "1", "--seed", "5", "--samples", "2", "--steps", "4",
                "--guidance-epochs", "1", "--gd-epochs", "10", "--ft-steps", "5",
                "--diffusion-weights", diff, "--denoiser-weights", den]
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(argv + ["--out-dir", out1]) == 0
        assert main(argv + ["--out-dir", out2]) == 0
        for name in ("results.json", "manifest.json", "table.md"):
            a = open(os.path.join(out1, name), "rb").read()
            b = open(os.path.join(out2, name), "rb").read()
            assert a == b
        report("determinism", "two experiment runs byte-identical (results, manifest, table)")


class TestWeightLoaderCriterion:
    def test_round_trip_rejections_and_degenerate_net(self, tmp_path):
        store = random_weight_store(seed=51)
        path = str(tmp_path / "w.cdpa")
        save_weights(path, store)
        loaded = load_weights(path)
        assert all(np.array_equal(loaded.tensors[k], store.tensors[k]) for k in store.tensors)

        import struct, zlib
        blob = bytearray(open(path, "rb").read())
        cases = 0
        bad = str(tmp_path / "bad.cdpa")
        open(bad, "wb").write(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(BadMagicError):
            load_weights(bad)
        cases += 1
        v = bytearray(blob); v[4:8] = struct.pack("<I", 77)
        v[-4:] = struct.pack("<I", zlib.crc32(bytes(v[:-4])) & 0xFFFFFFFF)
        open(bad, "wb").write(bytes(v))
        with pytest.raises(BadVersionError):
            load_weights(bad)
        cases += 1
        open(bad, "wb").write(bytes(blob[:100]))
        with pytest.raises((TruncatedFileError, ChecksumError)):
            load_weights(bad)
        cases += 1
        c = bytearray(blob); c[300] ^= 0x5A
        open(bad, "wb").write(bytes(c))
        with pytest.raises(ChecksumError):
            load_weights(bad)
        cases += 1
        tensors = dict(store.tensors)
        tensors["head.bias"] = np.zeros(3, np.float32)
        write_container(bad, store.descriptor, tensors)
        with pytest.raises(TensorShapeError):
            load_weights(bad)
        cases += 1
        tensors = dict(store.tensors)
        del tensors["attn.q.weight"]
        write_container(bad, store.descriptor, tensors)
        with pytest.raises(MissingTensorError):
            load_weights(bad)
        cases += 1
        tensors = dict(store.tensors)
        nan_w = tensors["up0.weight"].copy()
        nan_w[0] = np.inf
        tensors["up0.weight"] = nan_w
        write_container(bad, store.descriptor, tensors)
        with pytest.raises(NonFiniteWeightError):
            load_weights(bad)
        cases += 1

        degenerate = UNetModel(zero_weight_store())
        out = degenerate.forward(np.random.default_rng(0).standard_normal((1, 2, 32, 32)).astype(np.float32),
                                 timestep=[5], slice_index=[0], num_views=[20])
        assert np.all(out == 0.0)
        report("weight-loader", f"round trip bitwise, {cases} malformed cases rejected, "
                                "zero net gives zero output")
