import numpy as np
import pytest

from cdpa.posterior import (
    PosteriorEnsemble,
    ensemble_seeds,
    mc_mean,
    mc_std,
    support_mask,
    uncertainty_report,
)


class TestMoments:
    def test_identical_samples(self):
        s = np.random.default_rng(0).random((1, 8, 8))
        stack = np.repeat(s, 5, axis=0)
        assert np.allclose(mc_mean(stack), s[0], atol=1e-12)
        assert np.all(mc_std(stack) <= 1e-12)

    def test_two_point_formula(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 6))
        c = rng.random((6, 6))
        stack = np.stack([a, a + 2.0 * c])
        assert np.allclose(mc_std(stack), c * np.sqrt(2.0), atol=1e-12)
        assert np.allclose(mc_mean(stack), a + c, atol=1e-12)

    def test_std_needs_two(self):
        with pytest.raises(ValueError):
            mc_std(np.zeros((1, 4, 4)))

    def test_variance_scaling_one_over_n(self):
        rng = np.random.default_rng(2)
        sizes = [1, 2, 4, 8, 16]
        reps = 400
        variances = []
        for n in sizes:
            means = np.stack([mc_mean(rng.standard_normal((n, 32))) for _ in range(reps)])
            variances.append(means.var(axis=0, ddof=1).mean())
        slope = np.polyfit(np.log(sizes), np.log(variances), 1)[0]
        assert abs(slope + 1.0) <= 0.15

    def test_mean_commutes_with_linear_maps(self):
        rng = np.random.default_rng(3)
        stack = rng.standard_normal((7, 5, 5))
        weight = rng.standard_normal((25, 25))

        def apply(v):
            return (weight @ v.reshape(-1)).reshape(5, 5)

        lhs = apply(mc_mean(stack))
        rhs = mc_mean(np.stack([apply(s) for s in stack]))
        assert np.abs(lhs - rhs).max() < 1e-6 * max(1.0, np.abs(lhs).max())

    def test_ensemble_container(self):
        stack = np.zeros((3, 4, 4))
        ens = PosteriorEnsemble(samples=stack, seeds=(1, 2, 3))
        assert ens.size == 3
        with pytest.raises(ValueError):
            PosteriorEnsemble(samples=stack, seeds=(1, 2))

    def test_ensemble_seeds_deterministic_and_distinct(self):
        seeds = ensemble_seeds(7, 20)
        assert seeds == ensemble_seeds(7, 20)
        assert len(set(seeds)) == 20


class TestUncertaintyReport:
    def test_perfect_linear_predictor(self):
        rng = np.random.default_rng(4)
        std = rng.random((40, 40))
        err = 2.0 * std
        rep = uncertainty_report(std, err)
        assert rep.pearson_r == pytest.approx(1.0, abs=1e-9)
        assert rep.spearman_rho == pytest.approx(1.0, abs=1e-9)
        assert rep.slope == pytest.approx(2.0, abs=1e-9)
        assert rep.intercept == pytest.approx(0.0, abs=1e-9)
        assert rep.r_squared == pytest.approx(1.0, abs=1e-9)
        for v in rep.auc.values():
            assert v == pytest.approx(1.0, abs=1e-12)

    def test_random_predictor_auc_half(self):
        rng = np.random.default_rng(5)
        err = rng.random(10000)
        std = rng.permutation(err)
        rep = uncertainty_report(std.reshape(100, 100), err.reshape(100, 100))
        for v in rep.auc.values():
            assert abs(v - 0.5) <= 0.05

    def test_auc_invariant_under_monotone_rescale(self):
        rng = np.random.default_rng(6)
        std = rng.random((50, 50))
        err = np.clip(std + 0.3 * rng.standard_normal((50, 50)), 0.0, None)
        base = uncertainty_report(std, err)
        cubed = uncertainty_report(std ** 3, err)
        for key in base.auc:
            assert cubed.auc[key] == pytest.approx(base.auc[key], abs=1e-12)
        assert cubed.spearman_rho == pytest.approx(base.spearman_rho, abs=1e-12)

    def test_constant_std_reported_as_undefined(self):
        std = np.full((20, 20), 0.5)
        err = np.random.default_rng(7).random((20, 20))
        rep = uncertainty_report(std, err)
        assert rep.pearson_r is None
        assert rep.slope is None

    def test_minimum_voxels(self):
        with pytest.raises(ValueError):
            uncertainty_report(np.zeros((5, 5)), np.zeros((5, 5)))

    def test_mask_and_fields(self):
        rng = np.random.default_rng(8)
        std = rng.random((30, 30))
        err = 1.5 * std + 0.01
        mask = np.zeros((30, 30), bool)
        mask[5:25, 5:25] = True
        rep = uncertainty_report(std, err, mask, mask_rule="center crop")
        assert rep.voxels_used == 400
        assert rep.mask_rule == "center crop"
        doc = rep.to_dict()
        assert set(doc["auc"]) == {"top_25pct", "top_10pct", "top_5pct"}
        assert all(0.0 <= p["sensitivity"] <= 1.0 for p in doc["operating_points"].values())

    def test_support_mask_rule(self):
        gt = np.array([[0.0, 0.005, 0.02], [0.2, 0.0, 0.05]])
        mask = support_mask(gt, clamp_hi=1.0)
        assert mask.tolist() == [[False, False, True], [True, False, True]]
