"""Monte-Carlo posterior statistics and uncertainty analysis.

An ensemble is a stack of reconstructions drawn with independent seeds. Its
pixelwise standard deviation is evaluated as an error predictor through
correlations, a linear fit, and ROC curves against the top-k% error voxels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .diffusion import SamplerConfig, cdpa_sample, dpa_sample
from .optimize import DCProblem, iterate_shape

__all__ = [
    "PosteriorEnsemble",
    "UncertaintyReport",
    "mc_mean",
    "mc_std",
    "uncertainty_report",
    "ensemble_seeds",
    "sample_ensemble",
]

DEFAULT_ENSEMBLE_SIZE = 20
TOP_ERROR_FRACTIONS = (0.25, 0.10, 0.05)


@dataclass(frozen=True)
class PosteriorEnsemble:
    """N same-shaped reconstructions plus the seeds that produced them."""

    samples: np.ndarray
    seeds: tuple[int, ...]

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim < 2 or arr.shape[0] < 1:
            raise ValueError("ensemble needs at least one sample with array shape")
        if len(self.seeds) != arr.shape[0]:
            raise ValueError("need one seed per sample")
        object.__setattr__(self, "samples", arr)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def _as_stack(ensemble) -> np.ndarray:
    if isinstance(ensemble, PosteriorEnsemble):
        return ensemble.samples
    arr = np.asarray(ensemble)
    if arr.ndim < 2:
        raise ValueError("expected a stack of samples")
    return arr


def mc_mean(ensemble) -> np.ndarray:
    """Elementwise sample mean of the ensemble."""
    return _as_stack(ensemble).mean(axis=0)


def mc_std(ensemble) -> np.ndarray:
    """Elementwise sample standard deviation (divisor N-1)."""
    stack = _as_stack(ensemble)
    if stack.shape[0] < 2:
        raise ValueError("standard deviation needs at least two samples")
    return stack.std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# Uncertainty analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertaintyReport:
    pearson_r: float | None
    spearman_rho: float | None
    r_squared: float | None
    slope: float | None
    intercept: float | None
    auc: dict
    operating_points: dict
    voxels_used: int
    mask_rule: str

    def to_dict(self) -> dict:
        return {
            "pearson_r": self.pearson_r,
            "spearman_rho": self.spearman_rho,
            "r_squared": self.r_squared,
            "slope": self.slope,
            "intercept": self.intercept,
            "auc": self.auc,
            "operating_points": self.operating_points,
            "voxels_used": self.voxels_used,
            "mask_rule": self.mask_rule,
        }


def _roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tie-grouped ROC: thresholds at unique score values, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = labels[order].astype(np.float64)
    neg = 1.0 - pos
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    # Keep only the last index of each tied score block.
    keep = np.nonzero(np.diff(s, append=-np.inf) != 0.0)[0]
    tpr = np.concatenate([[0.0], tp[keep] / max(tp[-1], 1.0)])
    fpr = np.concatenate([[0.0], fp[keep] / max(fp[-1], 1.0)])
    return fpr, tpr


def uncertainty_report(std_map: np.ndarray, error_map: np.ndarray, mask: np.ndarray | None = None,
                       mask_rule: str = "all voxels",
                       top_fracs=TOP_ERROR_FRACTIONS) -> UncertaintyReport:
    """Relate an uncertainty map to an absolute-error map.

    Computes Pearson/Spearman correlations, a least-squares line
    ``error ~ slope * std + intercept``, and ROC/AUC for detecting the top-k%
    error voxels from the min-max normalized std map. A constant std map has
    undefined correlations; those fields come back as None.
    """
    std_map = np.asarray(std_map, dtype=np.float64)
    error_map = np.asarray(error_map, dtype=np.float64)
    if std_map.shape != error_map.shape:
        raise ValueError("std and error maps must share a shape")
    if mask is not None:
        if mask.shape != std_map.shape:
            raise ValueError("mask shape must match the maps")
        s = std_map[mask]
        e = error_map[mask]
    else:
        s = std_map.ravel()
        e = error_map.ravel()
    if s.size < 100:
        raise ValueError("need at least 100 voxels for a meaningful report")

    if np.ptp(s) == 0.0 or np.ptp(e) == 0.0:
        pearson = spearman = r2 = slope = intercept = None
    else:
        pearson = float(stats.pearsonr(s, e).statistic)
        spearman = float(stats.spearmanr(s, e).statistic)
        slope_f, intercept_f = np.polyfit(s, e, 1)
        slope, intercept = float(slope_f), float(intercept_f)
        r2 = float(pearson ** 2)

    scores = (s - s.min()) / np.ptp(s) if np.ptp(s) > 0 else np.zeros_like(s)
    auc: dict[str, float] = {}
    operating: dict[str, dict[str, float]] = {}
    order = np.argsort(-e, kind="stable")
    for frac in top_fracs:
        k = max(1, int(round(frac * s.size)))
        labels = np.zeros(s.size, dtype=bool)
        labels[order[:k]] = True
        fpr, tpr = _roc_curve(scores, labels)
        key = f"top_{int(round(frac * 100))}pct"
        auc[key] = float(np.trapezoid(tpr, fpr))
        j = int(np.argmax(tpr - fpr))
        operating[key] = {"sensitivity": float(tpr[j]), "false_positive_rate": float(fpr[j])}
    return UncertaintyReport(
        pearson_r=pearson, spearman_rho=spearman, r_squared=r2, slope=slope,
        intercept=intercept, auc=auc, operating_points=operating,
        voxels_used=int(s.size), mask_rule=mask_rule,
    )


def support_mask(ground_truth: np.ndarray, clamp_hi: float, fraction: float = 0.01) -> np.ndarray:
    """Default analysis mask: voxels above ``fraction`` of the clamp maximum."""
    return np.asarray(ground_truth) > fraction * clamp_hi


# ---------------------------------------------------------------------------
# Ensemble generation
# ---------------------------------------------------------------------------

def ensemble_seeds(base_seed: int, n: int) -> tuple[int, ...]:
    """Independent per-member seeds derived from one base seed."""
    children = np.random.SeedSequence(base_seed).spawn(n)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def sample_ensemble(problem: DCProblem, score, cfg: SamplerConfig, n_samples: int = DEFAULT_ENSEMBLE_SIZE,
                    method: str = "dpa", fdk_condition=None, slice_index=None,
                    num_views: int | None = None) -> PosteriorEnsemble:
    """Draw ``n_samples`` posterior reconstructions with independent seeds.

    2D problems batch all members through one stacked run (bitwise equal to
    running each member alone with its seed); volume problems run members
    sequentially.
    """
    if method not in ("dpa", "cdpa"):
        raise ValueError(f"unknown method {method!r}")
    seeds = ensemble_seeds(cfg.seed, n_samples)
    shape = iterate_shape(problem)
    if len(shape) == 2 and not problem.stacked:
        stacked_meas = np.broadcast_to(problem.measurements,
                                       (n_samples,) + problem.measurements.shape).copy()
        stacked = DCProblem(problem.operator, stacked_meas,
                            view_batch_size=problem.view_batch_size,
                            noise_sigma=problem.noise_sigma)
        keys = [0] * n_samples
        if method == "dpa":
            samples = dpa_sample(stacked, score, cfg, seeds=list(seeds), slice_keys=keys)
        else:
            cond = np.broadcast_to(np.asarray(fdk_condition, dtype=np.float32),
                                   (n_samples,) + tuple(shape)).copy()
            idx = int(slice_index) if slice_index is not None else 0
            samples = cdpa_sample(stacked, cond, [idx] * n_samples, int(num_views), score, cfg,
                                  seeds=list(seeds), slice_keys=keys)
        return PosteriorEnsemble(samples=np.asarray(samples), seeds=seeds)
    members = []
    for seed in seeds:
        member_cfg = replace(cfg, seed=seed)
        if method == "dpa":
            members.append(dpa_sample(problem, score, member_cfg))
        else:
            members.append(cdpa_sample(problem, fdk_condition, slice_index,
                                       int(num_views), score, member_cfg))
    return PosteriorEnsemble(samples=np.stack(members), seeds=seeds)
