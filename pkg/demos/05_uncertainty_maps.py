"""Pixelwise uncertainty from posterior ensembles.

Builds a synthetic ensemble whose spread genuinely tracks its error, then
runs the full uncertainty analysis: correlations, the linear error-vs-std
fit, and ROC curves for catching the worst voxels from the std map alone.

Run:  python demos/05_uncertainty_maps.py
"""
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from cdpa import PhantomSpec, make_phantom, mc_mean, mc_std, uncertainty_report

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

gt = make_phantom(PhantomSpec("random-ellipsoids", 48, seed=9))[24]
rng = np.random.default_rng(0)

# Heteroscedastic ensemble: noise level varies across the image, so the
# sample std is informative about where the "reconstruction" errs.
noise_scale = 0.02 + 0.3 * make_phantom(PhantomSpec("random-ellipsoids", 48, seed=10))[24]
samples = np.stack([gt + noise_scale * rng.standard_normal(gt.shape) for _ in range(20)])

mean = mc_mean(samples)
std = mc_std(samples)
err = np.abs(mean - gt)
report = uncertainty_report(std, err, mask_rule="all voxels")
print(f"pearson r {report.pearson_r:.3f}, spearman rho {report.spearman_rho:.3f}")
print(f"error ~ {report.slope:.2f} * std + {report.intercept:.4f}  (R^2 {report.r_squared:.3f})")
for key, auc in report.auc.items():
    op = report.operating_points[key]
    print(f"{key}: AUC {auc:.3f}  (sens {op['sensitivity']:.2f} @ FPR {op['false_positive_rate']:.2f})")

fig, axes = plt.subplots(1, 3, figsize=(12, 4))
for ax, (img, title) in zip(axes, ((gt, "ground truth"), (std, "ensemble std"),
                                   (err, "abs error of the mean"))):
    im = ax.imshow(img, cmap="magma")
    ax.set_title(title)
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.046)
fig.tight_layout()
fig.savefig(os.path.join(OUT, "05_uncertainty.png"), dpi=120)
print("wrote", os.path.join(OUT, "05_uncertainty.png"))
