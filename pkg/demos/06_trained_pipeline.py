"""Sparse-view reconstruction with the trained toy networks.

Needs the weight containers produced by the trainer package (see README):
weights/diffusion.cdpa and weights/denoiser.cdpa. Reconstructs a held-out
slice with every learned method and prints PSNR next to the analytic and
iterative baselines.

Run:  python demos/06_trained_pipeline.py
"""
import os
import sys

import numpy as np

from cdpa import (
    DCProblem,
    MetricConfig,
    ParallelGeometry2D,
    ParallelProjector,
    PhantomSpec,
    SamplerConfig,
    UNetModel,
    UNetScore,
    dc_loss,
    fbp,
    finetune,
    forward_parallel,
    gd_reconstruct,
    load_weights,
    make_phantom,
    mc_mean,
    psnr,
    uniform_angles,
)
from cdpa.denoiser import denoise_slices
from cdpa.posterior import sample_ensemble

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DIFF = os.path.join(ROOT, "weights", "diffusion.cdpa")
DEN = os.path.join(ROOT, "weights", "denoiser.cdpa")
if not (os.path.exists(DIFF) and os.path.exists(DEN)):
    sys.exit("run the trainer first (see README: Training the toy models)")

views = 20
vol = make_phantom(PhantomSpec("random-ellipsoids", 64, seed=10_000))
z = 30
gt = vol[z]
geom = ParallelGeometry2D(detector_pixels=128, detector_spacing=0.75)
angles = uniform_angles(views)
proj = ParallelProjector(geom, angles, gt.shape)
y = proj.forward(gt)
problem = DCProblem(proj, y)
analytic = fbp(forward_parallel(gt, geom, angles), geom, gt.shape)

metric = MetricConfig()
rows = {"fbp": analytic}
rows["gd_zero"] = gd_reconstruct(problem, "zero", epochs=400, lr=2e-2, seed=0)

den_model = UNetModel(load_weights(DEN))
rows["denoise"] = denoise_slices(den_model, analytic[None], [z], views)[0]
rows["denoise_ft"] = finetune(rows["denoise"], problem, steps=100, lr=1e-4)

diff_model = UNetModel(load_weights(DIFF))
cfg = SamplerConfig(steps=50, guidance_epochs=5, guidance_lr=5e-3, seed=1)
cdpa_ens = sample_ensemble(problem, UNetScore(diff_model, conditional=True), cfg,
                           n_samples=8, method="cdpa", fdk_condition=analytic,
                           slice_index=z, num_views=views)
rows["cdpa"] = cdpa_ens.samples[0]
rows["mu_cdpa"] = mc_mean(cdpa_ens)

print(f"{views} views, held-out slice z={z}")
for name, rec in rows.items():
    print(f"  {name:10s}: PSNR {psnr(rec, gt, metric):6.2f} dB   "
          f"dc_loss {dc_loss(rec.astype(np.float32), problem):10.4f}")
