"""Sparse-view CT reconstruction toolkit.

Analytic (FBP/FDK), iterative (Adam on the data-consistency loss), and
diffusion posterior-alignment reconstruction with Monte-Carlo uncertainty
maps, plus a small U-Net inference engine fed from a binary weight container.
"""

__version__ = "0.1.0"

from .analytic import FilterSpec, RawProjection, beer_lambert, fbp, fdk
from .diffusion import (
    AnalyticGaussianScore,
    NoiseSchedule,
    SamplerConfig,
    UNetScore,
    cdpa_sample,
    ddim_sample,
    dpa_sample,
    resample_map,
)
from .denoiser import ConditionBundle, UNetModel, WeightStore, load_weights, save_weights, unet_forward
from .geometry import (
    AngleSet,
    ConeBeamGeometry,
    ParallelGeometry2D,
    VolumeGrid,
    subselect_views,
    uniform_angles,
)
from .io import PhantomSpec, make_phantom, read_volume, simulate_counts, write_volume
from .metrics import MetricConfig, psnr, ssim2d, ssim3
from .optimize import (
    AdamState,
    DCProblem,
    adam_init,
    adam_step,
    dc_gradient,
    dc_loss,
    finetune,
    gd_reconstruct,
)
from .posterior import PosteriorEnsemble, mc_mean, mc_std, sample_ensemble, uncertainty_report
from .projector import (
    ConeProjector,
    ParallelProjector,
    ProjectionStack,
    Sinogram2D,
    adjoint_cone,
    adjoint_parallel,
    forward_cone,
    forward_parallel,
    forward_view,
)

__all__ = [
    "AngleSet",
    "ConeBeamGeometry",
    "ParallelGeometry2D",
    "VolumeGrid",
    "uniform_angles",
    "subselect_views",
    "Sinogram2D",
    "ProjectionStack",
    "ParallelProjector",
    "ConeProjector",
    "forward_parallel",
    "adjoint_parallel",
    "forward_cone",
    "adjoint_cone",
    "forward_view",
    "RawProjection",
    "FilterSpec",
    "beer_lambert",
    "fbp",
    "fdk",
    "AdamState",
    "DCProblem",
    "adam_init",
    "adam_step",
    "dc_loss",
    "dc_gradient",
    "gd_reconstruct",
    "finetune",
    "NoiseSchedule",
    "AnalyticGaussianScore",
    "UNetScore",
    "SamplerConfig",
    "resample_map",
    "ddim_sample",
    "dpa_sample",
    "cdpa_sample",
    "ConditionBundle",
    "WeightStore",
    "UNetModel",
    "unet_forward",
    "load_weights",
    "save_weights",
    "PhantomSpec",
    "make_phantom",
    "simulate_counts",
    "write_volume",
    "read_volume",
    "MetricConfig",
    "psnr",
    "ssim2d",
    "ssim3",
    "PosteriorEnsemble",
    "mc_mean",
    "mc_std",
    "sample_ensemble",
    "uncertainty_report",
]
