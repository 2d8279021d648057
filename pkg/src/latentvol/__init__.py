"""Latent diffusion for 3D volumes with zero-initialized mask control.

Stages: :class:`SpatialTransformer` (VQ autoencoder), :class:`LatentDiffusion`
(DDPM on the latent grid), :class:`ZeroFusion` (frozen backbone plus a
trainable, zero-initialized control branch) and :class:`ConcatBaseline`.
"""
from .checkpoint import ParameterStore, load_checkpoint, save_checkpoint
from .diffusion import LatentDiffusion, NoiseSchedule, make_schedule, posterior_mean, q_sample, reverse_step
from .metrics import MetricReport, evaluate, mmd_sets, ms_ssim_volume, psnr_volume, report_from_pairs, ssim_volume
from .stm import SpatialTransformer
from .volume_io import (DatasetManifest, PhantomSpec, SegMask3D, Volume3D, build_dataset, generate_phantom,
                        load_volume, normalize, save_volume)
from .zerofusion import ConcatBaseline, ZeroFusion, sample_conditional

__version__ = "0.1.0"

__all__ = [
    "ParameterStore", "load_checkpoint", "save_checkpoint",
    "LatentDiffusion", "NoiseSchedule", "make_schedule", "posterior_mean", "q_sample", "reverse_step",
    "MetricReport", "evaluate", "mmd_sets", "ms_ssim_volume", "psnr_volume", "report_from_pairs", "ssim_volume",
    "SpatialTransformer",
    "DatasetManifest", "PhantomSpec", "SegMask3D", "Volume3D", "build_dataset", "generate_phantom",
    "load_volume", "normalize", "save_volume",
    "ConcatBaseline", "ZeroFusion", "sample_conditional",
]
