"""Deformable 3D registration by iteratively denoising the deformation field.

The pieces compose in dependency order: ``fields`` holds the tensor types
and warp math, ``diffusion`` the noise schedule and samplers, ``network``
the conditional windowed-attention denoiser, ``objectives`` the training
losses, ``metrics`` the evaluation suite, ``data`` ingestion and the
synthetic corpus, ``trainer`` the optimization loop, ``service`` the
steering HTTP server, and ``cli`` the command-line entry point.
"""
from .data import (
    ManifestDataset,
    RegistrationSample,
    compute_field_stats,
    ingest_niftis,
    load_dataset,
    make_synth_dataset,
    read_nifti,
    write_nifti,
)
from .diffusion import (
    NoiseSchedule,
    SampleResult,
    SamplerConfig,
    TrajectorySnapshot,
    default_schedule,
    make_linear_schedule,
    predict_phi0,
    q_sample,
    sample,
    timestep_sequence,
)
from .errors import (
    DimensionMismatch,
    FieldRegError,
    FieldStateError,
    IngestError,
    StopSampling,
    TrainingDiverged,
)
from .fields import (
    ACDC_FIELD_STATS,
    DeformationField,
    FieldStats,
    SegMask,
    Volume,
    denormalize_field,
    jacobian_determinant,
    normalize_field,
    warp,
    warp_mask,
)
from .metrics import dice, dice_overall, evaluation_report, jsd, njd
from .network import DenoiserConfig, FieldDenoiser, load_checkpoint, save_checkpoint
from .objectives import LossBreakdown, LossWeights, loss_diffuse, loss_reg, loss_sim, loss_total, ssim3d
from .service import create_app, serve
from .trainer import AblationFlags, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "ACDC_FIELD_STATS",
    "AblationFlags",
    "DeformationField",
    "DenoiserConfig",
    "DimensionMismatch",
    "FieldDenoiser",
    "FieldRegError",
    "FieldStateError",
    "FieldStats",
    "IngestError",
    "LossBreakdown",
    "LossWeights",
    "ManifestDataset",
    "NoiseSchedule",
    "RegistrationSample",
    "SampleResult",
    "SamplerConfig",
    "SegMask",
    "StopSampling",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "TrajectorySnapshot",
    "Volume",
    "compute_field_stats",
    "create_app",
    "default_schedule",
    "denormalize_field",
    "dice",
    "dice_overall",
    "evaluation_report",
    "ingest_niftis",
    "jacobian_determinant",
    "jsd",
    "load_checkpoint",
    "load_dataset",
    "loss_diffuse",
    "loss_reg",
    "loss_sim",
    "loss_total",
    "make_linear_schedule",
    "make_synth_dataset",
    "njd",
    "normalize_field",
    "predict_phi0",
    "q_sample",
    "read_nifti",
    "sample",
    "save_checkpoint",
    "serve",
    "ssim3d",
    "timestep_sequence",
    "train",
    "warp",
    "warp_mask",
    "write_nifti",
]
