"""Training losses: noise-prediction error, SSIM-based similarity
consistency on the warped moving image, smoothness of the recovered field,
and their weighted total.

The consistency terms are evaluated on the *denormalized* clean-field
estimate (physical voxel units), since warping needs physical
displacements. Gradients flow from every term back into the predicted
noise, so all three train the denoiser.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, predict_phi0
from .errors import DimensionMismatch
from .fields import DeformationField, FieldStats, Volume, denormalize_field, warp


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective and the SSIM window size.

    ``phi0_clip`` bounds the rms of the clean-field estimate used by the
    consistency terms, in standard-deviation units of the normalized field
    (None disables). The exact algebraic inversion amplifies prediction
    error by 1/sqrt(abar_t) — 150x at the noisiest steps — and an
    unbounded estimate there makes the image and smoothness terms explode;
    bounded, those terms teach exactly the noise-to-field reading that
    sampling from pure noise requires. The bound rescales rather than
    clamps so the gradient reaches every voxel even when it engages, and
    it sits just above the rms of a real normalized field (about 1): a
    runaway estimate is pulled back to a magnitude where warping it gives
    an informative similarity gradient instead of smearing everything
    past the volume border.
    """

    lambda1: float = 1.0
    lambda2: float = 0.1
    ssim_kernel: int = 9
    phi0_clip: Optional[float] = 1.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ssim_kernel < 3 or self.ssim_kernel % 2 == 0:
            raise ValueError(f"ssim_kernel must be odd and >= 3, got {self.ssim_kernel}")
        if self.phi0_clip is not None and self.phi0_clip <= 0:
            raise ValueError("phi0_clip must be positive or None")


@dataclass
class LossBreakdown:
    """Total plus unweighted components, as 0-dim tensors."""

    total: torch.Tensor
    diffuse: torch.Tensor
    sim: torch.Tensor
    reg: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "diffuse": float(self.diffuse.detach()),
            "sim": float(self.sim.detach()),
            "reg": float(self.reg.detach()),
        }


def loss_diffuse(eps_hat: DeformationField, eps: DeformationField) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_hat.disp.shape != eps.disp.shape:
        raise DimensionMismatch(
            f"eps_hat {tuple(eps_hat.disp.shape)} != eps {tuple(eps.disp.shape)}"
        )
    return ((eps_hat.disp - eps.disp) ** 2).mean()


_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def ssim3d(a: Volume, b: Volume, kernel: int = 9) -> torch.Tensor:
    """Mean local SSIM over all valid kernel^3 windows (uniform weighting).

    Constants C1=(0.01)^2, C2=(0.03)^2 assume intensities in [0, 1].
    """
    if a.shape != b.shape:
        raise DimensionMismatch(f"a {a.shape} != b {b.shape}")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    if any(kernel > s for s in a.shape):
        raise ValueError(f"kernel {kernel} exceeds volume shape {a.shape}")

    x = a.data.unsqueeze(0).unsqueeze(0)
    y = b.data.unsqueeze(0).unsqueeze(0)

    def box(v: torch.Tensor) -> torch.Tensor:
        return F.avg_pool3d(v, kernel, stride=1)

    mu_x = box(x)
    mu_y = box(y)
    var_x = box(x * x) - mu_x * mu_x
    var_y = box(y * y) - mu_y * mu_y
    cov = box(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _C1) * (2 * cov + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
    return (num / den).mean()


def loss_sim(fixed: Volume, warped: Volume, w: LossWeights) -> torch.Tensor:
    """Dissimilarity 1 - ssim3d: zero when the warped image matches fixed."""
    return 1.0 - ssim3d(fixed, warped, w.ssim_kernel)


def loss_reg(field: DeformationField) -> torch.Tensor:
    """Smoothness penalty on spatial gradients of the displacement field.

    Per axis the squared forward differences are averaged over positions,
    then summed over channels and axes, so a single-channel ramp of slope c
    scores exactly c^2.
    """
    d = field.disp
    if any(s < 2 for s in d.shape[1:]):
        raise DimensionMismatch(f"every spatial axis must be >= 2, got {tuple(d.shape[1:])}")
    total = d.new_zeros(())
    for axis in (1, 2, 3):
        diff = d.narrow(axis, 1, d.shape[axis] - 1) - d.narrow(axis, 0, d.shape[axis] - 1)
        total = total + (diff ** 2).mean(dim=(1, 2, 3)).sum()
    return total


def loss_total(
    eps_hat: DeformationField,
    eps: DeformationField,
    fixed: Volume,
    moving: Volume,
    phi_t: DeformationField,
    t: int,
    sched: NoiseSchedule,
    w: LossWeights,
    stats: FieldStats,
    include_aux: bool = True,
) -> LossBreakdown:
    """Weighted objective: diffuse + lambda1 * sim + lambda2 * reg.

    The clean-field estimate is recovered from (phi_t, eps_hat, t),
    denormalized with ``stats``, then used both to warp the moving image
    and as the smoothness target. With ``include_aux=False`` the total is
    the noise loss alone and the consistency terms are reported detached,
    for diagnostics only.
    """
    diffuse = loss_diffuse(eps_hat, eps)

    def consistency():
        est = predict_phi0(phi_t, eps_hat, t, sched)
        if w.phi0_clip is not None:
            # Bound by rescaling, not clamping: a per-voxel clamp saturates
            # at the noisy end of the schedule (the inversion amplifies by
            # 1/sqrt(abar_t)) and zeroes the gradient exactly where this
            # supervision is the only path that teaches reading the images.
            # Shrinking the whole field keeps its spatial structure and
            # passes gradient to every voxel.
            rms = est.disp.pow(2).mean().sqrt().clamp_min(1e-12)
            scale = (w.phi0_clip / rms).clamp(max=1.0)
            est = DeformationField(est.disp * scale, normalized=True)
        phi0_hat = denormalize_field(est, stats)
        return loss_sim(fixed, warp(moving, phi0_hat), w), loss_reg(phi0_hat)

    if include_aux:
        sim, reg = consistency()
        total = diffuse + w.lambda1 * sim + w.lambda2 * reg
    else:
        with torch.no_grad():
            sim, reg = consistency()
        total = diffuse
    return LossBreakdown(total=total, diffuse=diffuse, sim=sim, reg=reg)
