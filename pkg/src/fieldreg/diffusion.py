"""Noise schedule, forward corruption, clean-field recovery, and reverse
samplers (ancestral and deterministic-skip) with per-step trajectory hooks.

Timesteps are 1-based: t runs over [1, T_train]; schedule tables are stored
0-based, so the cumulative signal level at step t is ``alpha_bars[t-1]`` and
the level at t = 0 is defined as 1. Sampling operates on normalized fields
end to end; denormalization happens exactly once, at the result boundary.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .errors import DimensionMismatch, FieldStateError, StopSampling
from .fields import DeformationField, FieldStats, Volume, denormalize_field

DenoiseFn = Callable[[Volume, Volume, DeformationField, int], DeformationField]


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables governing forward corruption and reverse sampling.

    Tables are float64 so long cumulative products stay accurate.
    """

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64)
        alphas = torch.as_tensor(self.alphas, dtype=torch.float64)
        alpha_bars = torch.as_tensor(self.alpha_bars, dtype=torch.float64)
        for name, t in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            object.__setattr__(self, name, t)
            if t.ndim != 1 or t.shape != betas.shape:
                raise ValueError(f"{name} must be 1D of length T")
        if betas.numel() < 1:
            raise ValueError("schedule needs at least one step")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie strictly inside (0, 1)")
        if not (alpha_bars[1:] < alpha_bars[:-1]).all():
            raise ValueError("alpha_bars must be strictly decreasing")
        if abs(float(alpha_bars[0]) - (1.0 - float(betas[0]))) > 1e-12:
            raise ValueError("alpha_bars[0] must equal 1 - betas[0]")

    @property
    def T_train(self) -> int:
        return int(self.betas.numel())

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T_train:
            raise ValueError(f"t={t} outside schedule range [1, {self.T_train}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(beta_start: float, beta_end: float, T: int) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


# Paper-scale defaults for the corruption process.
DEFAULT_BETA_START = 1e-6
DEFAULT_BETA_END = 1e-2
DEFAULT_T_TRAIN = 2000


def default_schedule() -> NoiseSchedule:
    return make_linear_schedule(DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_T_TRAIN)


def _require_normalized(f: DeformationField, name: str) -> None:
    if not f.normalized:
        raise FieldStateError(f"{name} must be in normalized (z-scored) space")


def noise_like(ref: DeformationField, rng: torch.Generator) -> DeformationField:
    """Standard-normal draw shaped like ``ref``, in normalized space."""
    eps = torch.randn(ref.disp.shape, generator=rng, dtype=ref.disp.dtype)
    return DeformationField(eps, normalized=True)


def q_sample(phi0: DeformationField, t: int, eps: DeformationField, sched: NoiseSchedule) -> DeformationField:
    """Forward corruption: sqrt(abar_t) * phi0 + sqrt(1 - abar_t) * eps."""
    _require_normalized(phi0, "phi0")
    if eps.disp.shape != phi0.disp.shape:
        raise DimensionMismatch("eps and phi0 shapes differ")
    abar = sched.alpha_bar(t)
    out = (abar ** 0.5) * phi0.disp + ((1.0 - abar) ** 0.5) * eps.disp
    return DeformationField(out, normalized=True)


def predict_phi0(
    phi_t: DeformationField, eps_hat: DeformationField, t: int, sched: NoiseSchedule
) -> DeformationField:
    """Recover the clean field: (phi_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)."""
    _require_normalized(phi_t, "phi_t")
    abar = sched.alpha_bar(t)
    out = (phi_t.disp - ((1.0 - abar) ** 0.5) * eps_hat.disp) / (abar ** 0.5)
    return DeformationField(out, normalized=True)


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    """Reverse-step variance beta_t * (1 - abar_{t-1}) / (1 - abar_t)."""
    sched._check_t(t)
    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t - 1)
    return sched.beta(t) * (1.0 - abar_prev) / (1.0 - abar_t)


def ddpm_step(
    phi_t: DeformationField,
    eps_hat: DeformationField,
    t: int,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> DeformationField:
    """One ancestral reverse step t -> t-1. No noise is injected at t = 1."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    sched._check_t(t)
    alpha = sched.alpha(t)
    abar = sched.alpha_bar(t)
    mean = (phi_t.disp - (sched.beta(t) / (1.0 - abar) ** 0.5) * eps_hat.disp) / (alpha ** 0.5)
    if t > 1:
        sigma = posterior_variance(t, sched) ** 0.5
        z = torch.randn(phi_t.disp.shape, generator=rng, dtype=phi_t.disp.dtype)
        mean = mean + sigma * z
    return DeformationField(mean, normalized=True)


def ddim_step(
    phi_t: DeformationField,
    eps_hat: DeformationField,
    t: int,
    t_prev: int,
    eta: float,
    sched: NoiseSchedule,
    rng: torch.Generator,
) -> DeformationField:
    """Skip step t -> t_prev through the predicted clean field.

    eta = 0 is deterministic; eta = 1 matches the ancestral posterior when
    t_prev = t - 1.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got ({t}, {t_prev})")
    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t_prev)
    phi0 = predict_phi0(phi_t, eps_hat, t, sched)
    var = (eta ** 2) * (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev)
    out = (abar_prev ** 0.5) * phi0.disp + max(1.0 - abar_prev - var, 0.0) ** 0.5 * eps_hat.disp
    if var > 0.0 and t_prev > 0:
        z = torch.randn(phi_t.disp.shape, generator=rng, dtype=phi_t.disp.dtype)
        out = out + (var ** 0.5) * z
    return DeformationField(out, normalized=True)


@dataclass(frozen=True)
class SamplerConfig:
    """How a reverse trajectory is run.

    ``phi0_clip`` bounds the rms (in standard scores) of the clean-field
    estimate before each reverse update. At large t the 1/sqrt(abar_t)
    inversion amplifies small prediction errors into enormous estimates,
    and an unbounded trajectory never recovers from them. Normalized
    fields have rms near 1, so the default leaves in-distribution
    estimates untouched while rescaling runaway ones back onto the scale
    of real fields. ``None`` disables the bound.
    """

    kind: str = "ddpm"  # "ddpm" | "ddim"
    num_steps: int = DEFAULT_T_TRAIN
    eta: float = 0.0
    seed: int = 0
    stop_flag_poll: bool = True
    phi0_clip: Optional[float] = 1.5

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.phi0_clip is not None and not self.phi0_clip > 0.0:
            raise ValueError("phi0_clip must be positive (or None to disable)")


@dataclass(frozen=True)
class TrajectorySnapshot:
    """State handed to the per-step callback; fields are in normalized space."""

    t: int
    step_index: int
    num_steps: int
    phi_t: DeformationField
    phi0_hat: DeformationField
    wall_time_s: float


@dataclass
class SampleResult:
    field: DeformationField
    early_stopped: bool
    steps_run: int
    phi0_hat_normalized: Optional[DeformationField] = field(repr=False, default=None)


def timestep_sequence(T_train: int, num_steps: int) -> list[int]:
    """Descending timesteps from T_train to 1, len == num_steps, distinct."""
    if not 1 <= num_steps <= T_train:
        raise ValueError(f"num_steps must be in [1, {T_train}], got {num_steps}")
    if num_steps == 1:
        return [T_train]
    ts = torch.linspace(T_train, 1, num_steps, dtype=torch.float64).round().long().tolist()
    # rounding collisions only happen for num_steps close to T_train; repair
    for i in range(1, len(ts)):
        if ts[i] >= ts[i - 1]:
            ts[i] = ts[i - 1] - 1
    if ts[-1] < 1:
        raise ValueError("could not build a strictly decreasing timestep sequence")
    return ts


def sample(
    denoiser: DenoiseFn,
    fixed: Volume,
    moving: Volume,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    stats: Optional[FieldStats] = None,
    on_step: Optional[Callable[[TrajectorySnapshot], None]] = None,
    stop_event: Optional[threading.Event] = None,
) -> SampleResult:
    """Run a reverse trajectory from pure Gaussian noise.

    ``denoiser(fixed, moving, phi_t, t)`` must return predicted noise in
    normalized space. The callback fires once per step with the current
    phi_t and the recovered clean estimate; raising :class:`StopSampling`
    from it (or setting ``stop_event``) ends the run early with the current
    clean estimate as the accepted result. The returned field is
    denormalized when ``stats`` is given, else left in normalized space.
    """
    if fixed.shape != moving.shape:
        raise DimensionMismatch(f"fixed {fixed.shape} != moving {moving.shape}")
    rng = torch.Generator().manual_seed(cfg.seed)
    shape = (3, *fixed.shape)
    phi_t = DeformationField(torch.randn(shape, generator=rng), normalized=True)
    ts = timestep_sequence(sched.T_train, cfg.num_steps)
    t0 = time.perf_counter()

    phi0_hat = phi_t
    early = False
    steps_run = 0
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = denoiser(fixed, moving, phi_t, t)
        phi0_hat = predict_phi0(phi_t, eps_hat, t, sched)
        if cfg.phi0_clip is not None:
            rms = float(phi0_hat.disp.pow(2).mean().sqrt())
            if rms > cfg.phi0_clip:
                # Rescale the estimate onto a plausible field magnitude and
                # fold the correction back into the noise prediction so the
                # update stays self-consistent (phi_t - sqrt(abar)*phi0_hat
                # == sqrt(1-abar)*eps_hat holds exactly either way). A
                # rescale keeps the estimate's spatial structure; a
                # per-voxel clamp would flatten a large early estimate into
                # a constant block whose offset the later steps inherit.
                bounded = phi0_hat.disp * (cfg.phi0_clip / rms)
                phi0_hat = DeformationField(bounded, normalized=True)
                abar = sched.alpha_bar(t)
                eps_hat = DeformationField(
                    (phi_t.disp - (abar ** 0.5) * bounded) / ((1.0 - abar) ** 0.5),
                    normalized=True,
                )
        if cfg.kind == "ddpm" and t_prev == t - 1:
            phi_next = ddpm_step(phi_t, eps_hat, t, sched, rng)
        else:
            eta = cfg.eta if cfg.kind == "ddim" else 1.0
            phi_next = ddim_step(phi_t, eps_hat, t, t_prev, eta, sched, rng)
        steps_run = i + 1
        snap = TrajectorySnapshot(
            t=t,
            step_index=steps_run,
            num_steps=len(ts),
            phi_t=phi_t,
            phi0_hat=phi0_hat,
            wall_time_s=time.perf_counter() - t0,
        )
        if on_step is not None:
            try:
                on_step(snap)
            except StopSampling:
                early = True
                break
        if cfg.stop_flag_poll and stop_event is not None and stop_event.is_set():
            early = True
            break
        phi_t = phi_next

    if not early:
        # the final ancestral/skip step lands on the clean field itself
        phi0_hat = phi_next
    out = denormalize_field(phi0_hat, stats) if stats is not None else phi0_hat
    return SampleResult(field=out, early_stopped=early, steps_run=steps_run, phi0_hat_normalized=phi0_hat)
