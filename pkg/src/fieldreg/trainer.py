"""Training loop: per-step noise-prediction updates, cosine-annealed
AdamW, atomic checkpoints with exact-resume state, and ablation switches.

Every random draw (timestep, noise, data order) comes from one explicit
generator whose state is checkpointed, so an interrupted run resumed from
the last checkpoint reproduces the uninterrupted loss sequence bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .data import compute_field_stats
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T_TRAIN,
    NoiseSchedule,
    SamplerConfig,
    make_linear_schedule,
    noise_like,
    q_sample,
)
from .diffusion import sample as run_sampler
from .errors import TrainingDiverged
from .fields import DeformationField, FieldStats, normalize_field, warp_mask
from .metrics import dice_overall
from .network import (
    DenoiserConfig,
    FieldDenoiser,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import LossBreakdown, LossWeights, loss_total


@dataclass(frozen=True)
class AblationFlags:
    """Independent switches for the architecture/objective ablations."""

    use_phi0: bool = True  # train toward the ground-truth init field
    time_resblocks: bool = True  # decoder time conditioning
    condition_mask: bool = True  # masked cross-source attention
    aux_losses: bool = True  # image/smoothness terms in the total


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 1200
    batch_size: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    T_train: int = DEFAULT_T_TRAIN
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablations: AblationFlags = field(default_factory=AblationFlags)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    checkpoint_every: int = 100  # epochs between checkpoints/validations
    val_pairs: int = 4
    val_steps: int = 25
    val_eta: float = 1.0
    # Fraction of the noise schedule (from t=1 upward) on which the
    # image/smoothness terms apply; 1.0 means every step. At large t those
    # terms are the only part of the objective that rewards reading the
    # images — the noise target there is almost fully explained by the
    # noisy field itself — so restricting them starves the conditioning
    # pathway. The clean-field estimate they run through is bounded by
    # LossWeights.phi0_clip, which keeps them finite at the noisy end.
    aux_t_frac: float = 1.0

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if not 0.0 <= self.aux_t_frac <= 1.0:
            raise ValueError("aux_t_frac must be in [0, 1]")
        if not 0.0 <= self.val_eta <= 1.0:
            raise ValueError("val_eta must be in [0, 1]")


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_checkpoint_path: Optional[Path]
    log_path: Path
    epochs_run: int
    best_val_dice: Optional[float]


def cosine_lr(base_lr: float, epoch: int, max_epochs: int) -> float:
    """Cosine annealing from base_lr at epoch 0 to 0 at max_epochs."""
    if max_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


def build_model(cfg: TrainConfig) -> FieldDenoiser:
    """Instantiate the denoiser with the ablation switches applied."""
    torch.manual_seed(cfg.seed)
    model_cfg = cfg.model
    if not cfg.ablations.condition_mask and model_cfg.mask_style != "full":
        model_cfg = DenoiserConfig.from_dict({**model_cfg.to_dict(), "mask_style": "full"})
    model = FieldDenoiser(model_cfg)
    if not cfg.ablations.time_resblocks:
        # shift projections are zero-initialized; freezing them keeps every
        # decoder block in its unconditioned form for the whole run
        for name, p in model.named_parameters():
            if ".shift." in name:
                p.requires_grad_(False)
    return model


def _diverged_snapshot(diag_dir, model, sample_id, t, breakdown):
    if diag_dir is None:
        return None
    diag_dir = Path(diag_dir)
    diag_dir.mkdir(parents=True, exist_ok=True)
    path = diag_dir / "diverged.pt"
    tmp = path.with_name(path.name + ".tmp")
    torch.save(
        {
            "sample_id": sample_id,
            "t": t,
            "losses": breakdown.as_floats(),
            "state_dict": model.state_dict(),
        },
        tmp,
    )
    tmp.replace(path)
    return path


def _compute_loss(sample, model, sched, stats, cfg, rng, diag_dir=None):
    t = int(torch.randint(1, sched.T_train + 1, (1,), generator=rng).item())
    if cfg.ablations.use_phi0:
        if sample.phi0 is None:
            raise ValueError(f"sample {sample.id!r} has no initial field but use_phi0 is on")
        phi0 = sample.phi0
    else:
        phi0 = DeformationField(
            torch.zeros(3, *sample.fixed.shape), normalized=False
        )
    phi0n = normalize_field(phi0, stats)
    eps = noise_like(phi0n, rng)
    phi_t = q_sample(phi0n, t, eps, sched)
    eps_hat = model.denoise(sample.fixed, sample.moving, phi_t, t)
    aux_cutoff = max(1, round(cfg.aux_t_frac * sched.T_train))
    breakdown = loss_total(
        eps_hat, eps, sample.fixed, sample.moving, phi_t, t, sched,
        cfg.loss_weights, stats,
        include_aux=cfg.ablations.aux_losses and t <= aux_cutoff,
    )
    if not torch.isfinite(breakdown.total.detach()):
        path = _diverged_snapshot(diag_dir, model, sample.id, t, breakdown)
        raise TrainingDiverged(
            f"non-finite loss at t={t} on sample {sample.id!r}"
            + (f" (snapshot: {path})" if path else "")
        )
    return breakdown, t


def train_step(
    sample, model, optimizer, sched: NoiseSchedule, stats: FieldStats,
    cfg: TrainConfig, rng: torch.Generator, diag_dir=None,
) -> LossBreakdown:
    """One sample, one optimizer update; returns the loss components."""
    breakdown, _ = _compute_loss(sample, model, sched, stats, cfg, rng, diag_dir)
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def _validate(model, pairs, sched, stats, cfg) -> Optional[float]:
    dices = []
    model.eval()
    try:
        with torch.no_grad():
            for i in range(min(len(pairs), cfg.val_pairs)):
                s = pairs[i]
                if s.fixed_mask is None or s.moving_mask is None:
                    continue
                scfg = SamplerConfig(
                    kind="ddim", num_steps=cfg.val_steps, eta=cfg.val_eta,
                    seed=cfg.seed,
                )
                result = run_sampler(model.denoise, s.fixed, s.moving, scfg, sched, stats=stats)
                warped = warp_mask(s.moving_mask, result.field)
                dices.append(dice_overall(warped, s.fixed_mask))
    finally:
        model.train()
    if not dices:
        return None
    return sum(dices) / len(dices)


def _save_state(path, model, optimizer, rng, cfg, sched, stats, next_epoch, best):
    save_checkpoint(
        path,
        model,
        stats=stats,
        schedule={
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
            "T_train": cfg.T_train,
        },
        extra={
            "next_epoch": next_epoch,
            "optimizer": optimizer.state_dict(),
            "rng_state": rng.get_state(),
            "best_val_dice": best,
            "seed": cfg.seed,
        },
    )


def train(
    dataset,
    cfg: TrainConfig,
    out_dir,
    val_dataset=None,
    resume_from="auto",
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Run (or resume) the full loop; returns checkpoint and log locations.

    ``dataset`` is any indexable collection of registration samples.
    Checkpoints land in ``out_dir`` as latest.pt (and best.pt once
    validation produces a Dice score); per-step losses are appended to
    train_log.ndjson. ``stop_after_epoch`` checkpoints and returns early
    without shortening the annealing horizon, leaving a state a later call
    can resume from exactly.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "latest.pt"
    best_path = out_dir / "best.pt"
    log_path = out_dir / "train_log.ndjson"
    sched = make_linear_schedule(cfg.beta_start, cfg.beta_end, cfg.T_train)

    if resume_from == "auto":
        resume_from = latest if latest.exists() else None
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        stats = payload["stats_obj"]
        if not cfg.ablations.time_resblocks:
            for name, p in model.named_parameters():
                if ".shift." in name:
                    p.requires_grad_(False)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        optimizer.load_state_dict(payload["extra"]["optimizer"])
        rng = torch.Generator()
        rng.set_state(payload["extra"]["rng_state"])
        start_epoch = int(payload["extra"]["next_epoch"])
        best_dice = payload["extra"].get("best_val_dice")
    else:
        model = build_model(cfg)
        stats = getattr(dataset, "stats", None)
        if stats is None:
            stats = compute_field_stats(list(dataset))
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        rng = torch.Generator().manual_seed(cfg.seed)
        start_epoch = 0
        best_dice = None
        _save_state(latest, model, optimizer, rng, cfg, sched, stats, 0, best_dice)

    global_step = start_epoch * n
    epochs_done = start_epoch
    log = open(log_path, "a")
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = cosine_lr(cfg.lr, epoch, cfg.max_epochs)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = torch.randperm(n, generator=rng).tolist()
            for pos in range(0, n, cfg.batch_size):
                batch = [dataset[i] for i in order[pos : pos + cfg.batch_size]]
                optimizer.zero_grad()
                logged = []
                for s in batch:
                    breakdown, t = _compute_loss(s, model, sched, stats, cfg, rng, out_dir)
                    (breakdown.total / len(batch)).backward()
                    logged.append((s.id, t, breakdown.as_floats()))
                optimizer.step()
                for sid, t, vals in logged:
                    log.write(json.dumps({
                        "epoch": epoch, "step": global_step, "sample": sid,
                        "t": t, "lr": lr, **vals,
                    }) + "\n")
                    global_step += 1
            log.flush()
            epochs_done = epoch + 1
            interrupted = stop_after_epoch is not None and epochs_done >= stop_after_epoch
            if (epochs_done % cfg.checkpoint_every == 0
                    or epochs_done == cfg.max_epochs or interrupted):
                val_dice = (
                    _validate(model, val_dataset, sched, stats, cfg)
                    if val_dataset is not None else None
                )
                if val_dice is not None and (best_dice is None or val_dice > best_dice):
                    best_dice = val_dice
                    _save_state(best_path, model, optimizer, rng, cfg, sched, stats,
                                epochs_done, best_dice)
                _save_state(latest, model, optimizer, rng, cfg, sched, stats,
                            epochs_done, best_dice)
            if interrupted:
                break
    finally:
        log.close()
    return TrainResult(
        checkpoint_path=latest,
        best_checkpoint_path=best_path if best_path.exists() else None,
        log_path=log_path,
        epochs_run=epochs_done - start_epoch,
        best_val_dice=best_dice,
    )
