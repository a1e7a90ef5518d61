"""Command line entry points: data prep, training, sampling, evaluation, serving.

Every subcommand resolves its settings in three layers: built-in defaults,
then a TOML/JSON config file (``--config``), then explicit flags. All
defaults live in the ``DEFAULTS`` table below. Exit codes: 0 success,
1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .data import ingest_niftis, load_dataset, make_synth_dataset
from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T_TRAIN,
    SamplerConfig,
    make_linear_schedule,
)
from .diffusion import sample as run_sampler
from .errors import DimensionMismatch, IngestError, StopSampling
from .fields import DeformationField, denormalize_field, warp, warp_mask
from .metrics import evaluation_report
from .network import DenoiserConfig, load_checkpoint
from .objectives import LossWeights
from .service import serve
from .trainer import AblationFlags, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_ABLATION_TOKENS = ("phi0", "time-resblocks", "condition-mask", "aux-losses")

# One place for every tunable default, keyed by subcommand. Config files and
# flags override entries here; keys not listed are rejected.
DEFAULTS: dict[str, dict] = {
    "ingest": {
        "input": None,
        "out": "data",
        "crop": None,
        "resample": None,
        "test_fraction": 0.2,
    },
    "synth": {
        "out": "data",
        "train_pairs": 16,
        "test_pairs": 4,
        "shape": 16,
        "amplitude": 2.0,
        "seed": 0,
    },
    "train": {
        "manifest": None,
        "out": "runs/default",
        "epochs": 1200,
        "batch_size": 1,
        "lr": 1e-4,
        "weight_decay": 1e-4,
        "seed": 0,
        "t_train": DEFAULT_T_TRAIN,
        "beta_start": DEFAULT_BETA_START,
        "beta_end": DEFAULT_BETA_END,
        "lambda1": 1.0,
        "lambda2": 0.1,
        "ssim_kernel": 9,
        "patch_size": 2,
        "embed_dim": 24,
        "depths": (2, 2, 2),
        "heads": (3, 6, 12),
        "window_size": 4,
        "checkpoint_every": 100,
        "val_split": "test",
        "val_pairs": 4,
        "val_steps": 25,
        "val_eta": 1.0,
        "aux_t_frac": 1.0,
        "disable": (),
        "resume": "auto",
        "stop_after_epoch": None,
    },
    "sample": {
        "checkpoint": None,
        "manifest": None,
        "sample_id": None,
        "split": None,
        "out": "sample_out",
        "steps": 50,
        "ddim": False,
        "eta": 0.0,
        "seed": 0,
        "stop_at": None,
        "snapshot_every": 10,
    },
    "eval": {
        "manifest": None,
        "split": "test",
        "checkpoint": None,
        "identity": False,
        "field": None,
        "sample_id": None,
        "steps": 50,
        "ddim": True,
        "eta": 0.0,
        "seed": 0,
        "out": "metrics.json",
    },
    "serve": {
        "results": "service_results",
        "host": "127.0.0.1",
        "port": 8000,
        "slots": 1,
    },
}


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _read_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise IngestError(f"config file not found: {p}")
    if p.suffix == ".toml":
        try:
            import tomllib as toml_parser
        except ModuleNotFoundError:  # python < 3.11
            import tomli as toml_parser
        return toml_parser.loads(p.read_text())
    if p.suffix == ".json":
        return json.loads(p.read_text())
    raise ValueError(f"config file {p} must end in .toml or .json")


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- explicit flags for one subcommand."""
    cmd = args.command
    merged = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        doc = _read_config(args.config)
        flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        for k, v in flat.items():
            if k in merged:  # shared flat keys apply only where meaningful
                merged[k] = v
        section = doc.get(cmd)
        if section is not None:
            if not isinstance(section, dict):
                raise ValueError(f"config section {cmd!r} must be a table/object")
            for k, v in section.items():
                if k not in merged:
                    raise ValueError(f"unknown config key {k!r} for {cmd}")
                merged[k] = v
    for k in merged:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    for k in ("depths", "heads"):
        if k in merged and merged[k] is not None:
            merged[k] = tuple(int(x) for x in merged[k])
    return merged


def _odd_kernel(shape, preferred: int = 9) -> int:
    edge = min(shape)
    return min(preferred, edge if edge % 2 else edge - 1)


def _report_for(sample, field: DeformationField) -> dict:
    warped = warp(sample.moving, field)
    pred = gt = None
    if sample.moving_mask is not None and sample.fixed_mask is not None:
        pred = warp_mask(sample.moving_mask, field)
        gt = sample.fixed_mask
    return evaluation_report(
        field,
        pred=pred,
        gt=gt,
        fixed=sample.fixed,
        warped=warped,
        ssim_kernel=_odd_kernel(sample.fixed.shape),
    )


def _load_model(checkpoint: str):
    model, payload = load_checkpoint(checkpoint)
    stats = payload.get("stats_obj")
    if stats is None:
        raise IngestError(f"checkpoint {checkpoint} lacks field statistics")
    meta = payload.get("schedule") or {}
    sched = make_linear_schedule(
        meta.get("beta_start", DEFAULT_BETA_START),
        meta.get("beta_end", DEFAULT_BETA_END),
        meta.get("T_train", DEFAULT_T_TRAIN),
    )
    model.eval()
    return model, stats, sched


def _pick_sample(ds, sample_id, manifest):
    ids = ds.sample_ids()
    if not ids:
        raise IngestError(f"no samples found in {manifest}")
    sid = sample_id or ids[0]
    if sid not in ids:
        raise IngestError(f"sample {sid!r} not found in {manifest}")
    return ds[ids.index(sid)]


# -- subcommands --------------------------------------------------------------


def cmd_ingest(v: dict) -> int:
    if not v["input"]:
        raise ValueError("--input directory is required")
    for key in ("crop", "resample"):
        if v[key] is not None and len(v[key]) != 3:
            raise ValueError(f"--{key} needs exactly three values, got {v[key]}")
    manifest = ingest_niftis(
        v["input"],
        v["out"],
        crop=v["crop"],
        resample=v["resample"],
        test_fraction=v["test_fraction"],
    )
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_synth(v: dict) -> int:
    s = int(v["shape"])
    manifest = make_synth_dataset(
        v["out"],
        n_train=v["train_pairs"],
        n_test=v["test_pairs"],
        shape=(s, s, s),
        deform_amplitude=v["amplitude"],
        seed=v["seed"],
    )
    print(f"wrote {manifest} ({v['train_pairs']} train / {v['test_pairs']} test)")
    return EXIT_OK


def cmd_train(v: dict) -> int:
    if not v["manifest"]:
        raise ValueError("--manifest is required")
    dataset = load_dataset(v["manifest"], split="train")
    val_dataset = None
    if v["val_split"] and v["val_split"] != "none":
        candidate = load_dataset(v["manifest"], split=v["val_split"])
        if len(candidate) > 0:
            val_dataset = candidate

    disabled = set(v["disable"] or ())
    unknown = disabled - set(_ABLATION_TOKENS)
    if unknown:
        raise ValueError(f"unknown --disable values: {sorted(unknown)}")
    cfg = TrainConfig(
        max_epochs=v["epochs"],
        batch_size=v["batch_size"],
        lr=v["lr"],
        weight_decay=v["weight_decay"],
        seed=v["seed"],
        beta_start=v["beta_start"],
        beta_end=v["beta_end"],
        T_train=v["t_train"],
        loss_weights=LossWeights(
            lambda1=v["lambda1"], lambda2=v["lambda2"], ssim_kernel=v["ssim_kernel"]
        ),
        ablations=AblationFlags(
            use_phi0="phi0" not in disabled,
            time_resblocks="time-resblocks" not in disabled,
            condition_mask="condition-mask" not in disabled,
            aux_losses="aux-losses" not in disabled,
        ),
        model=DenoiserConfig(
            patch_size=v["patch_size"],
            embed_dim=v["embed_dim"],
            depths=v["depths"],
            num_heads=v["heads"],
            window_size=v["window_size"],
        ),
        checkpoint_every=v["checkpoint_every"],
        val_pairs=v["val_pairs"],
        val_steps=v["val_steps"],
        val_eta=v["val_eta"],
        aux_t_frac=v["aux_t_frac"],
    )
    resume = v["resume"]
    if resume == "fresh":
        resume = None
    result = train(
        dataset,
        cfg,
        v["out"],
        val_dataset=val_dataset,
        resume_from=resume,
        stop_after_epoch=v["stop_after_epoch"],
    )
    line = f"trained {result.epochs_run} epochs -> {result.checkpoint_path}"
    if result.best_val_dice is not None:
        line += f" (best val dice {result.best_val_dice:.4f})"
    print(line)
    return EXIT_OK


def cmd_sample(v: dict) -> int:
    if not v["checkpoint"] or not v["manifest"]:
        raise ValueError("--checkpoint and --manifest are required")
    model, stats, sched = _load_model(v["checkpoint"])
    ds = load_dataset(v["manifest"], split=v["split"])
    sample = _pick_sample(ds, v["sample_id"], v["manifest"])

    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    kind = "ddim" if v["ddim"] else "ddpm"
    scfg = SamplerConfig(kind=kind, num_steps=v["steps"], eta=v["eta"], seed=v["seed"])
    stop_at = v["stop_at"]
    every = v["snapshot_every"]
    records = []

    def on_step(snap):
        ab = sched.alpha_bar(snap.t)
        resid = snap.phi_t.disp - (ab ** 0.5) * snap.phi0_hat.disp
        records.append(
            {
                "step": snap.step_index,
                "t": snap.t,
                "num_steps": snap.num_steps,
                "residual_abs": float(resid.abs().mean()),
                "noise_power": float((resid ** 2).mean()),
            }
        )
        if every and (snap.step_index % every == 0 or snap.step_index == snap.num_steps):
            phi0 = denormalize_field(snap.phi0_hat, stats)
            np.save(
                out / f"phi0_step{snap.step_index:04d}.npy",
                phi0.disp.numpy().astype(np.float32),
            )
        if stop_at is not None and snap.step_index >= stop_at:
            raise StopSampling()

    with torch.no_grad():
        res = run_sampler(
            model.denoise, sample.fixed, sample.moving, scfg, sched,
            stats=stats, on_step=on_step,
        )

    with open(out / "snapshots.ndjson", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    np.save(out / "field.npy", res.field.disp.numpy().astype(np.float32))
    warped = warp(sample.moving, res.field)
    np.save(out / "warped.npy", warped.data.numpy().astype(np.float32))
    report = _report_for(sample, res.field)
    report.pop("_definitions", None)
    summary = {
        "sample_id": sample.id,
        "kind": kind,
        "steps_requested": v["steps"],
        "steps_run": res.steps_run,
        "early_stopped": res.early_stopped,
        "seed": v["seed"],
        "metrics": report,
    }
    (out / "result.json").write_text(json.dumps(summary, indent=2))
    print(f"sampled {sample.id}: {res.steps_run}/{v['steps']} steps -> {out}")
    return EXIT_OK


def cmd_eval(v: dict) -> int:
    if not v["manifest"]:
        raise ValueError("--manifest is required")
    ds = load_dataset(v["manifest"], split=v["split"])
    ids = ds.sample_ids()
    if not ids:
        raise IngestError(f"no samples in split {v['split']!r} of {v['manifest']}")

    if v["field"]:
        mode = "field"
        sample = _pick_sample(ds, v["sample_id"], v["manifest"])
        targets = [sample.id]
    elif v["identity"]:
        mode = "identity"
        targets = ids
    elif v["checkpoint"]:
        mode = "checkpoint"
        targets = ids
        model, stats, sched = _load_model(v["checkpoint"])
        kind = "ddim" if v["ddim"] else "ddpm"
    else:
        raise ValueError("one of --checkpoint, --identity or --field is required")

    rows = {}
    definitions = None
    for sid in targets:
        sample = ds[ids.index(sid)]
        if mode == "field":
            disp = np.load(v["field"])
            if disp.shape != (3, *sample.fixed.shape):
                raise DimensionMismatch(
                    f"field file {v['field']}: shape {disp.shape} does not match "
                    f"sample {sid!r} with volume {sample.fixed.shape}"
                )
            field = DeformationField(
                torch.from_numpy(np.ascontiguousarray(disp, dtype=np.float32)),
                normalized=False,
            )
        elif mode == "identity":
            field = DeformationField(
                torch.zeros((3, *sample.fixed.shape)), normalized=False
            )
        else:
            scfg = SamplerConfig(
                kind=kind, num_steps=v["steps"], eta=v["eta"], seed=v["seed"]
            )
            with torch.no_grad():
                res = run_sampler(
                    model.denoise, sample.fixed, sample.moving, scfg, sched, stats=stats
                )
            field = res.field
        report = _report_for(sample, field)
        definitions = report.pop("_definitions", definitions)
        if sample.moving_mask is not None and sample.fixed_mask is not None:
            identity = DeformationField(
                torch.zeros((3, *sample.fixed.shape)), normalized=False
            )
            baseline = evaluation_report(
                identity, pred=sample.moving_mask, gt=sample.fixed_mask
            )
            report["dice_identity"] = baseline["dice_overall"]
        rows[sid] = report

    keys = sorted({k for r in rows.values() for k in r if isinstance(r[k], (int, float))})
    summary = {
        k: float(np.mean([r[k] for r in rows.values() if k in r])) for k in keys
    }
    doc = {
        "manifest": str(v["manifest"]),
        "split": v["split"],
        "mode": mode,
        "samples": rows,
        "summary": summary,
        "definitions": definitions,
    }
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2))
    shown = {k: round(val, 4) for k, val in summary.items()}
    print(f"evaluated {len(rows)} sample(s) [{mode}] -> {out}: {shown}")
    return EXIT_OK


def cmd_serve(v: dict) -> int:
    serve(v["results"], host=v["host"], port=v["port"], slots=v["slots"])
    return EXIT_OK


# -- parser / dispatch ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fieldreg",
        description="Deformable registration by denoising deformation fields.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, func):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="TOML/JSON settings file")
        sp.set_defaults(func=func)
        return sp

    sp = add("ingest", "convert NIfTI volumes to the manifest layout", cmd_ingest)
    sp.add_argument("--input", help="directory of <id>_fixed/_moving NIfTI files")
    sp.add_argument("--out", help="output dataset directory")
    sp.add_argument("--crop", type=_int_tuple, help="center-crop D,H,W")
    sp.add_argument("--resample", type=_int_tuple, help="resample to D,H,W")
    sp.add_argument("--test-fraction", type=float, dest="test_fraction")

    sp = add("synth", "generate a synthetic paired dataset", cmd_synth)
    sp.add_argument("--out", help="output dataset directory")
    sp.add_argument("--train-pairs", type=int, dest="train_pairs")
    sp.add_argument("--test-pairs", type=int, dest="test_pairs")
    sp.add_argument("--shape", type=int, help="cubic edge length in voxels")
    sp.add_argument("--amplitude", type=float, help="deformation scale in voxels")
    sp.add_argument("--seed", type=int)

    sp = add("train", "fit the denoiser on a manifest dataset", cmd_train)
    sp.add_argument("--manifest", help="dataset manifest path")
    sp.add_argument("--out", help="run directory for checkpoints/logs")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float, dest="weight_decay")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--t-train", type=int, dest="t_train")
    sp.add_argument("--beta-start", type=float, dest="beta_start")
    sp.add_argument("--beta-end", type=float, dest="beta_end")
    sp.add_argument("--lambda1", type=float, help="image-similarity weight")
    sp.add_argument("--lambda2", type=float, help="smoothness weight")
    sp.add_argument("--ssim-kernel", type=int, dest="ssim_kernel")
    sp.add_argument("--patch-size", type=int, dest="patch_size")
    sp.add_argument("--embed-dim", type=int, dest="embed_dim")
    sp.add_argument("--depths", type=_int_tuple, help="blocks per stage, e.g. 2,2,2")
    sp.add_argument("--heads", type=_int_tuple, help="heads per stage, e.g. 3,6,12")
    sp.add_argument("--window-size", type=int, dest="window_size")
    sp.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    sp.add_argument("--val-split", dest="val_split", help="'none' disables validation")
    sp.add_argument("--val-pairs", type=int, dest="val_pairs")
    sp.add_argument("--val-steps", type=int, dest="val_steps")
    sp.add_argument("--val-eta", type=float, dest="val_eta")
    sp.add_argument(
        "--aux-t-frac", type=float, dest="aux_t_frac",
        help="apply image/smoothness losses only for t <= frac * T",
    )
    sp.add_argument(
        "--disable",
        action="append",
        choices=_ABLATION_TOKENS,
        help="switch off a training component (repeatable)",
    )
    sp.add_argument("--resume", help="'auto', 'fresh', or a checkpoint path")
    sp.add_argument("--stop-after-epoch", type=int, dest="stop_after_epoch")

    sp = add("sample", "run offline sampling, writing trajectory snapshots", cmd_sample)
    sp.add_argument("--checkpoint", help="trained model checkpoint")
    sp.add_argument("--manifest", help="dataset manifest path")
    sp.add_argument("--sample-id", dest="sample_id")
    sp.add_argument("--split")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ddim", action=argparse.BooleanOptionalAction)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--stop-at", type=int, dest="stop_at",
                    help="accept the estimate at this step and stop")
    sp.add_argument("--snapshot-every", type=int, dest="snapshot_every",
                    help="write the running estimate every N steps (0 disables)")

    sp = add("eval", "compute Dice/NJD/JSD/SSIM over a split", cmd_eval)
    sp.add_argument("--manifest", help="dataset manifest path")
    sp.add_argument("--split")
    sp.add_argument("--checkpoint", help="register each pair with this model")
    sp.add_argument("--identity", action=argparse.BooleanOptionalAction,
                    help="evaluate the zero-deformation baseline")
    sp.add_argument("--field", help="evaluate a stored .npy field (one sample)")
    sp.add_argument("--sample-id", dest="sample_id")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ddim", action=argparse.BooleanOptionalAction)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="metrics report path (.json)")

    sp = add("serve", "launch the steering HTTP service", cmd_serve)
    sp.add_argument("--results", help="directory for accepted results")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--slots", type=int, help="concurrent sampling slots")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        settings = resolve_settings(args)
        return args.func(settings)
    except (IngestError, FileNotFoundError, KeyError, DimensionMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
