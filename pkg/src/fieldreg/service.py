"""Steering server: sampling runs as managed jobs over HTTP.

Each run executes in a worker thread. Control commands travel through a
per-run queue drained between sampling steps, so pause/stop latency is at
most one step. Every emitted event is kept in an in-memory log, letting a
stream subscriber join late and still replay the full ordered history;
events carry a schema version ``v`` and slice pixels as base64-encoded
little-endian float32 rows.

Results (the accepted deformation field, the warped volume, metrics) are
persisted with write-temp-then-rename so a crashed server never leaves a
truncated artifact behind.
"""
from __future__ import annotations

import base64
import hashlib
import json
import queue
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from .data import load_dataset
from .diffusion import SamplerConfig, make_linear_schedule
from .diffusion import sample as run_sampler
from .errors import StopSampling
from .fields import denormalize_field, warp, warp_mask
from .metrics import evaluation_report, njd
from .network import load_checkpoint
from .objectives import ssim3d

SCHEMA_VERSION = 1

_TERMINAL = frozenset({"stopped_early", "completed", "failed"})


class StartRunRequest(BaseModel):
    checkpoint: str
    manifest: str
    sample_id: str
    split: Optional[str] = None
    kind: str = "ddim"
    num_steps: int = 50
    eta: float = 0.0
    seed: int = 0
    stride: int = 1
    slice_axis: int = 0
    slice_index: Optional[int] = None
    step_delay_ms: int = 0  # artificial per-step delay, for demos/tests
    guidance: Optional[dict] = None  # reserved; no semantics yet


class ControlRequest(BaseModel):
    command: str
    stride: Optional[int] = None
    axis: Optional[int] = None
    index: Optional[int] = None


@dataclass
class _Run:
    run_id: str
    request: StartRunRequest
    status: str = "pending"
    current_t: Optional[int] = None
    current_step: int = 0
    num_steps: int = 0
    stride: int = 1
    slice_axis: int = 0
    slice_index: Optional[int] = None
    snapshot_digest: Optional[str] = None
    error: Optional[str] = None
    early_stopped: bool = False
    events: list = field(default_factory=list)
    commands: "queue.Queue" = field(default_factory=queue.Queue)
    lock: threading.Lock = field(default_factory=threading.Lock)
    cond: threading.Condition = None
    pause_requested: bool = False
    stop_requested: bool = False
    result: Optional[dict] = None

    def __post_init__(self):
        self.cond = threading.Condition(self.lock)
        self.num_steps = self.request.num_steps
        self.stride = self.request.stride
        self.slice_axis = self.request.slice_axis
        self.slice_index = self.request.slice_index

    def state(self) -> dict:
        with self.lock:
            return {
                "v": SCHEMA_VERSION,
                "run_id": self.run_id,
                "status": self.status,
                "current_t": self.current_t,
                "current_step": self.current_step,
                "num_steps": self.num_steps,
                "stride": self.stride,
                "slice": {"axis": self.slice_axis, "index": self.slice_index},
                "snapshot_digest": self.snapshot_digest,
                "error": self.error,
                "config": self.request.model_dump(),
            }


def _b64_slice(arr: np.ndarray, axis: int, index: int) -> dict:
    plane = np.take(arr, index, axis=axis).astype("<f4")
    return {
        "shape": list(plane.shape),
        "axis": axis,
        "index": index,
        "data": base64.b64encode(plane.tobytes()).decode("ascii"),
    }


def _field_digest(disp: torch.Tensor) -> str:
    return hashlib.sha256(
        disp.detach().numpy().astype("<f4").tobytes()
    ).hexdigest()


def _atomic_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class SteeringService:
    """Run registry plus a FIFO worker pool (one in-flight run per slot)."""

    def __init__(self, result_dir, slots: int = 1):
        self.result_dir = Path(result_dir)
        self.result_dir.mkdir(parents=True, exist_ok=True)
        self._runs: dict[str, _Run] = {}
        self._registry_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=slots)

    # -- lifecycle -------------------------------------------------------

    def submit(self, request: StartRunRequest) -> dict:
        if request.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if request.stride < 1:
            raise ValueError("stride must be >= 1")
        if request.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler kind {request.kind!r}")
        if request.slice_axis not in (0, 1, 2):
            raise ValueError("slice_axis must be 0, 1 or 2")
        run = _Run(run_id=uuid.uuid4().hex[:12], request=request)
        with self._registry_lock:
            self._runs[run.run_id] = run
        self._pool.submit(self._execute, run)
        return run.state()

    def shutdown(self):
        with self._registry_lock:
            runs = list(self._runs.values())
        for run in runs:
            with run.cond:
                run.stop_requested = True
                run.pause_requested = False
                run.cond.notify_all()
        self._pool.shutdown(wait=True)

    def _get(self, run_id: str) -> _Run:
        with self._registry_lock:
            if run_id not in self._runs:
                raise KeyError(run_id)
            return self._runs[run_id]

    def state(self, run_id: str) -> dict:
        return self._get(run_id).state()

    def list_states(self) -> list[dict]:
        with self._registry_lock:
            runs = list(self._runs.values())
        return [r.state() for r in runs]

    # -- control ---------------------------------------------------------

    def control(self, run_id: str, cmd: ControlRequest) -> dict:
        run = self._get(run_id)
        with run.lock:
            status = run.status
        if status in _TERMINAL:
            raise PermissionError(f"run {run_id} is {status}; command rejected")
        name = cmd.command
        if name == "pause" or name == "resume":
            if status == "pending":
                raise ValueError(f"cannot {name} a pending run")
        elif name == "stop_and_accept":
            if status == "pending":
                raise ValueError("cannot stop a run that has not started")
        elif name == "set_stream_stride":
            if cmd.stride is None or cmd.stride < 1:
                raise ValueError("set_stream_stride needs stride >= 1")
        elif name == "set_slice":
            if cmd.axis not in (0, 1, 2):
                raise ValueError("set_slice needs axis in {0, 1, 2}")
            if cmd.index is None or cmd.index < 0:
                raise ValueError("set_slice needs a non-negative index")
        else:
            raise ValueError(f"unknown command {name!r}")
        run.commands.put(cmd)
        with run.cond:
            run.cond.notify_all()
        return run.state()

    # -- streaming -------------------------------------------------------

    def events(self, run_id: str):
        """Yield the ordered event history, following live until terminal."""
        run = self._get(run_id)
        i = 0
        while True:
            with run.cond:
                while i >= len(run.events):
                    run.cond.wait(timeout=0.2)
                batch = run.events[i:]
                i = len(run.events)
            for ev in batch:
                yield ev
            if batch[-1]["type"] == "terminal":
                return

    # -- results ---------------------------------------------------------

    def result(self, run_id: str) -> dict:
        run = self._get(run_id)
        with run.lock:
            if run.status == "failed":
                return {
                    "v": SCHEMA_VERSION,
                    "run_id": run_id,
                    "status": "failed",
                    "reason": run.error,
                }
            if run.result is None:
                raise FileNotFoundError(f"run {run_id} has no result yet")
            return dict(run.result)

    # -- worker ----------------------------------------------------------

    def _emit(self, run: _Run, event: dict) -> None:
        event = {"v": SCHEMA_VERSION, "run_id": run.run_id, **event}
        with run.cond:
            run.events.append(event)
            run.cond.notify_all()

    def _set_status(self, run: _Run, status: str, emit: bool = True) -> None:
        with run.lock:
            run.status = status
            step, t = run.current_step, run.current_t
        if emit:
            self._emit(run, {"type": "state", "status": status, "step": step, "t": t})

    def _drain_commands(self, run: _Run) -> None:
        while True:
            try:
                cmd = run.commands.get_nowait()
            except queue.Empty:
                return
            with run.lock:
                if cmd.command == "pause":
                    run.pause_requested = True
                elif cmd.command == "resume":
                    run.pause_requested = False
                elif cmd.command == "stop_and_accept":
                    run.stop_requested = True
                    run.pause_requested = False
                elif cmd.command == "set_stream_stride":
                    run.stride = cmd.stride
                elif cmd.command == "set_slice":
                    run.slice_axis = cmd.axis
                    run.slice_index = cmd.index

    def _execute(self, run: _Run) -> None:
        req = run.request
        try:
            model, payload = load_checkpoint(req.checkpoint)
            stats = payload.get("stats_obj")
            if stats is None:
                raise ValueError(f"checkpoint {req.checkpoint} lacks field statistics")
            meta = payload.get("schedule") or {}
            sched = make_linear_schedule(
                meta.get("beta_start", 1e-6),
                meta.get("beta_end", 1e-2),
                meta.get("T_train", 2000),
            )
            sample = self._load_sample(req)
        except Exception as e:  # bad checkpoint/sample -> immediate failed state
            with run.lock:
                run.error = str(e)
            self._set_status(run, "failed", emit=False)
            self._emit(run, {"type": "terminal", "status": "failed",
                             "steps_run": 0, "early_stopped": False,
                             "reason": str(e)})
            return

        self._set_status(run, "running")
        model.eval()
        delay = max(0, req.step_delay_ms) / 1000.0

        def on_step(snap):
            if delay:
                time.sleep(delay)
            emitted = False

            def emit_snapshot():
                nonlocal emitted
                if emitted:
                    return
                emitted = True
                self._emit_snapshot(run, snap, sample, stats, sched)

            self._drain_commands(run)
            with run.lock:
                run.current_t = snap.t
                run.current_step = snap.step_index
                stop = run.stop_requested
                pause = run.pause_requested
                stride = run.stride
            if stop:
                emit_snapshot()
                raise StopSampling()
            if snap.step_index % stride == 0 or snap.step_index == snap.num_steps:
                emit_snapshot()
            if pause:
                self._set_status(run, "paused")
                while True:
                    with run.cond:
                        run.cond.wait(timeout=0.1)
                    self._drain_commands(run)
                    with run.lock:
                        stop = run.stop_requested
                        pause = run.pause_requested
                    if stop:
                        emit_snapshot()
                        raise StopSampling()
                    if not pause:
                        break
                self._set_status(run, "running")

        try:
            scfg = SamplerConfig(
                kind=req.kind, num_steps=req.num_steps, eta=req.eta, seed=req.seed
            )
            with torch.no_grad():
                outcome = run_sampler(
                    model.denoise, sample.fixed, sample.moving, scfg, sched,
                    stats=stats, on_step=on_step,
                )
            result = self._persist(run, outcome, sample)
            with run.lock:
                run.result = result
                run.early_stopped = outcome.early_stopped
            status = "stopped_early" if outcome.early_stopped else "completed"
            self._set_status(run, status, emit=False)
            self._emit(run, {"type": "terminal", "status": status,
                             "steps_run": outcome.steps_run,
                             "early_stopped": outcome.early_stopped})
        except Exception as e:
            with run.lock:
                run.error = str(e)
            self._set_status(run, "failed", emit=False)
            self._emit(run, {"type": "terminal", "status": "failed",
                             "steps_run": run.current_step,
                             "early_stopped": False, "reason": str(e)})

    def _load_sample(self, req: StartRunRequest):
        splits = [req.split] if req.split else ["train", "test"]
        last_err = None
        for split in splits:
            try:
                ds = load_dataset(req.manifest, split=split)
            except Exception as e:
                last_err = e
                continue
            ids = ds.sample_ids()
            if req.sample_id in ids:
                return ds[ids.index(req.sample_id)]
        if last_err is not None:
            raise last_err
        raise KeyError(f"sample {req.sample_id!r} not found in {req.manifest}")

    def _emit_snapshot(self, run, snap, sample, stats, sched) -> None:
        phi0 = denormalize_field(snap.phi0_hat, stats)
        warped = warp(sample.moving, phi0)
        shape = sample.fixed.shape
        with run.lock:
            axis = run.slice_axis
            index = run.slice_index
        if index is None or not (0 <= index < shape[axis]):
            index = shape[axis] // 2
        # residual noise: what remains of phi_t once the clean estimate is
        # removed, i.e. sqrt(1 - abar_t) * eps_hat
        ab = sched.alpha_bar(snap.t)
        resid = snap.phi_t.disp - (ab ** 0.5) * snap.phi0_hat.disp
        kernel = min(9, min(shape) if min(shape) % 2 else min(shape) - 1)
        metrics = {
            "ssim": float(ssim3d(sample.fixed, warped, kernel=kernel)),
            "njd_pct": njd(phi0),
            "residual_abs": float(resid.abs().mean()),
            "noise_power": float((resid ** 2).mean()),
        }
        digest = _field_digest(phi0.disp)
        with run.lock:
            run.snapshot_digest = digest
        fixed_np = sample.fixed.data.numpy()
        warped_np = warped.data.numpy()
        phi_np = phi0.disp.numpy()
        self._emit(run, {
            "type": "snapshot",
            "t": snap.t,
            "step": snap.step_index,
            "num_steps": snap.num_steps,
            "elapsed_s": snap.wall_time_s,
            "digest": digest,
            "metrics": metrics,
            "fixed": _b64_slice(fixed_np, axis, index),
            "warped": _b64_slice(warped_np, axis, index),
            "phi0": [_b64_slice(phi_np[c], axis, index) for c in range(3)],
        })

    def _persist(self, run: _Run, outcome, sample) -> dict:
        out = self.result_dir / run.run_id
        out.mkdir(parents=True, exist_ok=True)
        disp = outcome.field.disp.detach().numpy().astype("<f4")
        warped = warp(sample.moving, outcome.field)
        warped_np = warped.data.numpy().astype("<f4")
        _atomic_bytes(out / "field.raw", disp.tobytes())
        _atomic_bytes(out / "warped.raw", warped_np.tobytes())
        pred = gt = None
        if sample.moving_mask is not None and sample.fixed_mask is not None:
            pred = warp_mask(sample.moving_mask, outcome.field)
            gt = sample.fixed_mask
        kernel = min(9, min(sample.fixed.shape)
                     if min(sample.fixed.shape) % 2 else min(sample.fixed.shape) - 1)
        metrics = evaluation_report(
            outcome.field, pred=pred, gt=gt, fixed=sample.fixed, warped=warped,
            ssim_kernel=kernel,
        )
        result = {
            "v": SCHEMA_VERSION,
            "run_id": run.run_id,
            "status": "stopped_early" if outcome.early_stopped else "completed",
            "steps_run": outcome.steps_run,
            "early_stopped": outcome.early_stopped,
            "field": {
                "path": str(out / "field.raw"),
                "shape": list(disp.shape),
                "dtype": "float32",
                "sha256": hashlib.sha256(disp.tobytes()).hexdigest(),
            },
            "warped": {
                "path": str(out / "warped.raw"),
                "shape": list(warped_np.shape),
                "dtype": "float32",
                "sha256": hashlib.sha256(warped_np.tobytes()).hexdigest(),
            },
            "metrics": {k: v for k, v in metrics.items() if k != "_definitions"},
        }
        _atomic_bytes(out / "result.json", json.dumps(result, indent=2).encode())
        return result


def create_app(result_dir, slots: int = 1) -> FastAPI:
    """Build the HTTP app around a fresh service instance."""
    service = SteeringService(result_dir, slots=slots)

    @asynccontextmanager
    async def lifespan(app):
        yield
        service.shutdown()

    app = FastAPI(title="fieldreg steering service", lifespan=lifespan)
    app.state.service = service

    @app.post("/runs")
    def start_run(req: StartRunRequest):
        try:
            return service.submit(req)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/runs")
    def list_runs():
        return service.list_states()

    @app.get("/runs/{run_id}")
    def run_state(run_id: str):
        try:
            return service.state(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")

    @app.post("/runs/{run_id}/control")
    def run_control(run_id: str, cmd: ControlRequest):
        try:
            return service.control(run_id, cmd)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")
        except PermissionError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/runs/{run_id}/result")
    def run_result(run_id: str):
        try:
            return service.result(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")
        except FileNotFoundError as e:
            raise HTTPException(status_code=409, detail=str(e))

    @app.get("/runs/{run_id}/stream")
    def run_stream(run_id: str):
        try:
            service.state(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no run {run_id}")

        def gen():
            for ev in service.events(run_id):
                yield json.dumps(ev) + "\n"

        return StreamingResponse(gen(), media_type="application/x-ndjson")

    return app


def serve(result_dir, host: str = "127.0.0.1", port: int = 8000, slots: int = 1):
    """Blocking entry point used by the command line."""
    import uvicorn

    uvicorn.run(create_app(result_dir, slots=slots), host=host, port=port)
