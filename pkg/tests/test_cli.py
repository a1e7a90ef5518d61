"""Command line behavior: exit codes, config precedence, output determinism.

Everything runs in-process through ``main`` so coverage tools and
monkeypatching work; the console entry point calls the same function.
"""
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from fieldreg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main, resolve_settings
from fieldreg.data import (
    RegistrationSample,
    load_dataset,
    write_manifest,
    write_nifti,
    write_sample,
)
from fieldreg.fields import SegMask, Volume
from fieldreg.network import DenoiserConfig, FieldDenoiser, save_checkpoint

TINY = DenoiserConfig(
    patch_size=2,
    embed_dim=8,
    depths=(1, 1),
    num_heads=(2, 2),
    window_size=2,
    time_embed_dim=16,
    decoder_dim=8,
)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    rc = main([
        "synth", "--out", str(root), "--train-pairs", "3", "--test-pairs", "2",
        "--shape", "12", "--amplitude", "1.5", "--seed", "3",
    ])
    assert rc == EXIT_OK
    return root


@pytest.fixture(scope="module")
def manifest(synth_dir):
    return synth_dir / "manifest.json"


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, manifest):
    ds = load_dataset(manifest, split="train")
    torch.manual_seed(9)
    model = FieldDenoiser(TINY)
    path = tmp_path_factory.mktemp("cli_ckpt") / "model.pt"
    save_checkpoint(
        path, model, stats=ds.stats,
        schedule={"beta_start": 1e-6, "beta_end": 1e-2, "T_train": 60},
    )
    return path


@pytest.fixture(scope="module")
def twin_mask_manifest(tmp_path_factory):
    """One-pair dataset whose fixed and moving masks are the same grid."""
    root = tmp_path_factory.mktemp("twin")
    labels = torch.zeros((10, 10, 10), dtype=torch.int64)
    labels[2:6, 3:8, 2:9] = 1
    labels[6:9, 1:4, 1:5] = 2
    mask = SegMask(labels, label_ids=frozenset({1, 2}))
    rng = np.random.default_rng(4)
    vol = Volume(torch.from_numpy(rng.random((10, 10, 10), dtype=np.float32)))
    sample = RegistrationSample(
        id="twin0", fixed=vol, moving=vol, fixed_mask=mask, moving_mask=mask
    )
    entry = write_sample(sample, root)
    return write_manifest(root, [entry], split={"train": ["twin0"]}, stats=None)


class TestParsing:
    def test_no_arguments_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_subcommand(self):
        assert main(["transmogrify"]) == EXIT_USAGE

    def test_bad_flag_value(self):
        assert main(["sample", "--steps", "soon"]) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "synth" in capsys.readouterr().out

    def test_missing_required_inputs(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE
        assert main(["sample", "--out", str(tmp_path)]) == EXIT_USAGE
        assert main(["ingest", "--out", str(tmp_path)]) == EXIT_USAGE


class TestConfigPrecedence:
    def parse(self, argv):
        return build_parser().parse_args(argv)

    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = tmp_path / "settings.toml"
        cfg.write_text('seed = 4\namplitude = 3.5\n[synth]\nshape = 10\n')
        merged = resolve_settings(
            self.parse(["synth", "--config", str(cfg), "--seed", "9"])
        )
        assert merged["seed"] == 9  # flag wins
        assert merged["shape"] == 10  # section value
        assert merged["amplitude"] == 3.5  # flat value
        assert merged["train_pairs"] == 16  # untouched default

    def test_json_config(self, tmp_path):
        cfg = tmp_path / "settings.json"
        cfg.write_text(json.dumps({"seed": 5, "synth": {"shape": 11}}))
        merged = resolve_settings(self.parse(["synth", "--config", str(cfg)]))
        assert merged["seed"] == 5
        assert merged["shape"] == 11

    def test_unknown_section_key_rejected(self, tmp_path):
        cfg = tmp_path / "settings.json"
        cfg.write_text(json.dumps({"synth": {"bogus": 1}}))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_missing_config_file_is_data_error(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.toml")]) == EXIT_DATA


class TestSynth:
    def test_writes_manifest_with_splits(self, synth_dir, manifest):
        doc = json.loads(manifest.read_text())
        assert len(doc["split"]["train"]) == 3
        assert len(doc["split"]["test"]) == 2
        assert doc["stats"] is not None

    def test_idempotent_given_seed(self, tmp_path):
        argv = ["synth", "--train-pairs", "2", "--test-pairs", "1",
                "--shape", "10", "--seed", "8"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(argv + ["--out", str(tmp_path / "b")]) == EXIT_OK
        ma = (tmp_path / "a" / "manifest.json").read_text()
        mb = (tmp_path / "b" / "manifest.json").read_text()
        assert ma == mb
        doc = json.loads(ma)
        rel = doc["samples"][0]["arrays"]["fixed"]["path"]
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestIngest:
    def _write_pair(self, d, sid, rng, with_mask=False):
        shape = (8, 8, 8)
        write_nifti(d / f"{sid}_fixed.nii", rng.random(shape, dtype=np.float32))
        write_nifti(d / f"{sid}_moving.nii", rng.random(shape, dtype=np.float32))
        if with_mask:
            labels = (rng.random(shape) > 0.5).astype(np.int16)
            write_nifti(d / f"{sid}_fixed_mask.nii", labels)
            write_nifti(d / f"{sid}_moving_mask.nii", labels)

    def test_converts_directory(self, tmp_path, capsys):
        src = tmp_path / "nifti"
        src.mkdir()
        rng = np.random.default_rng(0)
        self._write_pair(src, "pa", rng, with_mask=True)
        self._write_pair(src, "pb", rng)
        rc = main(["ingest", "--input", str(src), "--out", str(tmp_path / "ds")])
        assert rc == EXIT_OK
        ds = load_dataset(tmp_path / "ds" / "manifest.json")
        assert len(ds) == 2

    def test_missing_moving_names_sample(self, tmp_path, capsys):
        src = tmp_path / "nifti"
        src.mkdir()
        rng = np.random.default_rng(1)
        write_nifti(src / "lonely_fixed.nii", rng.random((8, 8, 8), dtype=np.float32))
        rc = main(["ingest", "--input", str(src), "--out", str(tmp_path / "ds")])
        assert rc == EXIT_DATA
        assert "lonely" in capsys.readouterr().err

    def test_empty_directory_is_data_error(self, tmp_path, capsys):
        src = tmp_path / "empty"
        src.mkdir()
        rc = main(["ingest", "--input", str(src), "--out", str(tmp_path / "ds")])
        assert rc == EXIT_DATA
        assert str(src) in capsys.readouterr().err


class TestEval:
    def test_identity_field_on_identical_masks_gives_dice_one(
        self, twin_mask_manifest, tmp_path
    ):
        zero = tmp_path / "zero.npy"
        np.save(zero, np.zeros((3, 10, 10, 10), dtype=np.float32))
        report_path = tmp_path / "report.json"
        rc = main([
            "eval", "--manifest", str(twin_mask_manifest), "--split", "train",
            "--field", str(zero), "--sample-id", "twin0",
            "--out", str(report_path),
        ])
        assert rc == EXIT_OK
        doc = json.loads(report_path.read_text())
        assert doc["samples"]["twin0"]["dice_overall"] == 1.0

    def test_identity_mode_matches_baseline_column(self, manifest, tmp_path):
        report_path = tmp_path / "report.json"
        rc = main([
            "eval", "--manifest", str(manifest), "--split", "test",
            "--identity", "--out", str(report_path),
        ])
        assert rc == EXIT_OK
        doc = json.loads(report_path.read_text())
        assert doc["mode"] == "identity"
        for row in doc["samples"].values():
            assert row["dice_overall"] == row["dice_identity"]
            assert row["njd_pct"] == 0.0

    def test_field_shape_mismatch_is_data_error(self, manifest, tmp_path, capsys):
        bad = tmp_path / "bad.npy"
        np.save(bad, np.zeros((3, 4, 4, 4), dtype=np.float32))
        rc = main([
            "eval", "--manifest", str(manifest), "--split", "test",
            "--field", str(bad), "--out", str(tmp_path / "r.json"),
        ])
        assert rc == EXIT_DATA
        assert "bad.npy" in capsys.readouterr().err

    def test_mode_required(self, manifest, tmp_path):
        rc = main(["eval", "--manifest", str(manifest), "--out", str(tmp_path / "r.json")])
        assert rc == EXIT_USAGE

    def test_missing_manifest_is_data_error(self, tmp_path):
        rc = main([
            "eval", "--manifest", str(tmp_path / "absent.json"), "--identity",
            "--out", str(tmp_path / "r.json"),
        ])
        assert rc == EXIT_DATA

    def test_checkpoint_mode_reports_all_split_samples(
        self, manifest, checkpoint, tmp_path
    ):
        report_path = tmp_path / "report.json"
        rc = main([
            "eval", "--manifest", str(manifest), "--split", "test",
            "--checkpoint", str(checkpoint), "--steps", "4", "--ddim",
            "--out", str(report_path),
        ])
        assert rc == EXIT_OK
        doc = json.loads(report_path.read_text())
        assert len(doc["samples"]) == 2
        assert "dice_overall" in doc["summary"]
        assert "dice_identity" in doc["summary"]
        assert "ssim" in doc["summary"]


class TestSample:
    def run_sample(self, checkpoint, manifest, out, extra=()):
        return main([
            "sample", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
            "--split", "test", "--out", str(out), "--steps", "10", "--seed", "7",
            *extra,
        ])

    def test_same_seed_twice_gives_identical_files(self, checkpoint, manifest, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run_sample(checkpoint, manifest, a, ["--ddim"]) == EXIT_OK
        assert self.run_sample(checkpoint, manifest, b, ["--ddim"]) == EXIT_OK
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        assert "field.npy" in names and "snapshots.ndjson" in names
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_ancestral_sampler_also_deterministic(self, checkpoint, manifest, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run_sample(checkpoint, manifest, a) == EXIT_OK
        assert self.run_sample(checkpoint, manifest, b) == EXIT_OK
        assert (a / "field.npy").read_bytes() == (b / "field.npy").read_bytes()

    def test_stop_at_accepts_early(self, checkpoint, manifest, tmp_path):
        out = tmp_path / "early"
        rc = self.run_sample(checkpoint, manifest, out, ["--stop-at", "4"])
        assert rc == EXIT_OK
        result = json.loads((out / "result.json").read_text())
        assert result["early_stopped"] is True
        assert result["steps_run"] == 4
        lines = (out / "snapshots.ndjson").read_text().splitlines()
        assert len(lines) == 4

    def test_snapshot_files_written_at_stride(self, checkpoint, manifest, tmp_path):
        out = tmp_path / "snaps"
        rc = self.run_sample(checkpoint, manifest, out, ["--snapshot-every", "5"])
        assert rc == EXIT_OK
        assert (out / "phi0_step0005.npy").exists()
        assert (out / "phi0_step0010.npy").exists()
        field = np.load(out / "phi0_step0010.npy")
        assert field.shape == (3, 12, 12, 12)

    def test_unknown_sample_names_it(self, checkpoint, manifest, tmp_path, capsys):
        rc = main([
            "sample", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
            "--sample-id", "phantom", "--out", str(tmp_path / "o"),
        ])
        assert rc == EXIT_DATA
        assert "phantom" in capsys.readouterr().err

    def test_missing_checkpoint_is_data_error(self, manifest, tmp_path):
        rc = main([
            "sample", "--checkpoint", str(tmp_path / "absent.pt"),
            "--manifest", str(manifest), "--out", str(tmp_path / "o"),
        ])
        assert rc == EXIT_DATA

    def test_zero_steps_is_usage_error(self, checkpoint, manifest, tmp_path):
        rc = main([
            "sample", "--checkpoint", str(checkpoint), "--manifest", str(manifest),
            "--out", str(tmp_path / "o"), "--steps", "0",
        ])
        assert rc == EXIT_USAGE


class TestTrain:
    TRAIN_FLAGS = [
        "--embed-dim", "8", "--depths", "1,1", "--heads", "2,2",
        "--window-size", "2", "--patch-size", "2", "--t-train", "50",
        "--checkpoint-every", "1", "--val-steps", "2", "--val-pairs", "1",
        "--ssim-kernel", "5", "--seed", "0",
    ]

    def test_short_run_writes_artifacts(self, manifest, tmp_path, capsys):
        run_dir = tmp_path / "run"
        rc = main([
            "train", "--manifest", str(manifest), "--out", str(run_dir),
            "--epochs", "2", *self.TRAIN_FLAGS,
        ])
        assert rc == EXIT_OK
        assert (run_dir / "latest.pt").exists()
        log = (run_dir / "train_log.ndjson").read_text().splitlines()
        assert {json.loads(l)["epoch"] for l in log} == {0, 1}
        assert "trained 2 epochs" in capsys.readouterr().out

    def test_interrupt_and_resume_completes(self, manifest, tmp_path):
        run_dir = tmp_path / "run"
        base = [
            "train", "--manifest", str(manifest), "--out", str(run_dir),
            "--epochs", "2", "--val-split", "none", *self.TRAIN_FLAGS,
        ]
        assert main(base + ["--stop-after-epoch", "0"]) == EXIT_OK
        assert main(base) == EXIT_OK
        log = (run_dir / "train_log.ndjson").read_text().splitlines()
        assert {json.loads(l)["epoch"] for l in log} == {0, 1}

    def test_disable_flags_reach_checkpoint_config(self, manifest, tmp_path):
        run_dir = tmp_path / "run"
        rc = main([
            "train", "--manifest", str(manifest), "--out", str(run_dir),
            "--epochs", "0", "--val-split", "none",
            "--disable", "condition-mask", *self.TRAIN_FLAGS,
        ])
        assert rc == EXIT_OK
        payload = torch.load(run_dir / "latest.pt", weights_only=True)
        assert payload["config"]["mask_style"] == "full"

    def test_bad_model_arithmetic_is_usage_error(self, manifest, tmp_path):
        rc = main([
            "train", "--manifest", str(manifest), "--out", str(tmp_path / "r"),
            "--epochs", "1", "--embed-dim", "9", "--depths", "1,1",
            "--heads", "2,2", "--window-size", "2",
        ])
        assert rc == EXIT_USAGE

    def test_missing_manifest_is_data_error(self, tmp_path):
        rc = main([
            "train", "--manifest", str(tmp_path / "absent.json"),
            "--out", str(tmp_path / "r"), "--epochs", "1",
        ])
        assert rc == EXIT_DATA


class TestServe:
    def test_flags_reach_server(self, tmp_path, monkeypatch):
        seen = {}

        def fake_serve(results, host, port, slots):
            seen.update(results=results, host=host, port=port, slots=slots)

        monkeypatch.setattr("fieldreg.cli.serve", fake_serve)
        rc = main([
            "serve", "--results", str(tmp_path), "--port", "9001", "--slots", "2",
        ])
        assert rc == EXIT_OK
        assert seen == {
            "results": str(tmp_path), "host": "127.0.0.1", "port": 9001, "slots": 2,
        }
