"""Manifest round trips, synthetic pair properties, field statistics, and
NIfTI conversion."""
import gzip
import json
import struct

import numpy as np
import pytest
import torch

from fieldreg.data import (
    ManifestDataset,
    RegistrationSample,
    compute_field_stats,
    ingest_niftis,
    load_dataset,
    make_synth_dataset,
    read_nifti,
    synth_pair,
    write_manifest,
    write_nifti,
    write_sample,
)
from fieldreg.errors import DimensionMismatch, IngestError
from fieldreg.fields import DeformationField, SegMask, Volume, warp_mask
from fieldreg.metrics import dice, njd


def const_sample(sid, value=(1.0, 0.0, -1.0), shape=(4, 4, 4)):
    img = Volume(torch.rand(*shape, generator=torch.Generator().manual_seed(hash(sid) % 1000)))
    disp = torch.zeros(3, *shape)
    for c, v in enumerate(value):
        disp[c] = v
    return RegistrationSample(
        id=sid, fixed=img, moving=img, phi0=DeformationField(disp, normalized=False)
    )


class TestManifest:
    def test_round_trip_bit_exact(self, tmp_path):
        s = synth_pair(7, shape=(10, 10, 10), deform_amplitude=1.5)
        entry = write_sample(s, tmp_path)
        write_manifest(tmp_path, [entry], split={"train": [s.id], "test": []})
        loaded = load_dataset(tmp_path / "manifest.json")[0]
        assert torch.equal(loaded.fixed.data, s.fixed.data)
        assert torch.equal(loaded.moving.data, s.moving.data)
        assert torch.equal(loaded.fixed_mask.labels, s.fixed_mask.labels)
        assert torch.equal(loaded.moving_mask.labels, s.moving_mask.labels)
        assert loaded.moving_mask.label_ids == s.moving_mask.label_ids
        assert torch.equal(loaded.phi0.disp, s.phi0.disp)
        assert torch.equal(loaded.phi_gt.disp, s.phi_gt.disp)
        assert not loaded.phi0.normalized

    def test_empty_manifest(self, tmp_path):
        write_manifest(tmp_path, [], split={"train": [], "test": []})
        ds = load_dataset(tmp_path / "manifest.json")
        assert len(ds) == 0
        assert list(ds) == []

    def test_wrong_declared_shape_names_sample(self, tmp_path):
        s = synth_pair(1, shape=(8, 8, 8))
        entry = write_sample(s, tmp_path)
        entry["arrays"]["fixed"]["shape"] = [8, 8, 9]
        write_manifest(tmp_path, [entry], split={"train": [s.id], "test": []})
        ds = load_dataset(tmp_path / "manifest.json")
        with pytest.raises(IngestError, match=s.id):
            ds[0]

    def test_checksum_failure_names_sample(self, tmp_path):
        s = synth_pair(2, shape=(8, 8, 8))
        entry = write_sample(s, tmp_path)
        blob = tmp_path / s.id / "moving.raw"
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 0xFF
        blob.write_bytes(bytes(raw))
        write_manifest(tmp_path, [entry], split={"train": [s.id], "test": []})
        with pytest.raises(IngestError, match="checksum"):
            load_dataset(tmp_path / "manifest.json")[0]

    def test_missing_file_detected_at_open(self, tmp_path):
        s = synth_pair(3, shape=(8, 8, 8))
        entry = write_sample(s, tmp_path)
        (tmp_path / s.id / "fixed.raw").unlink()
        write_manifest(tmp_path, [entry], split={"train": [s.id], "test": []})
        with pytest.raises(IngestError, match=s.id):
            load_dataset(tmp_path / "manifest.json")

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"version": 99, "split": {}, "samples": []}))
        with pytest.raises(IngestError, match="version"):
            load_dataset(path)

    def test_split_selection(self, tmp_path):
        a, b = synth_pair(4, shape=(8, 8, 8)), synth_pair(5, shape=(8, 8, 8))
        entries = [write_sample(a, tmp_path), write_sample(b, tmp_path)]
        write_manifest(tmp_path, entries, split={"train": [a.id], "test": [b.id]})
        assert load_dataset(tmp_path / "manifest.json", split="train").sample_ids() == [a.id]
        assert load_dataset(tmp_path / "manifest.json", split="test").sample_ids() == [b.id]
        with pytest.raises(IngestError, match="val"):
            load_dataset(tmp_path / "manifest.json", split="val")


class TestFieldStats:
    def test_hand_computed(self):
        a = const_sample("a", (1.0, 0.0, -1.0))
        b = const_sample("b", (3.0, 2.0, 1.0))
        stats = compute_field_stats([a, b])
        assert stats.mu == pytest.approx((2.0, 1.0, 0.0), abs=1e-12)
        assert stats.sigma == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)

    def test_permutation_invariant(self):
        a = const_sample("a", (1.0, 0.5, -1.0))
        b = const_sample("b", (3.0, 2.0, 1.0))
        c = const_sample("c", (-2.0, 4.0, 0.5))
        s1 = compute_field_stats([a, b, c])
        s2 = compute_field_stats([c, a, b])
        assert s1.mu == pytest.approx(s2.mu, abs=1e-12)
        assert s1.sigma == pytest.approx(s2.sigma, abs=1e-12)

    def test_degenerate_sigma_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            compute_field_stats([const_sample("a")])

    def test_missing_phi0_rejected(self):
        img = Volume(torch.rand(4, 4, 4))
        s = RegistrationSample(id="x", fixed=img, moving=img)
        with pytest.raises(IngestError, match="x"):
            compute_field_stats([s])


class TestSynthPair:
    def test_amplitude_zero_is_identity(self):
        s = synth_pair(11, shape=(10, 10, 10), deform_amplitude=0.0)
        assert torch.equal(s.phi_gt.disp, torch.zeros(3, 10, 10, 10))
        assert torch.equal(s.fixed.data, s.moving.data)
        assert torch.equal(s.phi0.disp, s.phi_gt.disp)

    def test_ground_truth_fold_free(self):
        for seed in range(5):
            s = synth_pair(100 + seed, shape=(12, 12, 12), deform_amplitude=2.0)
            assert njd(s.phi_gt) == 0.0

    def test_same_seed_bit_identical(self):
        a = synth_pair(42, shape=(10, 10, 10), deform_amplitude=1.5)
        b = synth_pair(42, shape=(10, 10, 10), deform_amplitude=1.5)
        assert torch.equal(a.fixed.data, b.fixed.data)
        assert torch.equal(a.moving.data, b.moving.data)
        assert torch.equal(a.phi_gt.disp, b.phi_gt.disp)
        assert torch.equal(a.phi0.disp, b.phi0.disp)
        c = synth_pair(43, shape=(10, 10, 10), deform_amplitude=1.5)
        assert not torch.equal(a.phi_gt.disp, c.phi_gt.disp)

    def test_mask_consistency_by_construction(self):
        s = synth_pair(12, shape=(12, 12, 12), deform_amplitude=2.0)
        rewarped = warp_mask(s.moving_mask, s.phi_gt)
        for label in (1, 2):
            assert dice(rewarped, s.fixed_mask, label) >= 0.99

    def test_image_and_label_structure(self):
        s = synth_pair(13, shape=(12, 12, 12), deform_amplitude=1.0)
        assert float(s.moving.data.min()) >= 0.0
        assert float(s.moving.data.max()) <= 1.0
        assert s.moving_mask.label_ids == frozenset({1, 2})
        assert int((s.moving_mask.labels == 1).sum()) > 0
        assert int((s.moving_mask.labels == 2).sum()) > 0
        assert float(s.phi0.disp.sub(s.phi_gt.disp).abs().max()) > 0.0


class TestMakeSynthDataset:
    def test_generates_loadable_dataset(self, tmp_path):
        manifest = make_synth_dataset(
            tmp_path, n_train=3, n_test=2, shape=(10, 10, 10), deform_amplitude=1.5, seed=5
        )
        full = load_dataset(manifest)
        assert len(full) == 5
        train = load_dataset(manifest, split="train")
        test = load_dataset(manifest, split="test")
        assert len(train) == 3 and len(test) == 2
        assert set(train.sample_ids()).isdisjoint(test.sample_ids())
        assert train.stats is not None
        assert all(sig > 0 for sig in train.stats.sigma)
        s = train[0]
        assert s.phi_gt is not None and s.phi0 is not None
        assert s.fixed_mask is not None


class TestNifti:
    def test_float_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).random((5, 6, 7)).astype(np.float32)
        path = tmp_path / "vol.nii"
        write_nifti(path, arr, spacing=(2.0, 1.5, 1.0))
        back, spacing = read_nifti(path)
        assert np.array_equal(back, arr)
        assert spacing == pytest.approx((2.0, 1.5, 1.0))

    def test_gzip_round_trip(self, tmp_path):
        arr = (np.random.default_rng(1).random((4, 4, 4)) * 100).astype(np.int16)
        path = tmp_path / "vol.nii.gz"
        write_nifti(path, arr)
        back, _ = read_nifti(path)
        assert np.array_equal(back, arr)

    def test_4d_field_round_trip(self, tmp_path):
        arr = np.random.default_rng(2).standard_normal((3, 4, 5, 6)).astype(np.float32)
        path = tmp_path / "field.nii"
        write_nifti(path, arr)
        back, _ = read_nifti(path)
        assert back.shape == (3, 4, 5, 6)
        assert np.array_equal(back, arr)

    def test_big_endian_header(self, tmp_path):
        arr = np.arange(8, dtype=">f4").reshape(2, 2, 2)
        header = bytearray(348)
        struct.pack_into(">i", header, 0, 348)
        struct.pack_into(">8h", header, 40, 3, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into(">h", header, 70, 16)
        struct.pack_into(">h", header, 72, 32)
        struct.pack_into(">8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        struct.pack_into(">f", header, 108, 352.0)
        header[344:348] = b"n+1\x00"
        path = tmp_path / "be.nii"
        path.write_bytes(bytes(header) + b"\x00" * 4 + arr.tobytes())
        back, _ = read_nifti(path)
        assert np.array_equal(back, np.arange(8, dtype=np.float32).reshape(2, 2, 2))

    def test_slope_intercept_applied(self, tmp_path):
        arr = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        path = tmp_path / "scaled.nii"
        write_nifti(path, arr)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<2f", raw, 112, 2.0, 10.0)
        path.write_bytes(bytes(raw))
        back, _ = read_nifti(path)
        assert np.allclose(back, arr * 2.0 + 10.0)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(IngestError):
            read_nifti(path)
        short = tmp_path / "short.nii"
        short.write_bytes(b"123")
        with pytest.raises(IngestError):
            read_nifti(short)


class TestIngest:
    def _write_pair(self, d, sid, shape=(8, 8, 8), with_masks=False, with_phi0=False, seed=0):
        rng = np.random.default_rng(seed)
        fixed = (rng.random(shape) * 500).astype(np.float32)
        moving = (rng.random(shape) * 500).astype(np.float32)
        write_nifti(d / f"{sid}_fixed.nii.gz", fixed)
        write_nifti(d / f"{sid}_moving.nii", moving)
        if with_masks:
            lab = np.zeros(shape, dtype=np.int16)
            lab[2:5, 2:5, 2:5] = 1
            write_nifti(d / f"{sid}_fixed_mask.nii", lab)
            write_nifti(d / f"{sid}_moving_mask.nii", lab)
        if with_phi0:
            phi = rng.standard_normal((3, *shape)).astype(np.float32)
            write_nifti(d / f"{sid}_phi0.nii", phi)

    def test_basic_conversion(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        self._write_pair(src, "pat1", with_masks=True, with_phi0=True, seed=1)
        self._write_pair(src, "pat2", with_phi0=True, seed=2)
        manifest = ingest_niftis(src, tmp_path / "out", test_fraction=0.5)
        ds = load_dataset(manifest)
        assert len(ds) == 2
        s = ds[0]
        assert float(s.fixed.data.min()) >= 0.0 and float(s.fixed.data.max()) <= 1.0
        assert s.fixed_mask is not None and s.fixed_mask.label_ids == frozenset({1})
        train = load_dataset(manifest, split="train")
        assert train.stats is not None

    def test_crop_and_resample(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        shape = (12, 12, 12)
        rng = np.random.default_rng(3)
        write_nifti(src / "a_fixed.nii", (rng.random(shape) * 9).astype(np.float32))
        write_nifti(src / "a_moving.nii", (rng.random(shape) * 9).astype(np.float32))
        phi = np.full((3, *shape), 2.0, dtype=np.float32)
        write_nifti(src / "a_phi0.nii", phi)
        manifest = ingest_niftis(
            src, tmp_path / "out", crop=(10, 10, 10), resample=(5, 5, 5), test_fraction=0.0
        )
        s = load_dataset(manifest)[0]
        assert s.fixed.shape == (5, 5, 5)
        # displacements shrink with the grid: factor 5/10 per axis
        assert torch.allclose(s.phi0.disp, torch.full((3, 5, 5, 5), 1.0), atol=1e-5)

    def test_missing_moving_rejected(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        write_nifti(src / "solo_fixed.nii", np.random.default_rng(4).random((6, 6, 6)).astype(np.float32))
        with pytest.raises(IngestError, match="solo"):
            ingest_niftis(src, tmp_path / "out")

    def test_empty_dir_rejected(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        with pytest.raises(IngestError, match="no NIfTI"):
            ingest_niftis(src, tmp_path / "out")
