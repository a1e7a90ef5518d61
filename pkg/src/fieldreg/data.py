"""Dataset plumbing: a versioned JSON manifest over raw little-endian
array blobs, deterministic synthetic pair generation at desk scale, field
statistics, and a small NIfTI-1 converter.

On-disk layout: one directory per sample holding ``<name>.raw`` blobs
(float32 for images and fields, int32 for masks) plus one ``manifest.json``
at the root declaring shape, dtype, and sha256 per array. The format is
language-neutral and round-trips bit-exactly.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import DimensionMismatch, IngestError
from .fields import DeformationField, FieldStats, SegMask, Volume, warp, warp_mask
from .metrics import njd

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_DTYPES = {"float32": "<f4", "int32": "<i4"}


@dataclass(frozen=True)
class RegistrationSample:
    """One fixed/moving pair with optional masks and field annotations."""

    id: str
    fixed: Volume
    moving: Volume
    fixed_mask: Optional[SegMask] = None
    moving_mask: Optional[SegMask] = None
    phi0: Optional[DeformationField] = None
    phi_gt: Optional[DeformationField] = field(default=None, repr=False)

    def __post_init__(self):
        shape = self.fixed.shape
        grids = {
            "moving": self.moving.shape,
            "fixed_mask": self.fixed_mask.labels.shape if self.fixed_mask else shape,
            "moving_mask": self.moving_mask.labels.shape if self.moving_mask else shape,
            "phi0": self.phi0.spatial_shape if self.phi0 else shape,
            "phi_gt": self.phi_gt.spatial_shape if self.phi_gt else shape,
        }
        for name, s in grids.items():
            if tuple(s) != tuple(shape):
                raise DimensionMismatch(
                    f"sample {self.id!r}: {name} grid {tuple(s)} != fixed grid {tuple(shape)}"
                )


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_blob(root: Path, rel: str, arr: np.ndarray, dtype: str) -> dict:
    out = arr.astype(_DTYPES[dtype]).tobytes(order="C")
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(out)
    return {"path": rel, "dtype": dtype, "shape": list(arr.shape), "sha256": _sha256(out)}


def _read_blob(root: Path, ref: dict, sample_id: str) -> np.ndarray:
    path = root / ref["path"]
    if not path.exists():
        raise IngestError(f"sample {sample_id!r}: missing file {ref['path']}")
    raw = path.read_bytes()
    shape = tuple(ref["shape"])
    dtype = np.dtype(_DTYPES[ref["dtype"]])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise IngestError(
            f"sample {sample_id!r}: {ref['path']} holds {len(raw)} bytes, "
            f"declared shape {shape} needs {expected}"
        )
    if _sha256(raw) != ref["sha256"]:
        raise IngestError(f"sample {sample_id!r}: checksum mismatch on {ref['path']}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_sample(sample: RegistrationSample, root: Path) -> dict:
    """Persist one sample's arrays under ``root/<id>/``; returns its
    manifest entry."""
    root = Path(root)
    arrays = {
        "fixed": _write_blob(root, f"{sample.id}/fixed.raw", sample.fixed.data.numpy(), "float32"),
        "moving": _write_blob(root, f"{sample.id}/moving.raw", sample.moving.data.numpy(), "float32"),
    }
    entry: dict = {"id": sample.id, "arrays": arrays}
    if sample.fixed_mask is not None:
        arrays["fixed_mask"] = _write_blob(
            root, f"{sample.id}/fixed_mask.raw", sample.fixed_mask.labels.numpy(), "int32"
        )
    if sample.moving_mask is not None:
        arrays["moving_mask"] = _write_blob(
            root, f"{sample.id}/moving_mask.raw", sample.moving_mask.labels.numpy(), "int32"
        )
        entry["labels"] = sorted(sample.moving_mask.label_ids)
    if sample.phi0 is not None:
        arrays["phi0"] = _write_blob(
            root, f"{sample.id}/phi0.raw", sample.phi0.disp.numpy(), "float32"
        )
    if sample.phi_gt is not None:
        arrays["phi_gt"] = _write_blob(
            root, f"{sample.id}/phi_gt.raw", sample.phi_gt.disp.numpy(), "float32"
        )
    return entry


def write_manifest(
    root: Path,
    entries: Sequence[dict],
    split: dict,
    stats: Optional[FieldStats] = None,
) -> Path:
    doc = {
        "version": MANIFEST_VERSION,
        "split": {k: list(v) for k, v in split.items()},
        "stats": None
        if stats is None
        else {"mu": list(stats.mu), "sigma": list(stats.sigma)},
        "samples": list(entries),
    }
    path = Path(root) / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.rename(path)
    return path


def _normalize_intensities(arr: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0,1], but only when values fall outside it, so
    already-normalized volumes round-trip bit-exactly."""
    lo, hi = float(arr.min()), float(arr.max())
    if 0.0 <= lo and hi <= 1.0:
        return arr
    if hi - lo < 1e-12:
        return np.clip(arr, 0.0, 1.0)
    return ((arr - lo) / (hi - lo)).astype(arr.dtype)


class ManifestDataset:
    """Lazy, validated view over a manifest directory.

    Iteration and indexing materialize one sample at a time; blob bytes are
    checksummed on read and failures name the offending sample.
    """

    def __init__(self, manifest_path: Path, split: Optional[str] = None):
        self.root = Path(manifest_path).parent
        try:
            doc = json.loads(Path(manifest_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read manifest {manifest_path}: {exc}") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise IngestError(f"unsupported manifest version {doc.get('version')!r}")
        self.split = {k: list(v) for k, v in doc.get("split", {}).items()}
        self.stats = (
            FieldStats(mu=tuple(doc["stats"]["mu"]), sigma=tuple(doc["stats"]["sigma"]))
            if doc.get("stats")
            else None
        )
        entries = {e["id"]: e for e in doc["samples"]}
        if split is not None:
            if split not in self.split:
                raise IngestError(f"manifest has no split {split!r}")
            wanted = self.split[split]
            missing = [i for i in wanted if i not in entries]
            if missing:
                raise IngestError(f"split {split!r} references unknown samples {missing}")
            self._entries = [entries[i] for i in wanted]
        else:
            self._entries = list(doc["samples"])
        for e in self._entries:
            for name, ref in e["arrays"].items():
                if not (self.root / ref["path"]).exists():
                    raise IngestError(f"sample {e['id']!r}: missing file {ref['path']}")

    def __len__(self) -> int:
        return len(self._entries)

    def sample_ids(self) -> list[str]:
        return [e["id"] for e in self._entries]

    def __getitem__(self, index: int) -> RegistrationSample:
        e = self._entries[index]
        sid = e["id"]
        arrays = e["arrays"]

        def vol(name: str) -> Volume:
            arr = _read_blob(self.root, arrays[name], sid)
            return Volume(torch.from_numpy(_normalize_intensities(arr)))

        def mask(name: str) -> Optional[SegMask]:
            if name not in arrays:
                return None
            arr = _read_blob(self.root, arrays[name], sid)
            ids = frozenset(e.get("labels") or np.unique(arr[arr != 0]).tolist())
            return SegMask(torch.from_numpy(arr).to(torch.int64), label_ids=ids)

        def fld(name: str) -> Optional[DeformationField]:
            if name not in arrays:
                return None
            arr = _read_blob(self.root, arrays[name], sid)
            return DeformationField(torch.from_numpy(arr), normalized=False)

        return RegistrationSample(
            id=sid,
            fixed=vol("fixed"),
            moving=vol("moving"),
            fixed_mask=mask("fixed_mask"),
            moving_mask=mask("moving_mask"),
            phi0=fld("phi0"),
            phi_gt=fld("phi_gt"),
        )

    def __iter__(self) -> Iterator[RegistrationSample]:
        for i in range(len(self)):
            yield self[i]


def load_dataset(manifest_path: Path, split: Optional[str] = None) -> ManifestDataset:
    return ManifestDataset(manifest_path, split=split)


def compute_field_stats(samples) -> FieldStats:
    """Per-channel mean and population std over all initialization-field
    voxels of the given samples."""
    count = 0
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    for s in samples:
        if s.phi0 is None:
            raise IngestError(f"sample {s.id!r} has no initialization field")
        d = s.phi0.disp.to(torch.float64)
        total += d.sum(dim=(1, 2, 3))
        total_sq += (d * d).sum(dim=(1, 2, 3))
        count += d[0].numel()
    if count == 0:
        raise IngestError("no samples given")
    mu = total / count
    var = total_sq / count - mu * mu
    if bool((var < 1e-16).any()):
        raise ValueError("degenerate field statistics: a channel has (near-)zero variance")
    sigma = var.sqrt()
    return FieldStats(mu=tuple(mu.tolist()), sigma=tuple(sigma.tolist()))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(
        rng.standard_normal(shape).astype(np.float64), sigma=sigma, mode="nearest"
    )


def _smooth_field(rng: np.random.Generator, shape, sigma: float, amplitude: float) -> np.ndarray:
    f = np.stack([_smooth_noise(rng, shape, sigma) for _ in range(3)])
    peak = float(np.abs(f).max())
    if amplitude == 0.0 or peak == 0.0:
        return np.zeros_like(f)
    return f * (amplitude / peak)


def synth_pair(
    seed: int,
    shape=(16, 16, 16),
    deform_amplitude: float = 2.0,
    max_attempts: int = 8,
) -> RegistrationSample:
    """Deterministic synthetic registration pair with ground truth.

    The moving image is a two-scale textured background plus a two-label
    ellipsoid (shell and core) with matching masks. The texture carries
    contrast in every local window so an image-similarity term is
    informative everywhere — on a flat background, sliding structure out
    of frame and comparing border smear against background is nearly as
    good as aligning, and models find that. The ground-truth field
    combines a rigid translation of roughly ``deform_amplitude`` voxels
    with Gaussian-smoothed noise at half that peak, redrawn until
    fold-free — the translation is what actually moves the phantom, so
    the unregistered overlap drops well below perfect. The fixed image is
    the moving image pulled through that field. The initialization field
    is the ground truth plus a small smooth perturbation, imitating an
    imperfect pre-registration. The fine texture scale draws from a
    stream derived from ``seed``, so masks and fields are unaffected by
    its presence.
    """
    rng = np.random.default_rng(seed)
    coarse = _smooth_noise(rng, shape, sigma=2.0)
    fine = _smooth_noise(np.random.default_rng([seed, 1]), shape, sigma=0.9)

    def unit(a: np.ndarray) -> np.ndarray:
        lo, hi = a.min(), a.max()
        return (a - lo) / max(hi - lo, 1e-12)

    bg = 0.08 + 0.55 * (0.6 * unit(coarse) + 0.4 * unit(fine))

    center = np.array(shape, dtype=np.float64) / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    semi = np.array(shape, dtype=np.float64) / 3.2 * rng.uniform(0.85, 1.15, size=3)
    zz, yy, xx = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    r2 = (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    )
    core = r2 <= 0.45
    shell = (r2 <= 1.0) & ~core
    img = bg.copy()
    img[shell] = 0.55
    img[core] = 0.85
    img = ndimage.gaussian_filter(img, sigma=0.6, mode="nearest")
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    labels = np.zeros(shape, dtype=np.int64)
    labels[shell] = 1
    labels[core] = 2

    direction = rng.standard_normal(3)
    direction /= max(float(np.linalg.norm(direction)), 1e-12)
    shift = direction * deform_amplitude * rng.uniform(0.9, 1.1)
    phi = None
    for attempt in range(max_attempts):
        resid = _smooth_field(rng, shape, sigma=2.5, amplitude=0.5 * deform_amplitude)
        cand = resid + shift[:, None, None, None]
        cand_f = DeformationField(torch.from_numpy(cand.astype(np.float32)), normalized=False)
        if njd(cand_f) == 0.0:
            phi = cand_f
            break
    if phi is None:
        raise IngestError(
            f"could not draw a fold-free field at amplitude {deform_amplitude} "
            f"after {max_attempts} attempts"
        )

    moving = Volume(torch.from_numpy(img))
    moving_mask = SegMask(torch.from_numpy(labels), label_ids=frozenset({1, 2}))
    fixed = warp(moving, phi)
    fixed_mask = warp_mask(moving_mask, phi)

    perturb = _smooth_field(rng, shape, sigma=2.5, amplitude=0.15 * deform_amplitude)
    phi0 = DeformationField(
        phi.disp + torch.from_numpy(perturb.astype(np.float32)), normalized=False
    )
    return RegistrationSample(
        id=f"synth-{seed:06d}",
        fixed=fixed,
        moving=moving,
        fixed_mask=fixed_mask,
        moving_mask=moving_mask,
        phi0=phi0,
        phi_gt=phi,
    )


def make_synth_dataset(
    out_dir: Path,
    n_train: int,
    n_test: int,
    shape=(16, 16, 16),
    deform_amplitude: float = 2.0,
    seed: int = 0,
) -> Path:
    """Generate and persist a synthetic dataset; returns the manifest path.

    Field statistics are computed on the training split and embedded in the
    manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    train_ids, test_ids = [], []
    train_samples = []
    for i in range(n_train + n_test):
        s = synth_pair(seed + i, shape=shape, deform_amplitude=deform_amplitude)
        entries.append(write_sample(s, out_dir))
        if i < n_train:
            train_ids.append(s.id)
            train_samples.append(s)
        else:
            test_ids.append(s.id)
    stats = compute_field_stats(train_samples)
    return write_manifest(
        out_dir, entries, split={"train": train_ids, "test": test_ids}, stats=stats
    )


# --- NIfTI-1 conversion -----------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64, 512: np.uint16}


def read_nifti(path: Path):
    """Minimal single-file NIfTI-1 reader.

    Returns (array, spacing): the array in (Z, Y, X) index order (a 4D file
    keeps its trailing component axis first: (C, Z, Y, X)), spacing as the
    matching per-axis voxel sizes. Handles gzip, both byte orders, and
    slope/intercept scaling. Obscure corners (extensions, qform/sform) are
    ignored.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise IngestError(f"{path}: too short for a NIfTI-1 header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from(order + "i", blob, 0)
    if sizeof_hdr != 348:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(order + "i", blob, 0)
        if sizeof_hdr != 348:
            raise IngestError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
    magic = blob[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise IngestError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(order + "8h", blob, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise IngestError(f"{path}: implausible dim[0]={ndim}")
    (datatype,) = struct.unpack_from(order + "h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise IngestError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from(order + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(order + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", blob, 112)

    shape_xyz = [max(1, d) for d in dim[1 : 1 + max(ndim, 3)]]
    np_dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape_xyz))
    data = np.frombuffer(blob, dtype=np_dtype, count=count, offset=int(vox_offset))
    # file order is x-fastest; reversing the axes gives C-order (…, Z, Y, X)
    arr = data.reshape(shape_xyz[::-1]).astype(np_dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        arr = arr.astype(np.float32) * scl_slope + scl_inter
    spacing = tuple(float(p) for p in pixdim[1:4][::-1])
    return arr, spacing


def write_nifti(path: Path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Minimal NIfTI-1 writer for (Z, Y, X) arrays (gzip if path ends .gz)."""
    arr = np.asarray(arr)
    if arr.ndim not in (3, 4):
        raise IngestError("write_nifti expects a 3D (Z,Y,X) or 4D (C,Z,Y,X) array")
    codes = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}
    if arr.dtype not in codes:
        arr = arr.astype(np.float32)
    datatype = codes[arr.dtype]
    shape_xyz = list(arr.shape[::-1])
    dim = [arr.ndim] + shape_xyz + [1] * (7 - len(shape_xyz))
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, arr.dtype.itemsize * 8)
    pixdim = [1.0] + list(spacing[::-1]) + [1.0] * (7 - min(len(spacing), 7))
    struct.pack_into("<8f", header, 76, *pixdim[:8])
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    payload = bytes(header) + b"\x00" * 4 + arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def _center_crop(arr: np.ndarray, target) -> np.ndarray:
    slices = []
    for cur, want in zip(arr.shape[-3:], target):
        if want > cur:
            raise IngestError(f"crop target {tuple(target)} exceeds volume shape {arr.shape[-3:]}")
        start = (cur - want) // 2
        slices.append(slice(start, start + want))
    return arr[(..., *slices)]


def _resample(arr: np.ndarray, target, order: int) -> np.ndarray:
    factors = [t / c for t, c in zip(target, arr.shape[-3:])]
    if arr.ndim == 4:
        return np.stack([ndimage.zoom(c, factors, order=order, mode="nearest") for c in arr])
    return ndimage.zoom(arr, factors, order=order, mode="nearest")


def ingest_niftis(
    input_dir: Path,
    out_dir: Path,
    crop=None,
    resample=None,
    test_fraction: float = 0.2,
) -> Path:
    """Convert a directory of ``<id>_fixed.nii[.gz]`` / ``<id>_moving.nii[.gz]``
    files (optional ``_fixed_mask``/``_moving_mask``/``_phi0``) into the raw
    manifest layout. Intensities are min-max normalized to [0,1]; masks use
    nearest-neighbour resampling; displacement components are rescaled when
    the grid is resampled. The last ceil(test_fraction · n) ids (sorted)
    form the test split.
    """
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    pairs: dict[str, dict] = {}
    for p in sorted(input_dir.iterdir()):
        name = p.name
        for suffix in (".nii.gz", ".nii"):
            if name.endswith(suffix):
                stem = name[: -len(suffix)]
                for role in ("fixed_mask", "moving_mask", "phi0", "fixed", "moving"):
                    if stem.endswith("_" + role):
                        sid = stem[: -(len(role) + 1)]
                        pairs.setdefault(sid, {})[role] = p
                        break
                break
    if not pairs:
        raise IngestError(f"no NIfTI pairs found under {input_dir}")

    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    ids = []
    for sid, roles in sorted(pairs.items()):
        if "fixed" not in roles or "moving" not in roles:
            raise IngestError(f"sample {sid!r}: needs both _fixed and _moving volumes")

        def prep(role: str, is_mask: bool = False, is_field: bool = False):
            arr, _ = read_nifti(roles[role])
            arr = np.asarray(arr)
            if is_field:
                if arr.ndim != 4 or arr.shape[0] != 3:
                    raise IngestError(
                        f"sample {sid!r}: initialization field must be (3, Z, Y, X), got {arr.shape}"
                    )
            elif arr.ndim != 3:
                raise IngestError(f"sample {sid!r}: {role} must be 3D, got shape {arr.shape}")
            if crop is not None:
                arr = _center_crop(arr, crop)
            if resample is not None:
                src = arr.shape[-3:]
                arr = _resample(arr, resample, order=0 if is_mask else 1)
                if is_field:
                    for c, (t, s) in enumerate(zip(resample, src)):
                        arr[c] *= t / s
            if is_mask:
                return arr.astype(np.int64)
            if is_field:
                return arr.astype(np.float32)
            return _normalize_intensities(arr.astype(np.float32))

        fixed = Volume(torch.from_numpy(prep("fixed")))
        moving = Volume(torch.from_numpy(prep("moving")))
        fixed_mask = moving_mask = None
        if "fixed_mask" in roles:
            lab = prep("fixed_mask", is_mask=True)
            fixed_mask = SegMask(
                torch.from_numpy(lab), label_ids=frozenset(np.unique(lab[lab != 0]).tolist())
            )
        if "moving_mask" in roles:
            lab = prep("moving_mask", is_mask=True)
            moving_mask = SegMask(
                torch.from_numpy(lab), label_ids=frozenset(np.unique(lab[lab != 0]).tolist())
            )
        phi0 = None
        if "phi0" in roles:
            phi0 = DeformationField(
                torch.from_numpy(prep("phi0", is_field=True)), normalized=False
            )
        sample = RegistrationSample(
            id=sid, fixed=fixed, moving=moving,
            fixed_mask=fixed_mask, moving_mask=moving_mask, phi0=phi0,
        )
        entries.append(write_sample(sample, out_dir))
        ids.append(sid)

    n_test = int(np.ceil(test_fraction * len(ids))) if test_fraction > 0 else 0
    split = {"train": ids[: len(ids) - n_test], "test": ids[len(ids) - n_test :]}
    manifest = write_manifest(out_dir, entries, split=split, stats=None)
    train_with_phi0 = [s for s in load_dataset(manifest, split="train") if s.phi0 is not None]
    if train_with_phi0:
        try:
            stats = compute_field_stats(train_with_phi0)
        except ValueError:
            stats = None  # constant fields: leave stats for the caller
        if stats is not None:
            manifest = write_manifest(out_dir, entries, split=split, stats=stats)
    return manifest
