"""Deformation-field data model: volumes, displacement fields, warping,
Jacobian analytics, and z-score normalization.

Conventions (fixed once, used everywhere):
  * Displacements are pull-based and in voxel units: warped(x) = moving(x + phi(x)).
  * Field channel order is (depth, height, width) displacement.
  * Out-of-grid samples clamp to the border.
  * Fields carry a ``normalized`` flag; warping and Jacobian analysis require
    physical (denormalized) values.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionMismatch, FieldStateError

Spacing = tuple[float, float, float]


def _as_tensor(x, dtype=None) -> torch.Tensor:
    # float32/float64 pass through (double precision kept for gradient checks)
    t = torch.as_tensor(x)
    if dtype is not None and t.dtype not in (torch.float32, torch.float64):
        t = t.to(dtype)
    return t


@dataclass(frozen=True)
class Volume:
    """Scalar 3D image grid of shape (D, H, W)."""

    data: torch.Tensor
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_tensor(self.data, torch.float32))
        if self.data.ndim != 3:
            raise DimensionMismatch(f"volume must be 3D (D,H,W), got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class DeformationField:
    """Dense displacement field of shape (3, D, H, W), voxel units unless
    ``normalized`` is set (then per-channel z-scored units)."""

    disp: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "disp", _as_tensor(self.disp, torch.float32))
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise DimensionMismatch(
                f"deformation field must have shape (3,D,H,W), got {tuple(self.disp.shape)}"
            )
        if not torch.isfinite(self.disp).all():
            raise ValueError("deformation field contains non-finite values")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.disp.shape[1:])

    def zeros_like(self) -> "DeformationField":
        return DeformationField(torch.zeros_like(self.disp), normalized=self.normalized)


@dataclass(frozen=True)
class SegMask:
    """Integer label grid of shape (D, H, W); 0 is background."""

    labels: torch.Tensor
    label_ids: frozenset[int]

    def __post_init__(self):
        labels = torch.as_tensor(self.labels)
        if labels.dtype.is_floating_point:
            raise ValueError("segmentation labels must be integer-typed")
        labels = labels.to(torch.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_ids", frozenset(int(v) for v in self.label_ids))
        if labels.ndim != 3:
            raise DimensionMismatch(f"mask must be 3D (D,H,W), got shape {tuple(labels.shape)}")
        allowed = self.label_ids | {0}
        present = set(torch.unique(labels).tolist())
        if not present <= allowed:
            raise ValueError(f"mask contains labels {sorted(present - allowed)} outside label_ids")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class FieldStats:
    """Per-channel z-score statistics of a field population."""

    mu: tuple[float, float, float]
    sigma: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        object.__setattr__(self, "sigma", tuple(float(v) for v in self.sigma))
        if len(self.mu) != 3 or len(self.sigma) != 3:
            raise ValueError("stats need exactly 3 channels")
        if any(s <= 0 for s in self.sigma):
            raise ValueError(f"sigma must be strictly positive, got {self.sigma}")

    def as_tensors(self, dtype=torch.float32):
        mu = torch.tensor(self.mu, dtype=dtype).view(3, 1, 1, 1)
        sigma = torch.tensor(self.sigma, dtype=dtype).view(3, 1, 1, 1)
        return mu, sigma


# Statistics of the cardiac-MR pre-registration fields used as the
# z-scoring default when a dataset ships no stats of its own.
ACDC_FIELD_STATS = FieldStats(mu=(0.0014, -0.0758, -0.1493), sigma=(0.4636, 1.1375, 1.2221))


def identity_coords(shape: tuple[int, int, int], dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-index coordinate grid of shape (3, D, H, W)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    grid = torch.meshgrid(*axes, indexing="ij")
    return torch.stack(grid, dim=0)


def trilinear_pull(data: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Sample ``data`` (D,H,W) at x + disp(x) with trilinear weights and
    border clamping. Differentiable in both arguments."""
    if data.shape != disp.shape[1:]:
        raise DimensionMismatch(f"image shape {tuple(data.shape)} != field shape {tuple(disp.shape[1:])}")
    D, H, W = data.shape
    coords = identity_coords((D, H, W), dtype=disp.dtype, device=disp.device) + disp
    lims = (D - 1, H - 1, W - 1)
    cs = [coords[a].clamp(0.0, float(lims[a])) for a in range(3)]
    lo = [c.floor() for c in cs]
    frac = [c - f for c, f in zip(cs, lo)]
    i0 = [f.long().clamp(0, lims[a]) for a, f in enumerate(lo)]
    i1 = [(f + 1).clamp(0, lims[a]) for a, f in enumerate(i0)]

    out = torch.zeros_like(cs[0])
    for dz in (0, 1):
        wz = frac[0] if dz else 1.0 - frac[0]
        iz = i1[0] if dz else i0[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            iy = i1[1] if dy else i0[1]
            for dx in (0, 1):
                wx = frac[2] if dx else 1.0 - frac[2]
                ix = i1[2] if dx else i0[2]
                out = out + data[iz, iy, ix] * (wz * wy * wx)
    return out


def _require_physical(field: DeformationField, op: str) -> None:
    if field.normalized:
        raise FieldStateError(f"{op} requires a denormalized field (voxel units)")


def warp(moving: Volume, field: DeformationField) -> Volume:
    """Warp ``moving`` by ``field``: output(x) = moving(x + field(x))."""
    _require_physical(field, "warp")
    if moving.shape != field.spatial_shape:
        raise DimensionMismatch(f"moving shape {moving.shape} != field shape {field.spatial_shape}")
    return Volume(trilinear_pull(moving.data, field.disp), spacing=moving.spacing)


def warp_mask(mask: SegMask, field: DeformationField) -> SegMask:
    """Warp a label grid with nearest-neighbor lookup under the same
    x + phi(x) pull convention as :func:`warp`."""
    _require_physical(field, "warp_mask")
    if mask.shape != field.spatial_shape:
        raise DimensionMismatch(f"mask shape {mask.shape} != field shape {field.spatial_shape}")
    D, H, W = mask.shape
    coords = identity_coords((D, H, W), dtype=field.disp.dtype, device=field.disp.device) + field.disp
    idx = coords.round().long()
    iz = idx[0].clamp(0, D - 1)
    iy = idx[1].clamp(0, H - 1)
    ix = idx[2].clamp(0, W - 1)
    return SegMask(mask.labels[iz, iy, ix], label_ids=mask.label_ids)


def jacobian_determinant(field: DeformationField) -> torch.Tensor:
    """Per-voxel det(I + grad(phi)) of the map x -> x + phi(x).

    Central differences in the interior, one-sided at the faces.
    Returns a (D, H, W) tensor.
    """
    _require_physical(field, "jacobian_determinant")
    shape = field.spatial_shape
    if min(shape) < 2:
        raise DimensionMismatch(f"jacobian needs every axis >= 2, got shape {shape}")
    # grads[c][a] = d phi_c / d axis_a
    grads = [torch.gradient(field.disp[c], dim=(0, 1, 2), edge_order=1) for c in range(3)]
    j = [[grads[c][a] + (1.0 if c == a else 0.0) for a in range(3)] for c in range(3)]
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    return det


def normalize_field(field: DeformationField, stats: FieldStats) -> DeformationField:
    """Per-channel z-score: (phi - mu) / sigma. Requires physical units."""
    if field.normalized:
        raise FieldStateError("field is already normalized")
    mu, sigma = stats.as_tensors(field.disp.dtype)
    return DeformationField((field.disp - mu) / sigma, normalized=True)


def denormalize_field(field: DeformationField, stats: FieldStats) -> DeformationField:
    """Inverse of :func:`normalize_field`: phi * sigma + mu."""
    if not field.normalized:
        raise FieldStateError("field is already in physical units")
    mu, sigma = stats.as_tensors(field.disp.dtype)
    return DeformationField(field.disp * sigma + mu, normalized=False)
