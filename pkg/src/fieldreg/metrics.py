"""Registration quality metrics: per-label and union-foreground Dice
overlap, percentage of non-positive Jacobian determinants (folding), and
the spread of the determinant grid (smoothness).

Determinant-based metrics are evaluated on interior voxels only, where
central differences are available and border effects cannot leak in.
"""
from __future__ import annotations

from typing import Iterable, Optional

import torch

from .errors import DimensionMismatch
from .fields import DeformationField, SegMask, Volume, jacobian_determinant
from .objectives import ssim3d


def _check_shapes(pred: SegMask, gt: SegMask) -> None:
    if pred.labels.shape != gt.labels.shape:
        raise DimensionMismatch(
            f"pred {tuple(pred.labels.shape)} != gt {tuple(gt.labels.shape)}"
        )


def dice(pred: SegMask, gt: SegMask, label: int) -> float:
    """Overlap 2|A∩B| / (|A|+|B|) for one label; 1.0 when both are empty."""
    _check_shapes(pred, gt)
    if label == 0 or (label not in pred.label_ids and label not in gt.label_ids):
        raise ValueError(f"label {label} not declared by either mask")
    a = pred.labels == label
    b = gt.labels == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def dice_overall(pred: SegMask, gt: SegMask, labels: Optional[Iterable[int]] = None) -> float:
    """Dice of the union of all foreground labels treated as one region."""
    _check_shapes(pred, gt)
    ids = frozenset(labels) if labels is not None else (pred.label_ids | gt.label_ids)
    ids = ids - {0}
    if not ids:
        raise ValueError("no foreground labels to combine")
    id_tensor = torch.tensor(sorted(ids), dtype=torch.int64)
    a = torch.isin(pred.labels, id_tensor)
    b = torch.isin(gt.labels, id_tensor)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def _interior_determinants(field: DeformationField) -> torch.Tensor:
    if any(s < 3 for s in field.spatial_shape):
        raise DimensionMismatch(
            f"interior metrics need every axis >= 3, got {field.spatial_shape}"
        )
    det = jacobian_determinant(field)
    return det[1:-1, 1:-1, 1:-1]


def njd(field: DeformationField) -> float:
    """Percentage of interior voxels whose det(I + ∇φ) is non-positive."""
    det = _interior_determinants(field)
    return 100.0 * float((det <= 0).sum()) / det.numel()


def jsd(field: DeformationField) -> float:
    """Population standard deviation of det(I + ∇φ) over interior voxels."""
    det = _interior_determinants(field)
    return float(det.std(correction=0))


def evaluation_report(
    field: DeformationField,
    pred: Optional[SegMask] = None,
    gt: Optional[SegMask] = None,
    fixed: Optional[Volume] = None,
    warped: Optional[Volume] = None,
    ssim_kernel: int = 9,
) -> dict:
    """Flat metric → value document, plus a definitions block.

    Segmentation metrics appear when both masks are given; image similarity
    when both images are given. Smoothness metrics are always computed.
    """
    report: dict = {
        "njd_pct": njd(field),
        "jsd": jsd(field),
    }
    if pred is not None and gt is not None:
        fg = sorted((pred.label_ids | gt.label_ids) - {0})
        for lab in fg:
            report[f"dice_label_{lab}"] = dice(pred, gt, lab)
        report["dice_overall"] = dice_overall(pred, gt)
    if fixed is not None and warped is not None:
        report["ssim"] = float(ssim3d(fixed, warped, ssim_kernel))
    report["_definitions"] = {
        "dice_overall": "dice of the union of all foreground labels",
        "njd_pct": "percent of interior voxels with det(I + grad(phi)) <= 0",
        "jsd": "population std of det(I + grad(phi)) over interior voxels",
        "ssim": f"mean local SSIM, uniform {ssim_kernel}^3 window",
    }
    return report
