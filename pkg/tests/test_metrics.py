"""Overlap and smoothness metrics against hand counts and analytic fields."""
import pytest
import torch

from fieldreg.errors import DimensionMismatch
from fieldreg.fields import DeformationField, SegMask, Volume
from fieldreg.metrics import dice, dice_overall, evaluation_report, jsd, njd


def mask_from(labels: torch.Tensor, ids=None) -> SegMask:
    ids = frozenset(ids) if ids is not None else frozenset(labels.unique().tolist()) - {0}
    return SegMask(labels.to(torch.int64), label_ids=ids)


def cube_mask(shape, lo, hi, label=1, ids=None) -> SegMask:
    lab = torch.zeros(shape, dtype=torch.int64)
    lab[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = label
    return mask_from(lab, ids=ids or {label})


class TestDice:
    def test_identical_masks(self):
        m = cube_mask((6, 6, 6), (1, 1, 1), (4, 4, 4))
        assert dice(m, m, 1) == 1.0

    def test_disjoint_equal_size(self):
        a = cube_mask((8, 8, 8), (0, 0, 0), (2, 2, 2))
        b = cube_mask((8, 8, 8), (4, 4, 4), (6, 6, 6))
        assert dice(a, b, 1) == 0.0

    def test_shifted_cube_hand_count(self):
        # 2x2x2 cube against itself shifted one voxel along x:
        # intersection 4, sizes 8 + 8 -> dice 0.5
        a = cube_mask((6, 6, 6), (2, 2, 2), (4, 4, 4))
        b = cube_mask((6, 6, 6), (2, 2, 3), (4, 4, 5))
        assert dice(a, b, 1) == 0.5

    def test_both_empty_is_one(self):
        z = torch.zeros(4, 4, 4, dtype=torch.int64)
        a = mask_from(z, ids={1})
        assert dice(a, a, 1) == 1.0

    def test_symmetry(self):
        g = torch.Generator().manual_seed(0)
        la = (torch.rand(5, 5, 5, generator=g) > 0.5).to(torch.int64)
        lb = (torch.rand(5, 5, 5, generator=g) > 0.5).to(torch.int64)
        a, b = mask_from(la, ids={1}), mask_from(lb, ids={1})
        assert dice(a, b, 1) == dice(b, a, 1)

    def test_unknown_label(self):
        a = cube_mask((4, 4, 4), (0, 0, 0), (2, 2, 2))
        with pytest.raises(ValueError):
            dice(a, a, 7)
        with pytest.raises(ValueError):
            dice(a, a, 0)

    def test_shape_mismatch(self):
        a = cube_mask((4, 4, 4), (0, 0, 0), (2, 2, 2))
        b = cube_mask((4, 4, 5), (0, 0, 0), (2, 2, 2))
        with pytest.raises(DimensionMismatch):
            dice(a, b, 1)


class TestDiceOverall:
    def test_identical(self):
        lab = torch.zeros(6, 6, 6, dtype=torch.int64)
        lab[1:3] = 1
        lab[3:5] = 2
        m = mask_from(lab)
        assert dice_overall(m, m) == 1.0

    def test_missing_label_strictly_below_one(self):
        gt = torch.zeros(6, 6, 6, dtype=torch.int64)
        gt[1:3] = 1
        gt[3:5] = 2
        pred = gt.clone()
        pred[pred == 2] = 0  # label 2 absent in prediction
        a = mask_from(pred, ids={1, 2})
        b = mask_from(gt, ids={1, 2})
        assert dice(a, b, 1) == 1.0
        assert dice_overall(a, b) < 1.0

    def test_three_label_phantom_hand_count(self):
        # pred/gt voxel counts: label1 6 vs 6 overlapping 4; label2 4 vs 4
        # overlapping 2; label3 2 vs 4 overlapping 2
        pred = torch.zeros(4, 4, 4, dtype=torch.int64)
        gt = torch.zeros(4, 4, 4, dtype=torch.int64)
        pred[0, 0, :3] = 1
        pred[0, 1, :3] = 1
        gt[0, 0, 1:4] = 1
        gt[0, 1, 1:4] = 1
        pred[1, 0, :4] = 2
        gt[1, 0, 2:4] = 2
        gt[1, 1, :2] = 2
        pred[2, 0, :2] = 3
        gt[2, 0, :4] = 3
        a = mask_from(pred, ids={1, 2, 3})
        b = mask_from(gt, ids={1, 2, 3})
        assert dice(a, b, 1) == pytest.approx(2 * 4 / (6 + 6))
        assert dice(a, b, 2) == pytest.approx(2 * 2 / (4 + 4))
        assert dice(a, b, 3) == pytest.approx(2 * 2 / (2 + 4))
        # union view: foreground sizes 12 (pred) and 14 (gt); co-located
        # foreground voxels: 4 at z=0, 2 at z=1, 2 at z=2
        assert dice_overall(a, b) == pytest.approx(2 * 8 / (12 + 14))

    def test_explicit_label_subset(self):
        lab = torch.zeros(4, 4, 4, dtype=torch.int64)
        lab[0] = 1
        lab[1] = 2
        m = mask_from(lab)
        assert dice_overall(m, m, labels=[1]) == 1.0
        with pytest.raises(ValueError):
            dice_overall(m, m, labels=[])


class TestNjd:
    def test_zero_field(self):
        f = DeformationField(torch.zeros(3, 5, 5, 5), normalized=False)
        assert njd(f) == 0.0

    def test_fold_everywhere(self):
        # phi_x = -2x gives det(I + grad) = -1 at every voxel
        x = torch.arange(5, dtype=torch.float32)
        disp = torch.zeros(3, 5, 5, 5)
        disp[2] = (-2.0 * x).view(1, 1, 5)
        f = DeformationField(disp, normalized=False)
        assert njd(f) == 100.0

    def test_small_smooth_field_no_folds(self):
        g = torch.Generator().manual_seed(1)
        base = torch.randn(3, 5, 5, 5, generator=g)
        # heavily smoothed, tiny amplitude: determinant stays near one
        smooth = torch.nn.functional.avg_pool3d(
            base.unsqueeze(0), 3, stride=1, padding=1
        ).squeeze(0)
        f = DeformationField(0.05 * smooth, normalized=False)
        assert njd(f) == 0.0

    def test_needs_interior(self):
        f = DeformationField(torch.zeros(3, 2, 5, 5), normalized=False)
        with pytest.raises(DimensionMismatch):
            njd(f)


class TestJsd:
    def test_zero_field(self):
        f = DeformationField(torch.zeros(3, 5, 5, 5), normalized=False)
        assert jsd(f) == 0.0

    def test_affine_constant_determinant(self):
        coords = torch.meshgrid(
            *[torch.arange(5, dtype=torch.float32) for _ in range(3)], indexing="ij"
        )
        disp = torch.stack([0.1 * coords[0], 0.2 * coords[1], -0.05 * coords[2]])
        f = DeformationField(disp, normalized=False)
        assert jsd(f) == pytest.approx(0.0, abs=1e-6)

    def test_two_point_spread(self):
        # x-slope 0 in the lower z half, 2 in the upper: determinants are
        # exactly 1 and 3 on equal interior halves -> std 1.0
        shape = (6, 5, 5)
        s = torch.tensor([0.0, 0.0, 0.0, 2.0, 2.0, 2.0])
        x = torch.arange(5, dtype=torch.float32)
        disp = torch.zeros(3, *shape)
        disp[2] = s.view(6, 1, 1) * x.view(1, 1, 5)
        f = DeformationField(disp, normalized=False)
        assert jsd(f) == pytest.approx(1.0, abs=1e-6)

    def test_translation_invariant(self):
        g = torch.Generator().manual_seed(2)
        base = 0.3 * torch.randn(3, 5, 5, 5, generator=g)
        f = DeformationField(base, normalized=False)
        shifted = DeformationField(base + 4.2, normalized=False)
        assert jsd(shifted) == pytest.approx(jsd(f), abs=1e-5)
        assert njd(shifted) == njd(f)


class TestReport:
    def test_flat_document(self):
        lab = torch.zeros(5, 5, 5, dtype=torch.int64)
        lab[1:3] = 1
        m = mask_from(lab)
        f = DeformationField(torch.zeros(3, 5, 5, 5), normalized=False)
        g = torch.Generator().manual_seed(3)
        img = Volume(torch.rand(5, 5, 5, generator=g))
        rep = evaluation_report(f, pred=m, gt=m, fixed=img, warped=img, ssim_kernel=3)
        assert rep["njd_pct"] == 0.0
        assert rep["jsd"] == 0.0
        assert rep["dice_label_1"] == 1.0
        assert rep["dice_overall"] == 1.0
        assert rep["ssim"] == 1.0
        assert "dice_overall" in rep["_definitions"]

    def test_smoothness_only(self):
        f = DeformationField(torch.zeros(3, 4, 4, 4), normalized=False)
        rep = evaluation_report(f)
        assert set(k for k in rep if not k.startswith("_")) == {"njd_pct", "jsd"}
