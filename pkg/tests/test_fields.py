"""Field math: warping, Jacobian determinant, z-score round trips."""
import pytest
import torch

from fieldreg.errors import DimensionMismatch, FieldStateError
from fieldreg.fields import (
    ACDC_FIELD_STATS,
    DeformationField,
    FieldStats,
    SegMask,
    Volume,
    denormalize_field,
    jacobian_determinant,
    normalize_field,
    warp,
    warp_mask,
)


def const_field(shape, values, normalized=False):
    disp = torch.zeros((3, *shape))
    for c, v in enumerate(values):
        disp[c] = v
    return DeformationField(disp, normalized=normalized)


def random_volume(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return Volume(torch.rand(shape, generator=g))


def random_field(shape, seed, scale=1.0, normalized=False):
    g = torch.Generator().manual_seed(seed)
    return DeformationField(torch.randn((3, *shape), generator=g) * scale, normalized=normalized)


class TestTypes:
    def test_volume_rejects_nan(self):
        data = torch.zeros((2, 2, 2))
        data[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            Volume(data)

    def test_field_needs_three_channels(self):
        with pytest.raises(DimensionMismatch):
            DeformationField(torch.zeros((2, 4, 4, 4)))

    def test_mask_labels_must_be_declared(self):
        labels = torch.tensor([[[0, 1], [2, 0]]])
        with pytest.raises(ValueError):
            SegMask(labels, label_ids=frozenset({1}))
        SegMask(labels, label_ids=frozenset({1, 2}))  # ok

    def test_stats_require_positive_sigma(self):
        with pytest.raises(ValueError):
            FieldStats(mu=(0, 0, 0), sigma=(1.0, 0.0, 1.0))


class TestWarp:
    def test_zero_field_is_identity_exactly(self):
        m = random_volume((5, 6, 7), seed=0)
        out = warp(m, const_field((5, 6, 7), (0, 0, 0)))
        assert torch.equal(out.data, m.data)

    def test_integer_shift_with_border_clamp(self):
        # m(z,y,x) = x on a 1x1x4 grid, +1 along width: [1, 2, 3, 3]
        m = Volume(torch.arange(4, dtype=torch.float32).view(1, 1, 4))
        f = const_field((1, 1, 4), (0, 0, 1))
        out = warp(m, f)
        assert torch.equal(out.data, torch.tensor([[[1.0, 2.0, 3.0, 3.0]]]))

    def test_half_voxel_shift_on_linear_ramp(self):
        # trilinear interpolation is exact on a linear image: interior shifts by 0.5
        W = 8
        m = Volume(torch.arange(W, dtype=torch.float32).expand(3, 3, W).clone())
        out = warp(m, const_field((3, 3, W), (0, 0, 0.5)))
        expected = m.data[..., : W - 1] + 0.5
        assert torch.allclose(out.data[..., : W - 1], expected, atol=1e-6)

    def test_linear_in_image_argument(self):
        shape = (4, 5, 6)
        m1, m2 = random_volume(shape, 1), random_volume(shape, 2)
        f = random_field(shape, 3, scale=1.5)
        a, b = 0.7, -1.3
        combo = warp(Volume(a * m1.data + b * m2.data), f).data
        split = a * warp(m1, f).data + b * warp(m2, f).data
        assert torch.allclose(combo, split, atol=1e-5)

    def test_output_bounded_by_input_range(self):
        m = random_volume((6, 6, 6), seed=4)
        f = random_field((6, 6, 6), 5, scale=4.0)
        out = warp(m, f).data
        assert out.min() >= m.data.min() - 1e-6
        assert out.max() <= m.data.max() + 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            warp(random_volume((4, 4, 4), 0), const_field((4, 4, 5), (0, 0, 0)))

    def test_normalized_field_rejected(self):
        with pytest.raises(FieldStateError):
            warp(random_volume((4, 4, 4), 0), const_field((4, 4, 4), (0, 0, 0), normalized=True))


class TestWarpMask:
    def test_zero_field_identity(self):
        labels = torch.zeros((4, 4, 4), dtype=torch.int64)
        labels[1, 2, 3] = 2
        mask = SegMask(labels, label_ids=frozenset({2}))
        out = warp_mask(mask, const_field((4, 4, 4), (0, 0, 0)))
        assert torch.equal(out.labels, labels)

    def test_single_voxel_pull_convention(self):
        # label sits at x=2; +1 along width pulls it to output x=1: out(x) = in(x+1)
        labels = torch.zeros((1, 1, 4), dtype=torch.int64)
        labels[0, 0, 2] = 1
        mask = SegMask(labels, label_ids=frozenset({1}))
        out = warp_mask(mask, const_field((1, 1, 4), (0, 0, 1)))
        expected = torch.zeros((1, 1, 4), dtype=torch.int64)
        expected[0, 0, 1] = 1
        assert torch.equal(out.labels, expected)

    def test_sub_half_voxel_shift_is_noop(self):
        g = torch.Generator().manual_seed(6)
        labels = torch.randint(0, 3, (5, 5, 5), generator=g)
        mask = SegMask(labels, label_ids=frozenset({1, 2}))
        out = warp_mask(mask, const_field((5, 5, 5), (0.4, 0.4, 0.4)))
        assert torch.equal(out.labels, mask.labels)


class TestJacobian:
    def test_zero_field_unit_determinant(self):
        det = jacobian_determinant(const_field((4, 5, 6), (0, 0, 0)))
        assert torch.allclose(det, torch.ones((4, 5, 6)), atol=1e-7)

    def test_affine_field_closed_form(self):
        # phi(z,y,x) = (a z, b y, c x) per channel -> det = (1+a)(1+b)(1+c)
        a, b, c = 0.2, -0.1, 0.3
        shape = (5, 6, 7)
        coords = torch.meshgrid(*[torch.arange(n, dtype=torch.float32) for n in shape], indexing="ij")
        disp = torch.stack([a * coords[0], b * coords[1], c * coords[2]])
        det = jacobian_determinant(DeformationField(disp))
        expected = (1 + a) * (1 + b) * (1 + c)
        assert torch.allclose(det, torch.full(shape, expected), atol=1e-6)

    def test_fold_yields_negative_determinant(self):
        shape = (4, 4, 6)
        x = torch.arange(shape[2], dtype=torch.float32).expand(shape).clone()
        disp = torch.zeros((3, *shape))
        disp[2] = -2.0 * x
        det = jacobian_determinant(DeformationField(disp))
        assert torch.allclose(det, torch.full(shape, -1.0), atol=1e-6)

    def test_short_axis_rejected(self):
        with pytest.raises(DimensionMismatch):
            jacobian_determinant(const_field((1, 4, 4), (0, 0, 0)))

    def test_requires_physical_units(self):
        with pytest.raises(FieldStateError):
            jacobian_determinant(const_field((4, 4, 4), (0, 0, 0), normalized=True))


class TestNormalization:
    def test_constant_mu_maps_to_zero(self):
        stats = FieldStats(mu=(1.0, -2.0, 0.5), sigma=(2.0, 3.0, 0.25))
        f = const_field((3, 3, 3), stats.mu)
        z = normalize_field(f, stats)
        assert z.normalized
        assert torch.equal(z.disp, torch.zeros_like(z.disp))

    def test_acdc_stats_round_trip(self):
        f = random_field((6, 6, 6), 7, scale=2.0)
        back = denormalize_field(normalize_field(f, ACDC_FIELD_STATS), ACDC_FIELD_STATS)
        assert (back.disp - f.disp).abs().max() < 1e-5

    def test_random_round_trip_relative(self):
        for seed in range(5):
            f = random_field((5, 5, 5), seed, scale=3.0)
            back = denormalize_field(normalize_field(f, ACDC_FIELD_STATS), ACDC_FIELD_STATS)
            rel = (back.disp - f.disp).abs().max() / f.disp.abs().max().clamp_min(1e-12)
            assert rel < 1e-6

    def test_double_normalization_rejected(self):
        f = const_field((3, 3, 3), (0, 0, 0), normalized=True)
        with pytest.raises(FieldStateError):
            normalize_field(f, ACDC_FIELD_STATS)
        with pytest.raises(FieldStateError):
            denormalize_field(denormalize_field(f, ACDC_FIELD_STATS), ACDC_FIELD_STATS)
