"""The conditional denoising network D(phi_t | fixed, moving, t).

Layout: a Swin-style image encoder (one weight set, invoked once per
image) captures per-stage feature maps *before* each stage's windowed
attention; the backbone encoder patch-embeds the noisy field and, in every
block, runs masked multi-head attention over the concatenation
[time token | fixed tokens | moving tokens | field tokens] inside each
window, keeping only the transformed field tokens; a decoder with
time-shifted residual blocks and skip connections emits the 3-channel
noise prediction at full resolution.

Token bundles are ordered [time | fixed | moving | field]; the condition
attention mask is defined over that ordering and composes with the
standard shifted-window boundary mask by logical AND (padding cells get
region -1 so real tokens never attend them).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, FieldStateError
from .fields import DeformationField, FieldStats, Volume


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters, sized for desk-scale volumes."""

    patch_size: int = 2
    embed_dim: int = 24
    depths: tuple = (2, 2, 2)
    num_heads: tuple = (3, 6, 12)
    window_size: int = 4
    time_embed_dim: int = 96
    in_channels_image: int = 1
    in_channels_field: int = 3
    mlp_ratio: float = 4.0
    decoder_dim: int = 16
    # Cross-source attention pattern: "adjacent" (default) lets a token see
    # the other sources within one step along every axis of the window grid,
    # "colocated" restricts it to the exact same position, and "full" drops
    # the condition structure entirely (ablation switch).
    mask_style: str = "adjacent"
    share_image_encoder: bool = True

    def __post_init__(self):
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have equal length")
        if self.patch_size < 1 or self.window_size < 1:
            raise ValueError("patch_size and window_size must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.mask_style not in ("adjacent", "colocated", "full"):
            raise ValueError(f"unknown mask_style {self.mask_style!r}")
        for s, h in enumerate(self.num_heads):
            if self.stage_dim(s) % h:
                raise ValueError(
                    f"stage {s} dim {self.stage_dim(s)} not divisible by {h} heads"
                )

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "num_heads": list(self.num_heads),
            "window_size": self.window_size,
            "time_embed_dim": self.time_embed_dim,
            "in_channels_image": self.in_channels_image,
            "in_channels_field": self.in_channels_field,
            "mlp_ratio": self.mlp_ratio,
            "decoder_dim": self.decoder_dim,
            "mask_style": self.mask_style,
            "share_image_encoder": self.share_image_encoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["depths"] = tuple(d["depths"])
        d["num_heads"] = tuple(d["num_heads"])
        return cls(**d)


def time_embed(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of a (1-based) timestep; deterministic."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = float(t) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)]).to(dtype)


# --- windows and masks -------------------------------------------------------


def window_partition(grid: torch.Tensor, w: int) -> torch.Tensor:
    """(B, g, g, g, C) -> (B * nW, w^3, C), row-major window order."""
    b, g = grid.shape[0], grid.shape[1]
    n = g // w
    x = grid.view(b, n, w, n, w, n, w, -1)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(b * n ** 3, w ** 3, grid.shape[-1])


def window_reverse(windows: torch.Tensor, w: int, b: int, g: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    n = g // w
    x = windows.view(b, n, n, n, w, w, w, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(b, g, g, g, -1)


def _region_grid(g: int, gp: int, w: int, shift: int) -> torch.Tensor:
    """Region ids on the padded token grid, rolled like the tokens.

    Real cells carry the standard three-slice region label per axis;
    padding cells carry -1 so the pairwise-equality mask keeps real tokens
    away from them. The grid is rolled by -shift to match the cyclic shift
    applied to tokens before partitioning.
    """

    def axis_labels() -> torch.Tensor:
        lab = torch.full((gp,), -1, dtype=torch.int64)
        if shift > 0:
            lab[: g - w] = 0
            lab[g - w : g - shift] = 1
            lab[g - shift : g] = 2
        else:
            lab[:g] = 0
        return lab

    lz = axis_labels().view(gp, 1, 1)
    ly = axis_labels().view(1, gp, 1)
    lx = axis_labels().view(1, 1, gp)
    region = lz * 9 + ly * 3 + lx
    region = torch.where((lz < 0) | (ly < 0) | (lx < 0), torch.tensor(-1), region)
    if shift > 0:
        region = torch.roll(region, shifts=(-shift, -shift, -shift), dims=(0, 1, 2))
    return region


@dataclass(frozen=True)
class ConditionAttentionMask:
    """Boolean attention mask over [time | fixed | moving | field] bundles.

    ``base`` is the (N, N) condition structure shared by every window;
    ``per_window`` (when present) is the composition with the
    shifted-window boundary mask, one (N, N) slab per window.
    """

    base: torch.Tensor
    per_window: Optional[torch.Tensor]
    window: int

    @property
    def tokens_per_source(self) -> int:
        return self.window ** 3

    def tensor(self) -> torch.Tensor:
        """Broadcastable mask: (nW, N, N) or (1, N, N)."""
        if self.per_window is not None:
            return self.per_window
        return self.base.unsqueeze(0)


def _window_adjacency(w: int) -> torch.Tensor:
    """(w³, w³) bool: pairs of window positions within one step per axis.

    Positions are the flattened (z, y, x) lattice of a cubic window; two
    positions count as adjacent when their coordinates differ by at most 1
    along every axis, which includes the position itself.
    """
    axes = torch.arange(w)
    coords = torch.stack(
        torch.meshgrid(axes, axes, axes, indexing="ij"), dim=-1
    ).view(-1, 3)
    delta = (coords.unsqueeze(1) - coords.unsqueeze(0)).abs().amax(dim=-1)
    return delta <= 1


def _base_condition_mask(w: int, style: str) -> torch.Tensor:
    s = w ** 3
    n = 3 * s + 1
    mask = torch.zeros(n, n, dtype=torch.bool)
    if style == "full":
        mask.fill_(True)
        return mask
    mask[0, :] = True
    mask[:, 0] = True
    fx = slice(1, 1 + s)
    mv = slice(1 + s, 1 + 2 * s)
    fd = slice(1 + 2 * s, n)
    if style == "adjacent":
        cross = _window_adjacency(w)
    else:
        cross = torch.eye(s, dtype=torch.bool)
    full = torch.ones(s, s, dtype=torch.bool)
    mask[fx, fx] = full
    mask[mv, mv] = full
    mask[fd, fd] = full
    mask[fd, fx] = cross
    mask[fx, fd] = cross
    mask[fd, mv] = cross
    mask[mv, fd] = cross
    mask[fx, mv] = cross
    mask[mv, fx] = cross
    return mask


def build_condition_mask(
    w: int, shifted: bool, grid_edge: int, style: str = "adjacent"
) -> ConditionAttentionMask:
    """Attention mask for one stage's windows on a (grid_edge)^3 token grid.

    Field tokens attend every field token in the window, the time token,
    and fixed/moving tokens within one lattice step of their own position
    ("adjacent" default — a field estimate must be able to compare the
    fixed image against nearby displaced positions of the moving image).
    "colocated" narrows the cross-source pattern to the exact same
    position; "full" disables the condition structure for ablations. The
    time token row and column are always fully enabled. When the grid
    needs shifting or padding, the boundary mask is ANDed in per window;
    the time token is exempt from it.
    """
    if w < 1 or grid_edge < 1:
        raise ValueError("window and grid edge must be >= 1")
    w_eff = min(w, grid_edge)
    base = _base_condition_mask(w_eff, style)
    gp = math.ceil(grid_edge / w_eff) * w_eff
    shift = w_eff // 2 if (shifted and grid_edge > w_eff and w_eff > 1) else 0
    if gp == grid_edge and shift == 0:
        return ConditionAttentionMask(base=base, per_window=None, window=w_eff)

    region = _region_grid(grid_edge, gp, w_eff, shift)
    regions = window_partition(region.unsqueeze(0).unsqueeze(-1), w_eff).squeeze(-1)
    spatial = regions.unsqueeze(2) == regions.unsqueeze(1)  # (nW, s, s)
    s = w_eff ** 3
    n = 3 * s + 1
    per = base.unsqueeze(0).repeat(spatial.shape[0], 1, 1)
    for a in range(3):
        for b in range(3):
            rows = slice(1 + a * s, 1 + (a + 1) * s)
            cols = slice(1 + b * s, 1 + (b + 1) * s)
            per[:, rows, cols] &= spatial
    return ConditionAttentionMask(base=base, per_window=per, window=w_eff)


_MASK_CACHE: dict = {}


def _cached_mask(w: int, shifted: bool, grid_edge: int, style: str) -> ConditionAttentionMask:
    key = (w, shifted, grid_edge, style)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = build_condition_mask(w, shifted, grid_edge, style)
    return _MASK_CACHE[key]


@dataclass
class WindowTokenBundle:
    """Per-window token groups, concatenated as [time|fixed|moving|field]."""

    time_token: torch.Tensor  # (B, 1, C)
    fixed_tokens: torch.Tensor  # (B, s, C)
    moving_tokens: torch.Tensor  # (B, s, C)
    field_tokens: torch.Tensor  # (B, s, C)

    def sequence(self) -> torch.Tensor:
        return torch.cat(
            [self.time_token, self.fixed_tokens, self.moving_tokens, self.field_tokens], dim=1
        )


class FusedWindowAttention(nn.Module):
    """Multi-head attention over a token bundle with a boolean mask.

    Masked logits are set to -inf before the softmax, so masked positions
    carry exactly zero weight. Returns the full transformed sequence; the
    caller keeps the rows it wants.

    When ``window`` is given, a learned relative-position bias is added to
    the logits: one table per (query source, key source) pair, indexed by
    the 3D offset between the two window positions. Offsets are how a
    query learns *where* a matching key sits — without them the heads can
    pool matching content but cannot express its direction, and a
    displacement estimate is a direction. The optional time token (first
    sequence position) carries a single learned per-head key bias instead.
    Tables are sized for ``window`` and also serve smaller runtime windows,
    whose offsets are a subset. With ``window=None`` no bias is applied and
    the sequence may have any length.
    """

    def __init__(self, dim: int, num_heads: int, window: Optional[int] = None,
                 n_sources: int = 1, with_time: bool = False):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.n_sources = n_sources
        self.with_time = with_time
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        if window is not None:
            n_rel = (2 * window - 1) ** 3
            self.rel_bias = nn.Parameter(
                torch.empty(num_heads, n_sources * n_sources, n_rel)
            )
            nn.init.trunc_normal_(self.rel_bias, std=0.02)
            if with_time:
                self.time_key_bias = nn.Parameter(torch.zeros(num_heads))
        self._index_cache: dict = {}

    def _infer_window(self, n: int) -> int:
        n_spatial = n - 1 if self.with_time else n
        if n_spatial % self.n_sources:
            raise DimensionMismatch(
                f"{n} tokens do not fit {self.n_sources} sources"
            )
        s = n_spatial // self.n_sources
        w = round(s ** (1 / 3))
        if w ** 3 != s or w > self.window:
            raise DimensionMismatch(
                f"{s} tokens per source do not form a window <= {self.window}"
            )
        return w

    def _bias_matrix(self, w_eff: int, device) -> torch.Tensor:
        key = (w_eff, device)
        idx = self._index_cache.get(key)
        if idx is None:
            axes = torch.arange(w_eff)
            coords = torch.stack(
                torch.meshgrid(axes, axes, axes, indexing="ij"), dim=-1
            ).view(-1, 3)
            delta = coords.unsqueeze(1) - coords.unsqueeze(0) + self.window - 1
            m = 2 * self.window - 1
            rel = (delta[..., 0] * m + delta[..., 1]) * m + delta[..., 2]
            s = w_eff ** 3
            ns = self.n_sources
            pair = torch.arange(ns).view(-1, 1) * ns + torch.arange(ns).view(1, -1)
            pair = pair.repeat_interleave(s, 0).repeat_interleave(s, 1)
            idx = (pair * m ** 3 + rel.repeat(ns, ns)).to(device)
            self._index_cache[key] = idx
        spatial = self.rel_bias.view(self.num_heads, -1)[:, idx]
        if not self.with_time:
            return spatial
        h, n = self.num_heads, spatial.shape[-1] + 1
        full = spatial.new_zeros(h, n, n)
        full[:, 1:, 1:] = spatial
        full[:, 1:, 0] = self.time_key_bias.view(h, 1)
        return full

    def forward(
        self, seq: torch.Tensor, mask: torch.Tensor, return_weights: bool = False
    ):
        b, n, c = seq.shape
        if mask.shape[-1] != n or mask.shape[-2] != n:
            raise DimensionMismatch(f"mask {tuple(mask.shape)} does not fit {n} tokens")
        h = self.num_heads
        qkv = self.qkv(seq).view(b, n, 3, h, c // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // h)
        if self.window is not None:
            attn = attn + self._bias_matrix(self._infer_window(n), seq.device)
        attn = attn.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


def fused_window_attention(
    bundle: WindowTokenBundle, mask: ConditionAttentionMask, attn: FusedWindowAttention
) -> torch.Tensor:
    """Run masked attention over the bundle and keep only field tokens."""
    seq = bundle.sequence()
    s = bundle.field_tokens.shape[1]
    m = mask.tensor().to(seq.device)
    if m.shape[0] not in (1, seq.shape[0]) and seq.shape[0] % m.shape[0] == 0:
        m = m.repeat(seq.shape[0] // m.shape[0], 1, 1)
    out = attn(seq, m)
    return out[:, -s:, :]


class _Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _pad_grid(grid: torch.Tensor, gp: int) -> torch.Tensor:
    g = grid.shape[1]
    if gp == g:
        return grid
    return F.pad(grid, (0, 0, 0, gp - g, 0, gp - g, 0, gp - g))


class ConditionedSwinBlock(nn.Module):
    """One backbone block: masked bundle attention plus an MLP, pre-norm
    residual, alternating regular/shifted windows across depth."""

    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool,
                 mlp_ratio: float, time_dim: int, mask_style: str):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.mask_style = mask_style
        self.norm_field = nn.LayerNorm(dim)
        self.norm_fixed = nn.LayerNorm(dim)
        self.norm_moving = nn.LayerNorm(dim)
        self.time_proj = nn.Linear(time_dim, dim)
        self.attn = FusedWindowAttention(
            dim, num_heads, window=window, n_sources=3, with_time=True
        )
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, mlp_ratio)

    def forward(self, field, fixed, moving, time_feat):
        # grids are (B, g, g, g, C); time_feat is (time_dim,)
        b, g = field.shape[0], field.shape[1]
        mask = _cached_mask(self.window, self.shifted, g, self.mask_style)
        w = mask.window
        gp = math.ceil(g / w) * w
        shift = w // 2 if (self.shifted and g > w and w > 1) else 0

        shortcut = field
        x = _pad_grid(self.norm_field(field), gp)
        fx = _pad_grid(self.norm_fixed(fixed), gp)
        mv = _pad_grid(self.norm_moving(moving), gp)
        if shift:
            dims = (1, 2, 3)
            x = torch.roll(x, shifts=(-shift,) * 3, dims=dims)
            fx = torch.roll(fx, shifts=(-shift,) * 3, dims=dims)
            mv = torch.roll(mv, shifts=(-shift,) * 3, dims=dims)
        xw = window_partition(x, w)
        fw = window_partition(fx, w)
        mw = window_partition(mv, w)
        t_tok = self.time_proj(time_feat.to(xw.dtype)).view(1, 1, -1).expand(xw.shape[0], 1, -1)
        bundle = WindowTokenBundle(
            time_token=t_tok, fixed_tokens=fw, moving_tokens=mw, field_tokens=xw
        )
        out = fused_window_attention(bundle, mask, self.attn)
        x = window_reverse(out, w, b, gp)
        if shift:
            x = torch.roll(x, shifts=(shift,) * 3, dims=(1, 2, 3))
        x = x[:, :g, :g, :g, :]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PlainSwinBlock(nn.Module):
    """Standard windowed self-attention block for the image encoder."""

    def __init__(self, dim, num_heads, window, shifted, mlp_ratio):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = FusedWindowAttention(dim, num_heads, window=window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, mlp_ratio)

    def forward(self, grid):
        b, g = grid.shape[0], grid.shape[1]
        w = min(self.window, g)
        gp = math.ceil(g / w) * w
        shift = w // 2 if (self.shifted and g > w and w > 1) else 0
        shortcut = grid
        x = _pad_grid(self.norm1(grid), gp)
        if shift:
            x = torch.roll(x, shifts=(-shift,) * 3, dims=(1, 2, 3))
        xw = window_partition(x, w)
        if gp != g or shift:
            region = _region_grid(g, gp, w, shift)
            regions = window_partition(region.unsqueeze(0).unsqueeze(-1), w).squeeze(-1)
            mask = regions.unsqueeze(2) == regions.unsqueeze(1)
            if xw.shape[0] != mask.shape[0]:
                mask = mask.repeat(xw.shape[0] // mask.shape[0], 1, 1)
        else:
            mask = torch.ones(1, w ** 3, w ** 3, dtype=torch.bool)
        out = self.attn(xw, mask.to(xw.device))
        x = window_reverse(out, w, b, gp)
        if shift:
            x = torch.roll(x, shifts=(shift,) * 3, dims=(1, 2, 3))
        x = x[:, :g, :g, :g, :]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed3D(nn.Module):
    def __init__(self, in_ch: int, dim: int, patch: int):
        super().__init__()
        self.proj = nn.Conv3d(in_ch, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, vol):  # (B, C_in, D, H, W) -> (B, g, g, g, C)
        x = self.proj(vol).permute(0, 2, 3, 4, 1)
        return self.norm(x)


class PatchMerging3D(nn.Module):
    """2x downsampling by concatenating 2^3 neighbours and projecting."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduce = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, grid):
        b, g = grid.shape[0], grid.shape[1]
        if g % 2:
            grid = _pad_grid(grid, g + 1)
            g = g + 1
        parts = [
            grid[:, dz::2, dy::2, dx::2, :]
            for dz in (0, 1)
            for dy in (0, 1)
            for dx in (0, 1)
        ]
        x = torch.cat(parts, dim=-1)
        return self.reduce(self.norm(x))


class ImageEncoder(nn.Module):
    """Swin encoder whose per-stage outputs are the condition features."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed3D(cfg.in_channels_image, cfg.embed_dim, cfg.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s, depth in enumerate(cfg.depths):
            dim = cfg.stage_dim(s)
            blocks = nn.ModuleList(
                PlainSwinBlock(dim, cfg.num_heads[s], cfg.window_size, bool(d % 2), cfg.mlp_ratio)
                for d in range(depth)
            )
            self.stages.append(blocks)
            if s + 1 < cfg.n_stages:
                self.merges.append(PatchMerging3D(dim))

    def forward(self, vol: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(vol)
        feats = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x)
            feats.append(x)  # this stage's extracted features, pre-merge
            if s + 1 < self.cfg.n_stages:
                x = self.merges[s](x)
        return feats


class TimeShiftResBlock(nn.Module):
    """Residual conv block with an additive per-channel time shift.

    The shift projection is zero-initialized, so at init the block equals
    its unconditioned form.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(self._groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.shift = nn.Linear(time_dim, out_ch)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)
        self.norm2 = nn.GroupNorm(self._groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    @staticmethod
    def _groups(ch: int) -> int:
        for g in (8, 4, 2, 1):
            if ch % g == 0:
                return g
        return 1

    def forward(self, x, time_feat):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.shift(time_feat.to(h.dtype)).view(1, -1, 1, 1, 1)
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _grid_to_vol(grid: torch.Tensor) -> torch.Tensor:
    return grid.permute(0, 4, 1, 2, 3).contiguous()


class FieldDenoiser(nn.Module):
    """Full denoiser: conditional backbone encoder plus residual decoder."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = cfg
        self.image_encoder = ImageEncoder(cfg)
        if not cfg.share_image_encoder:
            self.image_encoder_moving = ImageEncoder(cfg)
        self.field_embed = PatchEmbed3D(cfg.in_channels_field, cfg.embed_dim, cfg.patch_size)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim), nn.SiLU()
        )
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s, depth in enumerate(cfg.depths):
            dim = cfg.stage_dim(s)
            blocks = nn.ModuleList(
                ConditionedSwinBlock(
                    dim, cfg.num_heads[s], cfg.window_size, bool(d % 2),
                    cfg.mlp_ratio, cfg.time_embed_dim, cfg.mask_style,
                )
                for d in range(depth)
            )
            self.stages.append(blocks)
            if s + 1 < cfg.n_stages:
                self.merges.append(PatchMerging3D(dim))

        dims = [cfg.stage_dim(s) for s in range(cfg.n_stages)]
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for s in range(cfg.n_stages - 1, 0, -1):
            self.ups.append(nn.ConvTranspose3d(dims[s], dims[s - 1], 2, stride=2))
            self.dec_blocks.append(
                TimeShiftResBlock(2 * dims[s - 1], dims[s - 1], cfg.time_embed_dim)
            )
        self.up_final = nn.ConvTranspose3d(
            dims[0], cfg.decoder_dim, cfg.patch_size, stride=cfg.patch_size
        )
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.in_channels_field, cfg.decoder_dim, 3, padding=1),
            nn.GroupNorm(TimeShiftResBlock._groups(cfg.decoder_dim), cfg.decoder_dim),
            nn.SiLU(),
        )
        self.dec_stem = TimeShiftResBlock(2 * cfg.decoder_dim, cfg.decoder_dim, cfg.time_embed_dim)
        self.head = nn.Conv3d(cfg.decoder_dim, cfg.in_channels_field, 1)

    # -- pieces ---------------------------------------------------------

    def _pad_volumes(self, *vols: torch.Tensor):
        """Pad (B, C, D, H, W) inputs so every axis is a patch multiple."""
        p = self.config.patch_size
        shape = vols[0].shape[2:]
        target = [math.ceil(s / p) * p for s in shape]
        pads = []
        for s, tgt in zip(reversed(shape), reversed(target)):
            pads.extend([0, tgt - s])
        if all(x == 0 for x in pads):
            return vols
        return tuple(F.pad(v, pads, mode="replicate") for v in vols)

    def encode_image(self, img: torch.Tensor, moving: bool = False) -> list[torch.Tensor]:
        """Per-stage condition features for one image, captured before each
        stage's attention. (B, 1, D, H, W) in, token grids out."""
        if img.shape[1] != self.config.in_channels_image:
            raise DimensionMismatch(
                f"expected {self.config.in_channels_image} image channel(s), got {img.shape[1]}"
            )
        encoder = self.image_encoder
        if moving and not self.config.share_image_encoder:
            encoder = self.image_encoder_moving
        return encoder(img)

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor, phi_t: torch.Tensor, t: int):
        """(B,1,D,H,W) images, (B,3,D,H,W) field, timestep -> (B,3,D,H,W)."""
        if fixed.shape != moving.shape:
            raise DimensionMismatch(f"fixed {tuple(fixed.shape)} != moving {tuple(moving.shape)}")
        if phi_t.shape[2:] != fixed.shape[2:] or phi_t.shape[0] != fixed.shape[0]:
            raise DimensionMismatch(
                f"field grid {tuple(phi_t.shape)} does not match images {tuple(fixed.shape)}"
            )
        orig_shape = phi_t.shape[2:]
        fixed, moving, phi = self._pad_volumes(fixed, moving, phi_t)

        dtype = self.head.weight.dtype
        temb = time_embed(t, self.config.time_embed_dim, dtype=dtype)
        time_feat = self.time_mlp(temb)

        fixed_feats = self.encode_image(fixed)
        moving_feats = self.encode_image(moving, moving=True)

        x = self.field_embed(phi)
        skips = []
        for s, blocks in enumerate(self.stages):
            for blk in blocks:
                x = blk(x, fixed_feats[s], moving_feats[s], time_feat)
            skips.append(x)
            if s + 1 < self.config.n_stages:
                x = self.merges[s](x)

        y = _grid_to_vol(skips[-1])
        for i, s in enumerate(range(self.config.n_stages - 1, 0, -1)):
            y = self.ups[i](y)
            skip = _grid_to_vol(skips[s - 1])
            y = y[:, :, : skip.shape[2], : skip.shape[3], : skip.shape[4]]
            y = self.dec_blocks[i](torch.cat([y, skip], dim=1), time_feat)
        y = self.up_final(y)
        y = y[:, :, : phi.shape[2], : phi.shape[3], : phi.shape[4]]
        y = self.dec_stem(torch.cat([y, self.stem(phi)], dim=1), time_feat)
        eps = self.head(y)
        return eps[:, :, : orig_shape[0], : orig_shape[1], : orig_shape[2]]

    def denoise(
        self, fixed: Volume, moving: Volume, phi_t: DeformationField, t: int
    ) -> DeformationField:
        """Typed single-instance entry point; returns predicted noise."""
        if not phi_t.normalized:
            raise FieldStateError("phi_t must be normalized before denoising")
        if fixed.shape != moving.shape or phi_t.spatial_shape != fixed.shape:
            raise DimensionMismatch(
                f"shapes differ: fixed {fixed.shape}, moving {moving.shape}, "
                f"field {phi_t.spatial_shape}"
            )
        dtype = self.head.weight.dtype
        f = fixed.data.to(dtype).unsqueeze(0).unsqueeze(0)
        m = moving.data.to(dtype).unsqueeze(0).unsqueeze(0)
        p = phi_t.disp.to(dtype).unsqueeze(0)
        eps = self.forward(f, m, p, t).squeeze(0)
        return DeformationField(eps, normalized=True)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: Path,
    model: FieldDenoiser,
    stats: Optional[FieldStats] = None,
    schedule: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    """Atomically write a self-describing checkpoint."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "stats": None if stats is None else {"mu": list(stats.mu), "sigma": list(stats.sigma)},
        "schedule": schedule,
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: Path) -> tuple[FieldDenoiser, dict]:
    """Restore a model (exact weights) plus the checkpoint payload."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    model = FieldDenoiser(DenoiserConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    if payload.get("stats"):
        payload["stats_obj"] = FieldStats(
            mu=tuple(payload["stats"]["mu"]), sigma=tuple(payload["stats"]["sigma"])
        )
    return model, payload
