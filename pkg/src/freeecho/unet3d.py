"""Small video UNet: residual space-only 3D convs, per-frame linear
attention over H x W, and attention across frames at each pixel."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNet3DConfig:
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [2, 4, 8])
    num_down_blocks: int = 3
    num_middle_blocks: int = 2
    num_up_blocks: int = 3
    in_channels: int = 1
    with_condition_channel: bool = False
    attention_heads: int = 4
    attention_head_dim: int = 16
    max_frames: int = 64
    zero_init: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("base_channels and in_channels must be positive")
        if len(self.channel_multipliers) != self.num_down_blocks:
            raise ValueError(
                f"{len(self.channel_multipliers)} channel multipliers for "
                f"{self.num_down_blocks} down blocks"
            )
        if self.num_up_blocks != self.num_down_blocks:
            raise ValueError("num_up_blocks must equal num_down_blocks")
        if self.num_down_blocks < 1 or self.num_middle_blocks < 0:
            raise ValueError("need at least one down block")

    @classmethod
    def full(cls, in_channels: int = 3) -> "UNet3DConfig":
        return cls(base_channels=32, channel_multipliers=[2, 4, 8], num_down_blocks=3,
                   num_middle_blocks=2, num_up_blocks=3, in_channels=in_channels)

    @classmethod
    def desk(cls, **overrides) -> "UNet3DConfig":
        kw = dict(base_channels=8, channel_multipliers=[1, 2], num_down_blocks=2,
                  num_middle_blocks=1, num_up_blocks=2, in_channels=1,
                  attention_heads=2, attention_head_dim=8)
        kw.update(overrides)
        return cls(**kw)

    def frame_strides(self) -> list[int]:
        # the first down block keeps every frame, later ones halve K
        return [1] + [2] * (self.num_down_blocks - 1)

    def check_input_shape(self, frames: int, height: int, width: int) -> None:
        f = 2**self.num_down_blocks
        k = 2 ** (self.num_down_blocks - 1)
        if height % f or width % f:
            raise ValueError(f"height/width {height}x{width} not divisible by {f}")
        if frames % k:
            raise ValueError(f"{frames} frames not divisible by {k}")
        if frames > self.max_frames:
            raise ValueError(f"{frames} frames exceeds max_frames={self.max_frames}")
        # GroupNorm needs more than one value per group at the bottleneck
        ch = self.base_channels * self.channel_multipliers[-1]
        per_group = ch // _groups(ch) * (height // f) * (width // f) * (frames // k)
        if per_group < 2:
            raise ValueError(f"input {frames}x{height}x{width} leaves a single value per norm group at the bottleneck")

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def noise_embedding(c_noise: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the (B,) noise conditioning input."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=c_noise.dtype, device=c_noise.device) / max(half - 1, 1))
    # c_noise = ln(sigma)/4 lives roughly in [-2, 2]; stretch it before the sinusoids
    args = 250.0 * c_noise[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, zero_init: bool = True):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, (1, 3, 3), padding=(0, 1, 1))
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, (1, 3, 3), padding=(0, 1, 1))
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialLinearAttention(nn.Module):
    """Linear-complexity attention over the H*W positions of each frame."""

    def __init__(self, channels: int, heads: int, head_dim: int, zero_init: bool = True):
        super().__init__()
        self.heads = heads
        self.scale = head_dim**-0.5
        inner = heads * head_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_qkv = nn.Conv2d(channels, inner * 3, 1, bias=False)
        self.to_out = nn.Conv2d(inner, channels, 1)
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x):
        b, c, k, h, w = x.shape
        y = self.norm(x).permute(0, 2, 1, 3, 4).reshape(b * k, c, h, w)
        q, kk, v = self.to_qkv(y).reshape(b * k, 3, self.heads, -1, h * w).unbind(1)
        q = q.softmax(dim=-2) * self.scale
        kk = kk.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", kk, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        out = self.to_out(out.reshape(b * k, -1, h, w))
        return x + out.reshape(b, k, c, h, w).permute(0, 2, 1, 3, 4)


class TemporalAttention(nn.Module):
    """Softmax attention across frames at a fixed pixel, with a learned
    relative-position bias so the block knows frame order."""

    def __init__(self, channels: int, heads: int, head_dim: int, max_frames: int, zero_init: bool = True):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.max_frames = max_frames
        inner = heads * head_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_qkv = nn.Linear(channels, inner * 3, bias=False)
        self.to_out = nn.Linear(inner, channels)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_frames - 1))
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x):
        b, c, k, h, w = x.shape
        y = self.norm(x).permute(0, 3, 4, 2, 1).reshape(b * h * w, k, c)
        q, kk, v = self.to_qkv(y).reshape(b * h * w, k, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        idx = torch.arange(k, device=x.device)
        bias = self.rel_bias[:, idx[None, :] - idx[:, None] + self.max_frames - 1]
        out = F.scaled_dot_product_attention(q, kk, v, attn_mask=bias.to(q.dtype))
        out = self.to_out(out.transpose(1, 2).reshape(b * h * w, k, -1))
        return x + out.reshape(b, h, w, k, c).permute(0, 4, 3, 1, 2)


class UNetBlock(nn.Module):
    """Conv -> spatial linear attention -> temporal attention -> resampling conv."""

    def __init__(self, in_ch, out_ch, emb_dim, cfg: UNet3DConfig, resample: nn.Module):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim, cfg.zero_init)
        self.spatial = SpatialLinearAttention(out_ch, cfg.attention_heads, cfg.attention_head_dim, cfg.zero_init)
        self.temporal = TemporalAttention(out_ch, cfg.attention_heads, cfg.attention_head_dim,
                                          cfg.max_frames, cfg.zero_init)
        self.resample = resample

    def forward(self, x, emb):
        x = self.res(x, emb)
        x = self.spatial(x)
        x = self.temporal(x)
        if isinstance(self.resample, ResBlock):
            return self.resample(x, emb)
        return self.resample(x)


class UNet3D(nn.Module):
    """Raw network ``F(x, c_noise[, condition])`` with output shape equal to
    the (B, C, K, H, W) input shape."""

    def __init__(self, config: UNet3DConfig):
        super().__init__()
        self.config = cfg = config
        base = cfg.base_channels
        emb_dim = 4 * base
        self.emb_dim = emb_dim
        self.noise_mlp = nn.Sequential(
            nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        in_ch = cfg.in_channels + (1 if cfg.with_condition_channel else 0)
        self.init_conv = nn.Conv3d(in_ch, base, (1, 3, 3), padding=(0, 1, 1))

        chans = [base] + [base * m for m in cfg.channel_multipliers]
        strides = cfg.frame_strides()
        self.down = nn.ModuleList()
        for i in range(cfg.num_down_blocks):
            s = strides[i]
            down = nn.Conv3d(chans[i + 1], chans[i + 1], (s, 4, 4), stride=(s, 2, 2), padding=(0, 1, 1))
            self.down.append(UNetBlock(chans[i], chans[i + 1], emb_dim, cfg, down))

        mid = chans[-1]
        self.middle = nn.ModuleList(
            UNetBlock(mid, mid, emb_dim, cfg, ResBlock(mid, mid, emb_dim, cfg.zero_init))
            for _ in range(cfg.num_middle_blocks)
        )

        self.up = nn.ModuleList()
        for i in reversed(range(cfg.num_up_blocks)):
            s = strides[i]
            up = nn.ConvTranspose3d(chans[i], chans[i], (s, 4, 4), stride=(s, 2, 2), padding=(0, 1, 1))
            self.up.append(UNetBlock(2 * chans[i + 1], chans[i], emb_dim, cfg, up))

        self.final_res = ResBlock(2 * base, base, emb_dim, cfg.zero_init)
        self.final_norm = nn.GroupNorm(_groups(base), base)
        self.final_conv = nn.Conv3d(base, cfg.in_channels, 1)
        if cfg.zero_init:
            nn.init.zeros_(self.final_conv.weight)
            nn.init.zeros_(self.final_conv.bias)

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor, condition: torch.Tensor | None = None):
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, K, H, W), got {tuple(x.shape)}")
        cfg.check_input_shape(*x.shape[2:])
        c_noise = torch.as_tensor(c_noise, dtype=x.dtype, device=x.device).reshape(-1)
        if c_noise.numel() == 1:
            c_noise = c_noise.expand(x.shape[0])
        if cfg.with_condition_channel:
            if condition is None:
                condition = torch.zeros_like(x[:, :1])
            x = torch.cat([x, condition.to(x.dtype)], dim=1)

        emb = self.noise_mlp(noise_embedding(c_noise, cfg.base_channels))
        h = self.init_conv(x)
        first = h
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
        for block in self.middle:
            h = block(h, emb)
        for block in self.up:
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        h = self.final_res(torch.cat([h, first], dim=1), emb)
        return self.final_conv(F.silu(self.final_norm(h)))


def build_unet3d(config: UNet3DConfig, seed: int | torch.Generator | None = 0) -> UNet3D:
    """Construct and initialize a :class:`UNet3D` deterministically."""
    if isinstance(seed, torch.Generator):
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=seed))
    with torch.random.fork_rng():
        if seed is not None:
            torch.manual_seed(seed)
        return UNet3D(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def layer_inventory(model: UNet3D) -> list[tuple[str, str]]:
    """(block name, layer kind) rows in forward order."""
    rows = [("Initial Conv", "Conv3D")]
    kinds = ["Conv3D", "SpatialLinearAttention", "Attention"]
    for i, _ in enumerate(model.down):
        rows += [(f"Downsample {i + 1}", k) for k in kinds + ["Conv3D"]]
    for i, _ in enumerate(model.middle):
        rows += [(f"Middle Block {i + 1}", k) for k in kinds + ["Conv3D"]]
    for i, _ in enumerate(model.up):
        rows += [(f"Upsample {i + 1}", k) for k in kinds + ["Conv3DTranspose"]]
    rows.append(("Final Conv", "Conv3D"))
    return rows
