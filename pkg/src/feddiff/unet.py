"""Small U-Net noise predictor: residual blocks + sinusoidal time embedding.

Stages are defined by channel multipliers; each stage holds
``res_blocks_per_stage`` residual blocks with the time embedding injected
additively after the first convolution. Skip connections concatenate the
output of each down stage into the matching up stage.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Map integer timesteps (batch,) to a (batch, dim) sinusoidal embedding."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64, device=t.device)
        * (-math.log(10000.0) / max(half - 1, 1))
    )
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    # gcd keeps the group count a divisor of any channel width
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU/conv x2 with additive time injection and a skip path."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Noise predictor eps(x_t, t[, label]) with output shape = input shape."""

    def __init__(
        self,
        in_channels: int,
        image_size: int,
        base_channels: int,
        channel_multipliers: tuple,
        res_blocks_per_stage: int,
        time_embed_dim: int,
        class_conditional: bool = False,
        num_classes: int = 0,
    ):
        super().__init__()
        stages = len(channel_multipliers)
        if image_size % (2 ** (stages - 1)) != 0:
            raise ValueError(
                f"image_size {image_size} not divisible by 2^{stages - 1}"
            )
        self.time_embed_dim = time_embed_dim
        self.class_conditional = class_conditional
        widths = [base_channels * m for m in channel_multipliers]

        self.time_mlp = nn.Sequential(
            nn.Linear(time_embed_dim, time_embed_dim * 4),
            nn.SiLU(),
            nn.Linear(time_embed_dim * 4, time_embed_dim),
        )
        if class_conditional:
            self.label_embed = nn.Embedding(num_classes, time_embed_dim)

        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for b in range(res_blocks_per_stage):
                blocks.append(ResidualBlock(prev if b == 0 else w, w, time_embed_dim))
            self.down_stages.append(blocks)
            prev = w
            if i < stages - 1:
                self.downsamples.append(Downsample(w))

        self.mid1 = ResidualBlock(widths[-1], widths[-1], time_embed_dim)
        self.mid2 = ResidualBlock(widths[-1], widths[-1], time_embed_dim)

        self.up_stages = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        # built top-down so module order (and the manifest) stays canonical
        incoming = widths[-1]
        for i in reversed(range(stages)):
            w = widths[i]
            blocks = nn.ModuleList()
            for b in range(res_blocks_per_stage):
                blocks.append(
                    ResidualBlock(incoming + w if b == 0 else w, w, time_embed_dim)
                )
            self.up_stages.append(blocks)
            if i > 0:
                self.upsamples.append(Upsample(w))
            incoming = w

        self.out_norm = _norm(widths[0])
        self.out_conv = nn.Conv2d(widths[0], in_channels, 3, padding=1)

    def forward(self, x, t, labels=None):
        temb = sinusoidal_time_embedding(t, self.time_embed_dim).to(x.dtype)
        temb = self.time_mlp(temb)
        if self.class_conditional:
            if labels is None:
                raise ValueError("class-conditional model requires labels")
            temb = temb + self.label_embed(labels)
        elif labels is not None:
            raise ValueError("labels given to an unconditional model")

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_stages):
            for blk in blocks:
                h = blk(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)

        h = self.mid2(self.mid1(h, temb), temb)

        for j, blocks in enumerate(self.up_stages):
            h = torch.cat([h, skips[len(skips) - 1 - j]], dim=1)
            for blk in blocks:
                h = blk(h, temb)
            if j < len(self.upsamples):
                h = self.upsamples[j](h)

        return self.out_conv(F.silu(self.out_norm(h)))
