"""Residual projection discriminator."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv_0 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv_1 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.conv_1(F.relu(self.conv_0(F.relu(x))))


class ProjectionDiscriminator(nn.Module):
    """logit = psi(phi(x)) + <e(c), phi(x)>.

    phi embeds the image with a stem convolution followed by
    ``log2(resolution / 4)`` stages of (average pool, ResBlock) and global
    sum pooling; e is an affine label embedding of the same width.
    """

    def __init__(self, dim_condition: int, resolution: int = 64, base_channels: int = 64,
                 max_channels: int = 512):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ValueError("discriminator resolution must be a power of two >= 8")
        self.resolution = resolution
        self.dim_condition = dim_condition
        self.stem = nn.Conv2d(3, base_channels, 3, padding=1)
        blocks, c = [], base_channels
        for _ in range(int(math.log2(resolution // 4))):
            c_out = min(2 * c, max_channels)
            blocks.append(ResBlock(c, c_out))
            c = c_out
        self.blocks = nn.ModuleList(blocks)
        self.dim_embed = c
        self.head = nn.Linear(c, 1)
        self.embed_label = nn.Linear(dim_condition, c)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[-1] != self.resolution \
                or image.shape[-2] != self.resolution:
            raise ValueError(
                f"expected images of shape (B, 3, {self.resolution}, {self.resolution}), "
                f"got {tuple(image.shape)}")
        h = self.stem(image)
        for block in self.blocks:
            h = block(F.avg_pool2d(h, 2))
        return F.relu(h).sum(dim=(2, 3))

    def forward(self, image: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.dim_condition:
            raise ValueError(f"condition has length {c.shape[-1]}, expected {self.dim_condition}")
        phi = self.features(image)
        return self.head(phi).squeeze(-1) + (self.embed_label(c) * phi).sum(-1)


def discriminate(image: torch.Tensor, c: torch.Tensor, params: ProjectionDiscriminator) -> torch.Tensor:
    """Logits for a batch (B, 3, H, W), or a scalar for one (H, W, 3) image and one condition."""
    if image.dim() == 3:
        return params(image.permute(2, 0, 1)[None], c[None])[0]
    return params(image, c)
