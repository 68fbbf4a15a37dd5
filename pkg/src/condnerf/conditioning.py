"""Condition vectors, latent priors and the label-to-latent projection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

# Values outside this band are accepted but flagged; strong extrapolation degrades samples.
SAFE_CONDITION_RANGE = (-1.0, 5.0)


@dataclass(frozen=True)
class LatentCodes:
    """Shape and appearance noise. Tensors may carry a leading batch dimension."""

    z_s: torch.Tensor
    z_a: torch.Tensor

    def __len__(self) -> int:
        return self.z_s.shape[0] if self.z_s.dim() > 1 else 1

    def __getitem__(self, idx) -> "LatentCodes":
        return LatentCodes(self.z_s[idx], self.z_a[idx])

    def scaled(self, alpha: float) -> "LatentCodes":
        return LatentCodes(alpha * self.z_s, alpha * self.z_a)


@dataclass(frozen=True)
class ConditionalEncodings:
    c_s: torch.Tensor
    c_a: torch.Tensor


def sample_latents(batch: int, dim_shape: int, dim_appearance: int,
                   seed: int | torch.Generator | None = None,
                   dtype: torch.dtype = torch.float32) -> LatentCodes:
    """Draw ``batch`` i.i.d. standard-normal shape/appearance codes.

    ``seed`` may be an int (fresh generator) or an existing ``torch.Generator``
    whose state is advanced.
    """
    if batch < 1 or dim_shape < 1 or dim_appearance < 1:
        raise ValueError(
            f"batch and latent dims must be positive, got batch={batch}, "
            f"M_s={dim_shape}, M_a={dim_appearance}")
    gen = _as_generator(seed)
    z_s = torch.randn(batch, dim_shape, generator=gen, dtype=dtype)
    z_a = torch.randn(batch, dim_appearance, generator=gen, dtype=dtype)
    return LatentCodes(z_s, z_a)


def _as_generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(0 if seed is None else int(seed))
    return gen


def check_condition_range(c: torch.Tensor) -> None:
    lo, hi = SAFE_CONDITION_RANGE
    if c.numel() and (c.min().item() < lo or c.max().item() > hi):
        warnings.warn(
            f"condition values outside [{lo}, {hi}] are far from the training "
            f"range and usually produce degraded samples", stacklevel=3)


class ConditionEncoder(nn.Module):
    """The pair of affine label encoders L_s, L_a.

    ``forward`` returns the conditional encodings
    ``(L_s(c) * z_s, L_a(c) * z_a)`` with element-wise products.
    """

    def __init__(self, dim_condition: int, dim_shape: int, dim_appearance: int):
        super().__init__()
        self.dim_condition = dim_condition
        self.shape_layer = nn.Linear(dim_condition, dim_shape)
        self.appearance_layer = nn.Linear(dim_condition, dim_appearance)

    @property
    def dim_shape(self) -> int:
        return self.shape_layer.out_features

    @property
    def dim_appearance(self) -> int:
        return self.appearance_layer.out_features

    def forward(self, c: torch.Tensor, z: LatentCodes) -> ConditionalEncodings:
        return project_condition(c, z, self)


def project_condition(c: torch.Tensor, z: LatentCodes,
                      params: ConditionEncoder) -> ConditionalEncodings:
    if c.shape[-1] != params.dim_condition:
        raise ValueError(
            f"condition has length {c.shape[-1]}, encoder expects {params.dim_condition}")
    if z.z_s.shape[-1] != params.dim_shape or z.z_a.shape[-1] != params.dim_appearance:
        raise ValueError(
            f"latents have dims ({z.z_s.shape[-1]}, {z.z_a.shape[-1]}), encoder "
            f"expects ({params.dim_shape}, {params.dim_appearance})")
    c_s = params.shape_layer(c) * z.z_s
    c_a = params.appearance_layer(c) * z.z_a
    return ConditionalEncodings(c_s, c_a)
