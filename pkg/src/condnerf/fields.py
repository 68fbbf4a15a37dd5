"""Positional encoding, object poses and the conditional feature field decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditionalEncodings


def positional_encoding(p: torch.Tensor, octaves: int) -> torch.Tensor:
    """Map each scalar in ``p`` to (sin(2^k pi p), cos(2^k pi p)) for k < octaves.

    The output gains a trailing axis of length ``2 * octaves``, interleaved
    sin/cos per octave.
    """
    if octaves < 1:
        raise ValueError(f"octave count must be >= 1, got {octaves}")
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.to(torch.get_default_dtype())
    freqs = (2.0 ** torch.arange(octaves, dtype=p.dtype, device=p.device)) * math.pi
    arg = p[..., None] * freqs
    return torch.stack((torch.sin(arg), torch.cos(arg)), dim=-1).flatten(-2)


def encode_point(x: torch.Tensor, octaves: int) -> torch.Tensor:
    """Concatenate per-coordinate encodings of a (..., 3) point array -> (..., 6*octaves)."""
    return positional_encoding(x, octaves).flatten(-2)


def encode_direction(d: torch.Tensor, octaves: int, atol: float = 1e-6) -> torch.Tensor:
    norms = torch.linalg.vector_norm(d, dim=-1)
    if not torch.all((norms - 1).abs() <= atol):
        raise ValueError("viewing directions must be unit vectors")
    return positional_encoding(d, octaves).flatten(-2)


# --------------------------------------------------------------------------
# Object poses

def rotation_matrix(euler_deg, order: str = "xyz") -> torch.Tensor:
    """Rotation matrix from intrinsic Euler angles in degrees (float64)."""
    from scipy.spatial.transform import Rotation
    return torch.as_tensor(Rotation.from_euler(order, euler_deg, degrees=True).as_matrix())


def yaw_matrix(angle_deg: torch.Tensor) -> torch.Tensor:
    """Rotations about the vertical (y) axis, batched over ``angle_deg``."""
    a = torch.deg2rad(torch.as_tensor(angle_deg, dtype=torch.float64))
    c, s = torch.cos(a), torch.sin(a)
    zero, one = torch.zeros_like(a), torch.ones_like(a)
    return torch.stack([
        torch.stack([c, zero, s], -1),
        torch.stack([zero, one, zero], -1),
        torch.stack([-s, zero, c], -1),
    ], -2)


@dataclass(frozen=True)
class ObjectPose:
    """Per-axis scale, translation and rotation; tensors may be batched."""

    scale: torch.Tensor
    translation: torch.Tensor
    rotation: torch.Tensor

    def __post_init__(self):
        if torch.any(self.scale <= 0):
            raise ValueError("object scale must be positive")
        det = torch.linalg.det(self.rotation.to(torch.float64))
        if not torch.allclose(det, torch.ones_like(det), atol=1e-6):
            raise ValueError("rotation must be a proper rotation (det = 1)")

    @classmethod
    def identity(cls, dtype=torch.float64) -> "ObjectPose":
        return cls(torch.ones(3, dtype=dtype), torch.zeros(3, dtype=dtype),
                   torch.eye(3, dtype=dtype))

    @classmethod
    def from_euler(cls, scale, translation, euler_deg, dtype=torch.float64) -> "ObjectPose":
        scale = torch.as_tensor(scale, dtype=dtype)
        if scale.dim() == 0:
            scale = scale.expand(3).clone()
        return cls(scale, torch.as_tensor(translation, dtype=dtype),
                   rotation_matrix(euler_deg).to(dtype))

    def to(self, dtype) -> "ObjectPose":
        return ObjectPose(self.scale.to(dtype), self.translation.to(dtype),
                          self.rotation.to(dtype))

    def rotated(self, yaw_deg: float) -> "ObjectPose":
        """Pose with an extra rotation about the vertical axis applied after the current one."""
        extra = yaw_matrix(yaw_deg).to(self.rotation.dtype)
        return ObjectPose(self.scale, self.translation, extra @ self.rotation)

    def translated(self, offset) -> "ObjectPose":
        offset = torch.as_tensor(offset, dtype=self.translation.dtype)
        return ObjectPose(self.scale, self.translation + offset, self.rotation)

    def rescaled(self, factor: float) -> "ObjectPose":
        return ObjectPose(self.scale * factor, self.translation, self.rotation)


def _pose_terms(x: torch.Tensor, pose: ObjectPose):
    # A batched pose (B, 3) applies to point arrays (B, N, 3).
    t, s = pose.translation, pose.scale
    if t.dim() >= 2 and x.dim() == t.dim() + 1:
        t, s = t[..., None, :], s[..., None, :]
    return t, s, pose.rotation


def to_object_space(x_scene: torch.Tensor, pose: ObjectPose) -> torch.Tensor:
    """x_obj = diag(1/s) R^T (x - t) for row-vector points of shape (..., 3)."""
    t, s, rot = _pose_terms(x_scene, pose)
    return ((x_scene - t) @ rot) / s


def from_object_space(x_obj: torch.Tensor, pose: ObjectPose) -> torch.Tensor:
    t, s, rot = _pose_terms(x_obj, pose)
    return (x_obj * s) @ rot.transpose(-1, -2) + t


def direction_to_object_space(d_scene: torch.Tensor, pose: ObjectPose) -> torch.Tensor:
    """Rotate and rescale directions into object space, renormalised to unit length."""
    _, s, rot = _pose_terms(d_scene, pose)
    return F.normalize((d_scene @ rot) / s, dim=-1)


# --------------------------------------------------------------------------
# Decoder

@dataclass(frozen=True)
class FieldSample:
    sigma: torch.Tensor  # (...,) nonnegative density
    f: torch.Tensor  # (..., M_f)


class ResBlockFC(nn.Module):
    """Pre-activation residual block of two linear layers."""

    def __init__(self, width: int):
        super().__init__()
        self.fc_0 = nn.Linear(width, width)
        self.fc_1 = nn.Linear(width, width)
        nn.init.zeros_(self.fc_1.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc_1(F.relu(self.fc_0(F.relu(x))))


class FeatureField(nn.Module):
    """Conditional generative feature field for one scene entity.

    Point and shape encodings are embedded separately and multiplied; the
    product runs through ``n_blocks`` ResBlockFC layers with the embedding
    re-added before block ``skip_at``. Density is read off the trunk only, so
    it never sees the viewing direction or the appearance encoding.
    """

    def __init__(self, point_octaves: int = 10, dir_octaves: int = 4,
                 dim_shape: int = 128, dim_appearance: int = 128,
                 dim_feature: int = 128, hidden: int = 128, n_blocks: int = 8,
                 skip_at: int | None = 4):
        super().__init__()
        self.point_octaves = point_octaves
        self.dir_octaves = dir_octaves
        self.dim_point_enc = 6 * point_octaves
        self.dim_dir_enc = 6 * dir_octaves
        self.dim_shape = dim_shape
        self.dim_appearance = dim_appearance
        self.dim_feature = dim_feature
        self.skip_at = skip_at if skip_at is not None and 0 < skip_at < n_blocks else None

        self.embed_point = nn.Linear(self.dim_point_enc, hidden)
        self.embed_shape = nn.Linear(dim_shape, hidden)
        self.blocks = nn.ModuleList(ResBlockFC(hidden) for _ in range(n_blocks))
        if self.skip_at is not None:
            self.skip_proj = nn.Linear(hidden, hidden)
        self.density_head = nn.Linear(hidden, 1)
        self.feature_in = nn.Linear(hidden, hidden)
        self.embed_dir = nn.Linear(self.dim_dir_enc, hidden)
        self.embed_appearance = nn.Linear(dim_appearance, hidden)
        self.feature_head = nn.Linear(hidden, dim_feature)

    def forward(self, x_enc: torch.Tensor, d_enc: torch.Tensor,
                c_s: torch.Tensor, c_a: torch.Tensor) -> FieldSample:
        if x_enc.shape[-1] != self.dim_point_enc or d_enc.shape[-1] != self.dim_dir_enc:
            raise ValueError(
                f"encoded inputs have dims ({x_enc.shape[-1]}, {d_enc.shape[-1]}), field "
                f"expects ({self.dim_point_enc}, {self.dim_dir_enc})")
        if c_s.shape[-1] != self.dim_shape or c_a.shape[-1] != self.dim_appearance:
            raise ValueError(
                f"conditional encodings have dims ({c_s.shape[-1]}, {c_a.shape[-1]}), "
                f"field expects ({self.dim_shape}, {self.dim_appearance})")
        emb = self.embed_point(x_enc) * self.embed_shape(c_s)
        net = emb
        for i, block in enumerate(self.blocks):
            if i == self.skip_at:
                net = net + self.skip_proj(emb)
            net = block(net)
        sigma = F.relu(self.density_head(F.relu(net))).squeeze(-1)
        h = self.feature_in(net) + self.embed_dir(d_enc) + self.embed_appearance(c_a)
        f = self.feature_head(F.relu(h))
        return FieldSample(sigma, f)


def eval_field(params: FeatureField, x_enc: torch.Tensor, d_enc: torch.Tensor,
               enc: ConditionalEncodings) -> FieldSample:
    return params(x_enc, d_enc, enc.c_s, enc.c_a)
