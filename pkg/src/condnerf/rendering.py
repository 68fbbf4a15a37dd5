"""Cameras, ray sampling, feature volume rendering and the 2D neural renderer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import _as_generator
from .config import RenderConfig
from .fields import FeatureField, ObjectPose
from .scene import SceneGraph, compose, evaluate_entity

WORLD_UP = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float  # degrees, 0 looks along -z
    elevation: float  # degrees
    radius: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")
        if not -90.0 < self.elevation < 90.0:
            raise ValueError("elevation must lie strictly between -90 and 90 degrees")

    def origin(self) -> torch.Tensor:
        return camera_origins(torch.tensor([self.azimuth]), torch.tensor([self.elevation]),
                              torch.tensor([self.radius]), torch.tensor([self.look_at]))[0]

    def camera_to_world(self) -> torch.Tensor:
        """4x4 rigid transform; columns are right, up, backward and the origin."""
        o = self.origin()
        fwd, right, up = _basis(o[None], torch.tensor([self.look_at], dtype=o.dtype))
        m = torch.eye(4, dtype=o.dtype)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right[0], up[0], -fwd[0], o
        return m


@dataclass(frozen=True)
class CameraRanges:
    azimuth: tuple[float, float] = (-45.0, 45.0)
    elevation: tuple[float, float] = (-10.0, 10.0)
    radius: tuple[float, float] = (2.732, 2.732)

    def __post_init__(self):
        for name in ("azimuth", "elevation", "radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is inverted: ({lo}, {hi})")


def _uniform(lo: float, hi: float, n: int, gen: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=dtype)


def sample_cameras(ranges: CameraRanges, n: int, seed=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched uniform draws of (azimuth, elevation, radius)."""
    gen = _as_generator(seed)
    return (_uniform(*ranges.azimuth, n, gen), _uniform(*ranges.elevation, n, gen),
            _uniform(*ranges.radius, n, gen))


def sample_camera(ranges: CameraRanges, seed=None) -> CameraPose:
    az, el, r = sample_cameras(ranges, 1, seed)
    return CameraPose(az.item(), el.item(), r.item())


# --------------------------------------------------------------------------
# Rays

def camera_origins(azimuth: torch.Tensor, elevation: torch.Tensor, radius: torch.Tensor,
                   look_at: torch.Tensor | None = None) -> torch.Tensor:
    az, el = torch.deg2rad(azimuth.double()), torch.deg2rad(elevation.double())
    offset = torch.stack([torch.cos(el) * torch.sin(az), torch.sin(el), torch.cos(el) * torch.cos(az)], -1)
    origin = radius.double()[:, None] * offset
    if look_at is not None:
        origin = origin + look_at.double()
    return origin


def _basis(origin: torch.Tensor, look_at: torch.Tensor):
    fwd = F.normalize(look_at - origin, dim=-1)
    up_world = torch.tensor(WORLD_UP, dtype=origin.dtype).expand_as(fwd)
    right = F.normalize(torch.cross(fwd, up_world, dim=-1), dim=-1)
    up = torch.cross(right, fwd, dim=-1)
    return fwd, right, up


def generate_rays_batch(azimuth: torch.Tensor, elevation: torch.Tensor, radius: torch.Tensor,
                        height: int, width: int, fov: float,
                        look_at: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pinhole rays through pixel centres, row-major: origins and unit directions (B, H*W, 3), float64."""
    if not 0.0 < fov < 180.0:
        raise ValueError(f"fov must lie in (0, 180), got {fov}")
    n = azimuth.shape[0]
    if look_at is None:
        look_at = torch.zeros(n, 3, dtype=torch.float64)
    look_at = look_at.double().expand(n, 3)
    origin = camera_origins(azimuth, elevation, radius, look_at)
    fwd, right, up = _basis(origin, look_at)
    half = math.tan(math.radians(fov) / 2)
    aspect = width / height
    u = ((torch.arange(width, dtype=torch.float64) + 0.5) / width * 2 - 1) * half * aspect
    v = ((torch.arange(height, dtype=torch.float64) + 0.5) / height * 2 - 1) * half
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    uu, vv = uu.reshape(-1), vv.reshape(-1)
    dirs = (fwd[:, None, :] + uu[None, :, None] * right[:, None, :] - vv[None, :, None] * up[:, None, :])
    dirs = F.normalize(dirs, dim=-1)
    origins = origin[:, None, :].expand_as(dirs)
    return origins, dirs


def generate_rays(pose: CameraPose, height: int, width: int, fov: float) -> tuple[torch.Tensor, torch.Tensor]:
    origins, dirs = generate_rays_batch(torch.tensor([pose.azimuth]), torch.tensor([pose.elevation]),
                                        torch.tensor([pose.radius]), height, width, fov,
                                        torch.tensor([pose.look_at]))
    return origins[0], dirs[0]


def stratified_depths(near: float, far: float, n_samples: int, seed=None, jitter: bool = True,
                      shape: Sequence[int] = (), dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Depths with one uniform draw per bin, plus the interval length each sample represents.

    Sample j covers the stretch between the midpoints to its neighbours (the
    outer ones extend to ``near``/``far``), so spacings are positive and sum
    to ``far - near``.
    """
    if not 0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    width = (far - near) / n_samples
    shape = tuple(shape) + (n_samples,)
    if jitter:
        offs = torch.rand(shape, generator=_as_generator(seed), dtype=dtype)
    else:
        offs = torch.full(shape, 0.5, dtype=dtype)
    depths = near + (torch.arange(n_samples, dtype=dtype) + offs) * width
    mids = 0.5 * (depths[..., 1:] + depths[..., :-1])
    bounds = torch.cat([torch.full(shape[:-1] + (1,), near, dtype=dtype), mids,
                        torch.full(shape[:-1] + (1,), far, dtype=dtype)], -1)
    return depths, bounds[..., 1:] - bounds[..., :-1]


def volume_render(sigma: torch.Tensor, f: torch.Tensor, delta: torch.Tensor,
                  return_weights: bool = False):
    """Alpha-composite features along rays.

    ``sigma`` and ``delta`` are (..., N_s), ``f`` is (..., N_s, M_f). With
    T_j = exp(-sum_{k<j} sigma_k delta_k), returns sum_j T_j (1 - exp(-sigma_j delta_j)) f_j.
    """
    if torch.any(sigma < 0):
        raise ValueError("densities must be nonnegative")
    tau = sigma * delta
    optical_depth = torch.cumsum(torch.cat([torch.zeros_like(tau[..., :1]), tau[..., :-1]], -1), -1)
    weights = torch.exp(-optical_depth) * (-torch.expm1(-tau))
    v = (weights[..., None] * f).sum(-2)
    return (v, weights) if return_weights else v


# --------------------------------------------------------------------------
# Neural renderer

class UpBlock(nn.Module):
    """Residual 2x upsampling: bilinear + convs on the main path, nearest + 1x1 on the skip."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv_0 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv_1 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        main = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        main = self.conv_1(F.relu(self.conv_0(F.relu(main))))
        return main + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


class NeuralRenderer(nn.Module):
    def __init__(self, dim_feature: int = 128, feature_res: int = 16, image_res: int = 64,
                 min_channels: int = 32):
        super().__init__()
        ratio = image_res // feature_res
        if ratio < 1 or ratio * feature_res != image_res or ratio & (ratio - 1):
            raise ValueError("image_res must be feature_res times a power of two")
        self.dim_feature = dim_feature
        self.feature_res = feature_res
        self.image_res = image_res
        blocks, c = [], dim_feature
        for _ in range(int(math.log2(ratio))):
            c_out = max(c // 2, min(min_channels, c))
            blocks.append(UpBlock(c, c_out))
            c = c_out
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.dim() != 4 or feat.shape[1] != self.dim_feature or feat.shape[-1] != self.feature_res \
                or feat.shape[-2] != self.feature_res:
            raise ValueError(
                f"feature image must be (B, {self.dim_feature}, {self.feature_res}, {self.feature_res}), "
                f"got {tuple(feat.shape)}")
        x = feat
        for block in self.blocks:
            x = block(x)
        return torch.sigmoid(self.to_rgb(F.relu(x)))


def neural_render(feat: torch.Tensor, params: NeuralRenderer) -> torch.Tensor:
    """Feature image (H_V, W_V, M_f) or batch (B, M_f, H_V, W_V) -> RGB in [0, 1].

    A single channels-last feature image gives a single (H, W, 3) image.
    """
    if feat.dim() == 3:
        return params(feat.permute(2, 0, 1)[None])[0].permute(1, 2, 0)
    return params(feat)


# --------------------------------------------------------------------------
# Full pipeline

@dataclass
class EntityBatch:
    """One entity slot evaluated for a batch of scenes."""

    field: FeatureField
    c_s: torch.Tensor
    c_a: torch.Tensor
    pose: ObjectPose | None  # None marks the background
    coord_scale: float = 1.0


def render_feature_image(entities: Sequence[EntityBatch], origins: torch.Tensor, dirs: torch.Tensor,
                         depths: torch.Tensor, deltas: torch.Tensor, feature_res: int,
                         dtype=torch.float32) -> torch.Tensor:
    """Evaluate, compose and volume-render every ray; returns (B, M_f, H_V, W_V).

    ``origins``/``dirs`` are (B, R, 3); ``depths``/``deltas`` are (B, R, N_s).
    """
    batch, n_rays = origins.shape[:2]
    n_s = depths.shape[-1]
    pts = origins[:, :, None, :] + depths[..., None] * dirs[:, :, None, :]
    pts = pts.reshape(batch, n_rays * n_s, 3).to(dtype)
    d = dirs[:, :, None, :].expand(batch, n_rays, n_s, 3).reshape(batch, n_rays * n_s, 3).to(dtype)
    samples = [evaluate_entity(e.field, e.c_s.to(dtype), e.c_a.to(dtype), e.pose, pts, d, e.coord_scale)
               for e in entities]
    comp = compose(samples)
    sigma = comp.sigma_total.reshape(batch, n_rays, n_s)
    f = comp.f_mean.reshape(batch, n_rays, n_s, -1)
    v = volume_render(sigma, f, deltas.to(dtype))
    return v.reshape(batch, feature_res, feature_res, -1).permute(0, 3, 1, 2)


def scene_entity_batches(scene: SceneGraph) -> list[EntityBatch]:
    out = []
    for ent in scene.entities:
        c_s, c_a = ent.encodings()
        out.append(EntityBatch(ent.field, c_s, c_a, None if ent.is_background else ent.pose,
                               scene.background_coord_scale if ent.is_background else 1.0))
    return out


def generate(scene: SceneGraph, pose: CameraPose, renderer: NeuralRenderer, config: RenderConfig,
             seed=None, dtype=torch.float32) -> torch.Tensor:
    """Render one scene from one camera to an (H, W, 3) image in [0, 1]."""
    res = renderer.feature_res
    origins, dirs = generate_rays(pose, res, res, config.fov)
    near, far = config.depth_range(pose.radius)
    depths, deltas = stratified_depths(near, far, config.n_samples, seed, config.jitter,
                                       shape=(1, res * res))
    feat = render_feature_image(scene_entity_batches(scene), origins[None], dirs[None],
                                depths, deltas, res, dtype)
    return renderer(feat)[0].permute(1, 2, 0)
