"""Batched conditional generator: label encoders, entity decoders and the neural renderer."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .conditioning import ConditionEncoder, LatentCodes, sample_latents
from .config import ModelConfig, PriorConfig, RenderConfig
from .fields import FeatureField, ObjectPose, yaw_matrix
from .rendering import (CameraPose, EntityBatch, NeuralRenderer, generate_rays_batch,
                        render_feature_image, stratified_depths)
from .scene import Entity, SceneGraph


@dataclass
class GeneratorInputs:
    """Everything random that goes into a batch of generated images."""

    condition: torch.Tensor  # (B, M_c)
    z_object: LatentCodes
    z_background: LatentCodes
    azimuth: torch.Tensor
    elevation: torch.Tensor
    radius: torch.Tensor
    object_scale: torch.Tensor  # (B,)
    object_shift: torch.Tensor  # (B, 3)
    object_yaw: torch.Tensor  # (B,) degrees

    def __len__(self) -> int:
        return self.condition.shape[0]

    def object_pose(self) -> ObjectPose:
        return ObjectPose(self.object_scale[:, None].expand(-1, 3).double(), self.object_shift.double(),
                          yaw_matrix(self.object_yaw))

    def select(self, idx) -> "GeneratorInputs":
        return GeneratorInputs(self.condition[idx], self.z_object[idx], self.z_background[idx],
                               self.azimuth[idx], self.elevation[idx], self.radius[idx],
                               self.object_scale[idx], self.object_shift[idx], self.object_yaw[idx])


class Generator(nn.Module):
    def __init__(self, model: ModelConfig, render: RenderConfig | None = None):
        super().__init__()
        self.model_cfg = model
        self.render_cfg = render or RenderConfig()
        m = model
        self.object_encoder = ConditionEncoder(m.dim_condition, m.dim_shape, m.dim_appearance)
        self.background_encoder = ConditionEncoder(m.dim_condition, m.bg_dim_shape, m.bg_dim_appearance)
        self.object_field = FeatureField(m.point_octaves, m.dir_octaves, m.dim_shape, m.dim_appearance,
                                         m.dim_feature, m.hidden, m.n_blocks, m.skip_at)
        self.background_field = FeatureField(m.bg_point_octaves, m.dir_octaves, m.bg_dim_shape,
                                             m.bg_dim_appearance, m.dim_feature, m.bg_hidden,
                                             m.bg_n_blocks, None)
        self.renderer = NeuralRenderer(m.dim_feature, m.feature_res, m.image_res, m.renderer_min_channels)

    def sample_inputs(self, batch: int, prior: PriorConfig, conditions: torch.Tensor,
                      gen: torch.Generator) -> GeneratorInputs:
        m = self.model_cfg
        z_obj = sample_latents(batch, m.dim_shape, m.dim_appearance, gen)
        z_bg = sample_latents(batch, m.bg_dim_shape, m.bg_dim_appearance, gen)

        def uni(rng):
            lo, hi = rng
            return lo + (hi - lo) * torch.rand(batch, generator=gen, dtype=torch.float64)

        shift = torch.stack([uni(prior.object_shift_x), uni(prior.object_shift_y),
                             uni(prior.object_shift_z)], -1)
        return GeneratorInputs(conditions, z_obj, z_bg, uni(prior.azimuth), uni(prior.elevation),
                               uni(prior.radius), uni(prior.object_scale), shift, uni(prior.object_yaw))

    def entity_batches(self, inputs: GeneratorInputs) -> list[EntityBatch]:
        c = inputs.condition.float()
        obj = self.object_encoder(c, inputs.z_object)
        bg_c = c if self.model_cfg.condition_background else torch.ones_like(c)
        bg = self.background_encoder(bg_c, inputs.z_background)
        return [EntityBatch(self.object_field, obj.c_s, obj.c_a, inputs.object_pose()),
                EntityBatch(self.background_field, bg.c_s, bg.c_a, None, self.model_cfg.bg_coord_scale)]

    def feature_image(self, inputs: GeneratorInputs, entities: list[EntityBatch] | None = None,
                      depth_seed=None, jitter: bool | None = None) -> torch.Tensor:
        m, r = self.model_cfg, self.render_cfg
        res = m.feature_res
        origins, dirs = generate_rays_batch(inputs.azimuth, inputs.elevation, inputs.radius, res, res, r.fov)
        # The depth range follows the largest radius in the batch.
        near, far = r.depth_range(float(inputs.radius.max()))
        depths, deltas = stratified_depths(near, far, r.n_samples, depth_seed,
                                           r.jitter if jitter is None else jitter,
                                           shape=(len(inputs), res * res))
        if entities is None:
            entities = self.entity_batches(inputs)
        return render_feature_image(entities, origins, dirs, depths, deltas, res,
                                    dtype=next(self.parameters()).dtype)

    def forward(self, inputs: GeneratorInputs, depth_seed=None, jitter: bool | None = None) -> torch.Tensor:
        """Images (B, 3, H, W) in [0, 1]."""
        return self.renderer(self.feature_image(inputs, depth_seed=depth_seed, jitter=jitter))

    # ------------------------------------------------------------------
    # single-scene view

    def scene(self, inputs: GeneratorInputs, index: int = 0) -> tuple[SceneGraph, CameraPose]:
        """The scene graph and camera behind one element of a batch."""
        one = inputs.select(slice(index, index + 1))
        pose = one.object_pose()
        pose = ObjectPose(pose.scale[0], pose.translation[0], pose.rotation[0])
        c = one.condition[0].float()
        bg_c = c if self.model_cfg.condition_background else torch.ones_like(c)
        obj = Entity(self.object_field, self.object_encoder, one.z_object[0], c, pose)
        bg = Entity(self.background_field, self.background_encoder, one.z_background[0], bg_c,
                    ObjectPose.identity(), is_background=True)
        cam = CameraPose(float(one.azimuth[0]), float(one.elevation[0]), float(one.radius[0]))
        return SceneGraph((obj, bg), self.model_cfg.bg_coord_scale), cam
