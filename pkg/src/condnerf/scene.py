"""Scene graphs of object/background entities and density-weighted composition."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from .conditioning import ConditionEncoder, LatentCodes, check_condition_range
from .fields import (FeatureField, FieldSample, ObjectPose, direction_to_object_space,
                     encode_direction, encode_point, to_object_space)

DENSITY_EPS = 1e-8


@dataclass(frozen=True)
class ComposedSample:
    sigma_total: torch.Tensor
    f_mean: torch.Tensor


def _sum_entities(terms: torch.Tensor) -> torch.Tensor:
    # Sorting along the entity axis makes the sum independent of entity order,
    # bit for bit. Two-term sums are already commutative in IEEE arithmetic.
    if terms.shape[0] > 2:
        terms = torch.sort(terms, dim=0).values
    return terms.sum(0)


def compose(samples: Sequence[FieldSample] | FieldSample) -> ComposedSample:
    """Density-weighted mean of entity features.

    Accepts a list of per-entity samples, or one sample whose leading axis
    indexes entities. Where the summed density is at most ``DENSITY_EPS`` the
    feature falls back to zero.
    """
    if isinstance(samples, FieldSample):
        sigmas, feats = samples.sigma, samples.f
    else:
        if len(samples) == 0:
            raise ValueError("compose needs at least one entity")
        dims = {s.f.shape[-1] for s in samples}
        if len(dims) != 1:
            raise ValueError(f"entities disagree on feature dimension: {sorted(dims)}")
        sigmas = torch.stack([s.sigma for s in samples])
        feats = torch.stack([s.f for s in samples])
    if sigmas.shape[0] == 1:
        return ComposedSample(sigmas[0], feats[0])

    sigma_total = _sum_entities(sigmas)
    safe_total = torch.where(sigma_total > DENSITY_EPS, sigma_total, torch.ones_like(sigma_total))
    weights = sigmas / safe_total
    f_mean = _sum_entities(weights[..., None] * feats)
    f_mean = torch.where((sigma_total > DENSITY_EPS)[..., None], f_mean, torch.zeros_like(f_mean))
    return ComposedSample(sigma_total, f_mean)


def evaluate_entity(field: FeatureField, c_s: torch.Tensor, c_a: torch.Tensor,
                    pose: ObjectPose | None, x: torch.Tensor, d: torch.Tensor,
                    coord_scale: float = 1.0) -> FieldSample:
    """Evaluate one entity at scene points ``x`` (B, P, 3) seen along directions ``d``.

    Objects (``pose`` given) are evaluated in canonical object space and have
    zero density outside the [-1, 1]^3 box; only points inside the box are
    pushed through the decoder. Background entities (``pose=None``) see
    scene coordinates divided by ``coord_scale``.
    """
    batch, n_pts = x.shape[:2]
    if pose is None:
        x_loc = x / coord_scale
        d_loc = d
        inside = torch.ones(batch, n_pts, dtype=torch.bool, device=x.device)
    else:
        pose = pose.to(x.dtype)
        x_loc = to_object_space(x, pose)
        d_loc = direction_to_object_space(d, pose)
        inside = (x_loc.abs() <= 1.0).all(-1)

    b_idx, p_idx = inside.nonzero(as_tuple=True)
    x_enc = encode_point(x_loc[b_idx, p_idx], field.point_octaves)
    d_enc = encode_direction(d_loc[b_idx, p_idx], field.dir_octaves, atol=1e-4)
    out = field(x_enc, d_enc, c_s[b_idx], c_a[b_idx])
    sigma = x.new_zeros(batch, n_pts).index_put((b_idx, p_idx), out.sigma)
    f = x.new_zeros(batch, n_pts, out.f.shape[-1]).index_put((b_idx, p_idx), out.f)
    return FieldSample(sigma, f)


# --------------------------------------------------------------------------
# Scene graph

@dataclass(frozen=True)
class Entity:
    field: FeatureField
    encoder: ConditionEncoder
    latents: LatentCodes
    condition: torch.Tensor
    pose: ObjectPose
    is_background: bool = False

    def encodings(self):
        check_condition_range(self.condition)
        enc = self.encoder(self.condition[None].to(self.latents.z_s.dtype),
                           LatentCodes(self.latents.z_s[None], self.latents.z_a[None]))
        return enc.c_s, enc.c_a


@dataclass(frozen=True)
class SceneGraph:
    """Ordered entities; exactly one of them is the background."""

    entities: tuple[Entity, ...]
    background_coord_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        if len(self.entities) < 1:
            raise ValueError("a scene needs at least one entity")
        n_bg = sum(e.is_background for e in self.entities)
        if n_bg != 1:
            raise ValueError(f"a scene needs exactly one background entity, got {n_bg}")
        bg = self.background
        ident = ObjectPose.identity(bg.pose.scale.dtype)
        if not (torch.equal(bg.pose.scale, ident.scale) and torch.equal(bg.pose.translation, ident.translation)
                and torch.equal(bg.pose.rotation, ident.rotation)):
            raise ValueError("the background pose must be the identity")

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def background(self) -> Entity:
        return next(e for e in self.entities if e.is_background)

    @property
    def object_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entities) if not e.is_background]

    def with_entity(self, index: int, **changes) -> "SceneGraph":
        ents = list(self.entities)
        ents[index] = replace(ents[index], **changes)
        return replace(self, entities=tuple(ents))

    def with_object_poses(self, fn) -> "SceneGraph":
        """Apply ``fn(pose) -> pose`` to every non-background entity."""
        ents = tuple(e if e.is_background else replace(e, pose=fn(e.pose)) for e in self.entities)
        return replace(self, entities=ents)


def eval_entities(scene: SceneGraph, x_scene: torch.Tensor, d: torch.Tensor) -> list[FieldSample]:
    """Per-entity samples at points ``x_scene`` (P, 3) with directions ``d`` (P, 3)."""
    x = x_scene.reshape(1, -1, 3)
    dd = d.reshape(1, -1, 3).expand_as(x)
    out = []
    for ent in scene.entities:
        c_s, c_a = ent.encodings()
        pose = None if ent.is_background else ent.pose
        scale = scene.background_coord_scale if ent.is_background else 1.0
        s = evaluate_entity(ent.field, c_s.to(x.dtype), c_a.to(x.dtype), pose, x, dd, scale)
        out.append(FieldSample(s.sigma.reshape(x_scene.shape[:-1]),
                               s.f.reshape(*x_scene.shape[:-1], -1)))
    return out


def eval_scene(scene: SceneGraph, x_scene: torch.Tensor, d: torch.Tensor) -> ComposedSample:
    return compose(eval_entities(scene, x_scene, d))


def replicate_object(scene: SceneGraph, source_index: int, new_pose: ObjectPose,
                     new_condition: torch.Tensor | None = None,
                     new_latents: LatentCodes | None = None) -> SceneGraph:
    """Append a copy of an object entity that shares its decoder parameters."""
    src = scene.entities[source_index]
    if src.is_background:
        raise ValueError("the background entity cannot be replicated")
    clone = replace(
        src, pose=new_pose,
        condition=src.condition if new_condition is None else torch.as_tensor(new_condition),
        latents=src.latents if new_latents is None else new_latents)
    return replace(scene, entities=scene.entities + (clone,))


# --------------------------------------------------------------------------
# Scene description files

def load_scene_description(path: str | Path) -> dict:
    """Parse a scene JSON file into plain python values and validate its shape.

    Format::

        {"entities": [
            {"kind": "object" | "background",
             "pose": {"scale": [..] | s, "translation": [x, y, z], "rotation_deg": [rx, ry, rz]},
             "condition": {"attr_name": value, ...},
             "latent_seed": int}, ...]}
    """
    data = json.loads(Path(path).read_text())
    ents = data.get("entities")
    if not isinstance(ents, list) or not ents:
        raise ValueError(f"{path}: 'entities' must be a non-empty list")
    for i, ent in enumerate(ents):
        kind = ent.get("kind", "object")
        if kind not in ("object", "background"):
            raise ValueError(f"{path}: entity {i} has unknown kind {kind!r}")
        if "latent_seed" not in ent:
            raise ValueError(f"{path}: entity {i} lacks 'latent_seed'")
    return data
