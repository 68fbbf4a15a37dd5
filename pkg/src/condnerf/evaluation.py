"""FID, per-class FID and the evaluation render grids."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .conditioning import LatentCodes, sample_latents
from .config import PriorConfig
from .fields import ObjectPose, yaw_matrix
from .generator import Generator
from .rendering import CameraPose, generate
from .scene import Entity, SceneGraph, replicate_object

# --------------------------------------------------------------------------
# Frechet distance


def frechet_distance(mu1, cov1, mu2, cov2, neg_tol: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)).

    The trace of the square root is the sum of square roots of the product's
    eigenvalues. Those are real and nonnegative for PSD inputs; round-off
    negatives down to ``-neg_tol`` (relative to the largest) are clamped.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError(
            f"inconsistent moment shapes: mu {mu1.shape}/{mu2.shape}, cov {cov1.shape}/{cov2.shape}")
    eig = np.linalg.eigvals(cov1 @ cov2).real
    scale = max(float(np.abs(eig).max(initial=0.0)), 1.0)
    if eig.min(initial=0.0) < -neg_tol * scale:
        warnings.warn(f"covariance product has a negative eigenvalue {eig.min():.3g}; clamping",
                      stacklevel=2)
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)


def gaussian_moments(features: np.ndarray, shrinkage: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, np.float64)
    n, dim = features.shape
    if n < 2:
        raise ValueError("at least two samples are needed to estimate moments")
    mu = features.mean(0)
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    if n < dim + 1:
        warnings.warn(f"{n} samples for a {dim}-dim embedding: covariance is singular, "
                      f"adding {shrinkage:g} * I", stacklevel=2)
        cov = cov + shrinkage * np.eye(dim)
    return mu, cov


# --------------------------------------------------------------------------
# Embeddings

class RandomConvEmbedding(nn.Module):
    """Fixed-seed random convolutional features for desk-scale FID.

    Inputs are resized to 32x32; the output concatenates global mean and max
    pooled activations of three conv stages, so colour and layout both count.
    Values are only comparable between runs using the same seed.
    """

    def __init__(self, seed: int = 0, width: int = 32, resolution: int = 32):
        super().__init__()
        self.identifier = f"random-conv-s{seed}-w{width}-r{resolution}"
        self.resolution = resolution
        gen = torch.Generator().manual_seed(seed)
        chans = [3, width, width, width]
        self.convs = nn.ModuleList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(c_in, c_out, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * c_in)) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            self.convs.append(conv)
        self.dim = 2 * sum(chans[1:])
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images.float()
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear",
                              align_corners=False, antialias=True)
        x = 2 * x - 1
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            feats += [x.mean((2, 3)), x.amax((2, 3))]
        return torch.cat(feats, 1)


class ScriptedEmbedding(nn.Module):
    """A TorchScript image embedding loaded from disk (e.g. an exported Inception network)."""

    def __init__(self, path: str | Path):
        super().__init__()
        self.net = torch.jit.load(str(path), map_location="cpu")
        self.identifier = f"scripted:{Path(path).name}"

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images.float()).flatten(1)


def load_embedding(spec: str | None) -> nn.Module:
    """``None``/``"random"``/``"random:<seed>"`` or a path to a TorchScript file."""
    if spec is None or spec == "random":
        return RandomConvEmbedding()
    if spec.startswith("random:"):
        return RandomConvEmbedding(int(spec.split(":", 1)[1]))
    return ScriptedEmbedding(spec)


def embed(images: torch.Tensor, embedding: nn.Module, batch_size: int = 256) -> np.ndarray:
    out = [embedding(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).double().numpy()


# --------------------------------------------------------------------------
# FID reports

@dataclass
class FidReport:
    fid: float
    per_class: dict[str, float] = field(default_factory=dict)
    n_real: int = 0
    n_fake: int = 0
    per_class_counts: dict[str, list[int]] = field(default_factory=dict)
    embedding: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def fid_from_features(real: np.ndarray, fake: np.ndarray) -> float:
    return max(frechet_distance(*gaussian_moments(real), *gaussian_moments(fake)), 0.0)


def compute_fid(real_images: torch.Tensor, fake_images: torch.Tensor, embedding: nn.Module,
                real_classes: Sequence[int] | None = None, fake_classes: Sequence[int] | None = None,
                class_names: Sequence[str] | None = None) -> FidReport:
    """Overall FID and, when class indices are given, FID within each class."""
    if real_images.shape[0] == 0 or fake_images.shape[0] == 0:
        raise ValueError("both image sets must be nonempty")
    real_f, fake_f = embed(real_images, embedding), embed(fake_images, embedding)
    report = FidReport(fid_from_features(real_f, fake_f), n_real=len(real_f), n_fake=len(fake_f),
                       embedding=getattr(embedding, "identifier", type(embedding).__name__))
    if real_classes is not None and fake_classes is not None:
        real_classes, fake_classes = np.asarray(real_classes), np.asarray(fake_classes)
        labels = sorted(set(real_classes.tolist()) | set(fake_classes.tolist()))
        for k in labels:
            name = class_names[k] if class_names is not None else str(k)
            r, f = real_f[real_classes == k], fake_f[fake_classes == k]
            report.per_class_counts[name] = [int(len(r)), int(len(f))]
            if len(r) >= 2 and len(f) >= 2:
                report.per_class[name] = fid_from_features(r, f)
            else:
                warnings.warn(f"class {name!r}: too few samples for FID ({len(r)} real, {len(f)} fake)",
                              stacklevel=2)
    return report


@torch.no_grad()
def generate_samples(generator: Generator, conditions: torch.Tensor, prior: PriorConfig, seed: int = 0,
                     batch_size: int = 64) -> torch.Tensor:
    """Images (N, 3, H, W) for the given conditions with fresh latents and poses."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for i in range(0, conditions.shape[0], batch_size):
        c = conditions[i:i + batch_size].float()
        inputs = generator.sample_inputs(c.shape[0], prior, c, gen)
        out.append(generator(inputs, depth_seed=gen))
    return torch.cat(out)


# --------------------------------------------------------------------------
# Grids

@dataclass
class Grid:
    kind: str
    image: np.ndarray  # (rows*H, cols*W, 3) float in [0, 1]
    tiles: list[list[np.ndarray]]
    sidecar: dict

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.tiles), len(self.tiles[0]) if self.tiles else 0

    def save(self, png_path: str | Path) -> tuple[Path, Path]:
        png_path = Path(png_path)
        png_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(self.image)).save(png_path)
        side = png_path.with_suffix(".json")
        side.write_text(json.dumps(self.sidecar, indent=2))
        return png_path, side


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def base_tile(generator: Generator, prior: PriorConfig, seed: int, condition: Sequence[float]) -> dict:
    """Tile description at the centre of the training priors."""
    az, el, r = prior.center_camera
    obj = prior.center_object
    return {
        "latent": {"seeds": [int(seed)], "alpha": 0.0},
        "background_seed": int(seed) + 1_000_003,
        "condition": [float(v) for v in condition],
        "camera": {"azimuth": az, "elevation": el, "radius": r},
        "objects": [{"scale": obj["scale"], "translation": list(obj["translation"]), "yaw": obj["yaw"]}],
    }


def _latents(generator: Generator, spec: dict, background: bool = False) -> LatentCodes:
    m = generator.model_cfg
    dims = (m.bg_dim_shape, m.bg_dim_appearance) if background else (m.dim_shape, m.dim_appearance)
    if background:
        z = sample_latents(1, *dims, spec["background_seed"])
        return LatentCodes(z.z_s[0], z.z_a[0])
    seeds, alpha = spec["latent"]["seeds"], float(spec["latent"].get("alpha", 0.0))
    za = sample_latents(1, *dims, seeds[0])
    if len(seeds) == 1:
        return LatentCodes(za.z_s[0], za.z_a[0])
    zb = sample_latents(1, *dims, seeds[1])
    return LatentCodes(((1 - alpha) * za.z_s + alpha * zb.z_s)[0], ((1 - alpha) * za.z_a + alpha * zb.z_a)[0])


def _object_pose(o: dict) -> ObjectPose:
    return ObjectPose(torch.full((3,), float(o["scale"]), dtype=torch.float64),
                      torch.tensor(o["translation"], dtype=torch.float64), yaw_matrix(float(o["yaw"])))


def tile_scene(generator: Generator, spec: dict) -> tuple[SceneGraph, CameraPose]:
    c = torch.tensor(spec["condition"], dtype=torch.float32)
    bg_c = c if generator.model_cfg.condition_background else torch.ones_like(c)
    bg = Entity(generator.background_field, generator.background_encoder,
                _latents(generator, spec, background=True), bg_c, ObjectPose.identity(), is_background=True)
    first, *others = spec["objects"]
    obj = Entity(generator.object_field, generator.object_encoder, _latents(generator, spec), c,
                 _object_pose(first))
    scene = SceneGraph((obj, bg), generator.model_cfg.bg_coord_scale)
    for o in others:
        scene = replicate_object(scene, 0, _object_pose(o))
    cam = spec["camera"]
    return scene, CameraPose(cam["azimuth"], cam["elevation"], cam["radius"])


@torch.no_grad()
def render_tile(generator: Generator, spec: dict) -> np.ndarray:
    scene, cam = tile_scene(generator, spec)
    img = generate(scene, cam, generator.renderer, replace(generator.render_cfg, jitter=False),
                   dtype=next(generator.parameters()).dtype)
    return img.double().numpy()


def render_grid(generator: Generator, kind: str, tile_specs: list[list[dict]], extra: dict | None = None) -> Grid:
    tiles = [[render_tile(generator, s) for s in row] for row in tile_specs]
    image = np.concatenate([np.concatenate(row, axis=1) for row in tiles], axis=0)
    sidecar = {"kind": kind, "rows": len(tile_specs), "cols": len(tile_specs[0]),
               "tiles": tile_specs, **(extra or {})}
    return Grid(kind, image, tiles, sidecar)


def render_from_sidecar(generator: Generator, sidecar: dict) -> Grid:
    return render_grid(generator, sidecar["kind"], sidecar["tiles"],
                       {k: v for k, v in sidecar.items() if k not in ("kind", "rows", "cols", "tiles")})


def _copy(spec: dict) -> dict:
    return json.loads(json.dumps(spec))


def _rows(generator, prior, seeds, conditions) -> list[dict]:
    if len(conditions) == 1 and len(seeds) > 1:
        conditions = list(conditions) * len(seeds)
    if len(seeds) != len(conditions):
        raise ValueError("need one condition per latent seed (or a single shared condition)")
    return [base_tile(generator, prior, s, c) for s, c in zip(seeds, conditions)]


def render_rotation_grid(generator: Generator, prior: PriorConfig, seeds: Sequence[int],
                         conditions: Sequence[Sequence[float]], angles: Sequence[float]) -> Grid:
    """Rows: (latent, condition) pairs. Columns: extra object yaw in degrees."""
    lo, hi = prior.relative_view_range()
    cam_az = prior.center_camera[0]
    base_yaw = prior.center_object["yaw"]
    for a in angles:
        rel = cam_az - (base_yaw + a)
        if not lo <= rel <= hi:
            warnings.warn(
                f"rotation {a:g} deg puts the view outside the training range [{lo:g}, {hi:g}] deg; "
                f"expect degraded samples", stacklevel=2)
    specs = []
    for base in _rows(generator, prior, seeds, conditions):
        row = []
        for a in angles:
            t = _copy(base)
            for o in t["objects"]:
                o["yaw"] = o["yaw"] + float(a)
            row.append(t)
        specs.append(row)
    return render_grid(generator, "rotation", specs, {"angles": [float(a) for a in angles]})


def render_condition_sweep(generator: Generator, prior: PriorConfig, seeds: Sequence[int],
                           base_condition: Sequence[float], attribute_index: int,
                           values: Sequence[float]) -> Grid:
    if len(values) < 2:
        raise ValueError("a sweep needs at least two values")
    if not 0 <= attribute_index < len(base_condition):
        raise ValueError(f"attribute index {attribute_index} out of range")
    specs = []
    for base in _rows(generator, prior, seeds, [base_condition]):
        row = []
        for v in values:
            t = _copy(base)
            t["condition"][attribute_index] = float(v)
            row.append(t)
        specs.append(row)
    return render_grid(generator, "sweep", specs,
                       {"attribute_index": attribute_index, "values": [float(v) for v in values]})


def render_class_interpolation(generator: Generator, prior: PriorConfig, seeds: Sequence[int],
                               class_names: Sequence[str], class_a: str, class_b: str, steps: int) -> Grid:
    if class_a not in class_names or class_b not in class_names:
        raise ValueError(f"unknown class; known classes: {list(class_names)}")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    a, b = class_names.index(class_a), class_names.index(class_b)
    m = len(class_names)
    alphas = np.linspace(0.0, 1.0, steps)
    specs = []
    for base in _rows(generator, prior, seeds, [[0.0] * m]):
        row = []
        for al in alphas:
            t = _copy(base)
            c = [0.0] * m
            c[a] += 1.0 - float(al)
            c[b] += float(al)
            t["condition"] = c
            row.append(t)
        specs.append(row)
    return render_grid(generator, "class-interp", specs,
                       {"class_a": class_a, "class_b": class_b, "alphas": alphas.tolist()})


def render_latent_interpolation(generator: Generator, prior: PriorConfig, condition: Sequence[float],
                                seed_pairs: Sequence[tuple[int, int]], steps: int) -> Grid:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    alphas = np.linspace(0.0, 1.0, steps)
    specs = []
    for sa, sb in seed_pairs:
        base = base_tile(generator, prior, sa, condition)
        row = []
        for al in alphas:
            t = _copy(base)
            t["latent"] = {"seeds": [int(sa), int(sb)], "alpha": float(al)}
            row.append(t)
        specs.append(row)
    return render_grid(generator, "latent-interp", specs, {"alphas": alphas.tolist()})


POSE_CONTROLS = ("horizontal", "depth", "scale", "add-object")


def render_pose_controls(generator: Generator, prior: PriorConfig, seeds: Sequence[int],
                         conditions: Sequence[Sequence[float]], control: str, values: Sequence[float]) -> Grid:
    """Edit object poses per column.

    ``horizontal``/``depth`` add the value to the x/z translation, ``scale``
    multiplies the object scale, and ``add-object`` places column ``j``'s
    objects at horizontal offsets ``values[0..j]``, replicating the decoder.
    """
    if control not in POSE_CONTROLS:
        raise ValueError(f"unknown control {control!r}; choose from {POSE_CONTROLS}")
    specs = []
    for base in _rows(generator, prior, seeds, conditions):
        row = []
        for j, v in enumerate(values):
            t = _copy(base)
            obj = t["objects"][0]
            if control == "horizontal":
                obj["translation"][0] += float(v)
            elif control == "depth":
                obj["translation"][2] += float(v)
            elif control == "scale":
                obj["scale"] *= float(v)
            else:
                t["objects"] = []
                for off in values[:j + 1]:
                    o = _copy(obj)
                    o["translation"][0] += float(off)
                    t["objects"].append(o)
            row.append(t)
        specs.append(row)
    return render_grid(generator, f"pose-{control}", specs, {"control": control,
                                                           "values": [float(v) for v in values]})
