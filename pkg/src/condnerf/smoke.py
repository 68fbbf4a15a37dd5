"""Desk-scale smoke experiment: a hue-controlled synthetic dataset and the checks run on it.

The measurements here are what the acceptance suite and ``scripts/smoke_train.py``
report: hue separation between the two classes, toy-FID improvement over the
initial generator, monotone hue drift under a condition sweep, and the blob
count after replicating the object.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import RunConfig, desk_config
from .data import DatasetManifest, SyntheticSceneSpec, generate_synthetic, load_all
from .evaluation import (RandomConvEmbedding, base_tile, compute_fid, generate_samples,
                         render_condition_sweep, render_tile)
from .generator import Generator
from .measure import count_blobs, hue_difference, is_monotone, mean_foreground_hue
from .training import Checkpoint, train


@dataclass
class SmokeSettings:
    iterations: int = 1000
    n_images: int = 512
    seed: int = 0
    checkpoint_every: int = 500
    eval_count: int = 256
    hue_samples: int = 64
    sweep_rows: int = 20
    sweep_values: tuple[float, ...] = tuple(np.linspace(0.0, 3.0, 7).tolist())
    # Objects are placed at -offset and +offset along x for the replication check.
    replicate_offset: float = 0.8
    num_threads: int | None = 1


def smoke_spec() -> SyntheticSceneSpec:
    """Red vs blue disk, jittered horizontally so the object must move independently of the backdrop."""
    return SyntheticSceneSpec(attributes=["red", "blue"], attribute_hues=[0.0, 240.0], base_hue=120.0,
                              image_size=32, object_radius=0.22, shift_jitter=(0.12, 0.0))


def smoke_config(settings: SmokeSettings | None = None) -> RunConfig:
    s = settings or SmokeSettings()
    cfg = desk_config(2)
    p = cfg.prior
    p.azimuth = (-20.0, 20.0)
    p.elevation = (-5.0, 5.0)
    p.object_scale = (0.6, 0.6)
    p.object_shift_x = (-0.35, 0.35)
    cfg.train.iterations = s.iterations
    cfg.train.checkpoint_every = s.checkpoint_every
    cfg.train.seed = s.seed
    cfg.train.num_threads = s.num_threads
    return cfg


@dataclass
class SmokeRun:
    config: RunConfig
    manifest: DatasetManifest
    images: torch.Tensor
    conditions: torch.Tensor
    checkpoints: list[Checkpoint]
    train_seconds: float

    @property
    def initial(self) -> Checkpoint:
        return self.checkpoints[0]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def run_smoke(out_dir: str | Path, settings: SmokeSettings | None = None,
              progress: Callable[[dict], None] | None = None) -> SmokeRun:
    s = settings or SmokeSettings()
    out = Path(out_dir)
    manifest = generate_synthetic(smoke_spec(), s.n_images, out / "data", seed=s.seed)
    images, conditions = load_all(manifest, 32)
    cfg = smoke_config(s)
    cfg.data.manifest = str(out / "data" / "manifest.csv")
    cfg.output_dir = str(out)
    start = time.perf_counter()
    ckpts = list(train(cfg, images, conditions, out_dir=out / "train", attributes=manifest.attributes,
                       label_kinds=manifest.label_kinds, progress=progress))
    return SmokeRun(cfg, manifest, images, conditions, ckpts, time.perf_counter() - start)


# --------------------------------------------------------------------------
# measurements

def expected_hue_sign(spec: SyntheticSceneSpec | None = None) -> float:
    spec = spec or smoke_spec()
    return float(np.sign(hue_difference(spec.hue([1, 0]) % 360, spec.hue([0, 1]) % 360)))


def _circular_mean(hues: Sequence[float]) -> float:
    h = np.radians([v for v in hues if np.isfinite(v)])
    if h.size == 0:
        return float("nan")
    return float(np.degrees(np.arctan2(np.sin(h).mean(), np.cos(h).mean())) % 360)


@dataclass
class HueSeparation:
    difference: float  # signed hue(c=(1,0)) - hue(c=(0,1)) in degrees
    hue_a: float
    hue_b: float
    empty_fraction: float


def hue_separation(generator: Generator, prior, n: int = 64, seed: int = 7) -> HueSeparation:
    conds = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).repeat(n, 1)
    imgs = generate_samples(generator, conds, prior, seed=seed)
    hues = np.array([mean_foreground_hue(im) for im in imgs])
    ha, hb = _circular_mean(hues[0::2]), _circular_mean(hues[1::2])
    return HueSeparation(hue_difference(ha, hb), ha, hb, float(np.mean(~np.isfinite(hues))))


def toy_fid(generator: Generator, prior, real: torch.Tensor, conditions: torch.Tensor, seed: int = 11,
            embedding: torch.nn.Module | None = None) -> float:
    embedding = embedding or RandomConvEmbedding(seed=0)
    fake = generate_samples(generator, conditions, prior, seed=seed)
    return compute_fid(real, fake, embedding).fid


@dataclass
class SweepReport:
    fraction: float
    rows: list[list[float]] = field(default_factory=list)  # unwrapped hue drift per row
    passed: list[bool] = field(default_factory=list)


def unwrapped_drift(hues: Sequence[float]) -> list[float]:
    steps = [hue_difference(b, a) for a, b in zip(hues, hues[1:])]
    return [0.0, *np.cumsum(steps).tolist()]


def sweep_monotonicity(generator: Generator, prior, rows: int = 20,
                       values: Sequence[float] = (0, 0.5, 1, 1.5, 2, 2.5, 3),
                       min_drift: float = 10.0, tolerance: float = 1.0) -> SweepReport:
    """Sweep each attribute over ``values`` with the other class held on.

    A row counts as monotone when its foreground hue never steps against the
    net drift by more than ``tolerance`` degrees and drifts by at least
    ``min_drift`` degrees overall (a flat row does not count).
    """
    report = SweepReport(0.0)
    seeds = list(range(rows))
    for base, attr in (([0.0, 1.0], 0), ([1.0, 0.0], 1)):
        grid = render_condition_sweep(generator, prior, seeds, base, attr, values)
        for row in grid.tiles:
            hues = [mean_foreground_hue(t) for t in row]
            if not np.all(np.isfinite(hues)):
                report.rows.append([])
                report.passed.append(False)
                continue
            drift = unwrapped_drift(hues)
            report.rows.append(drift)
            report.passed.append(is_monotone(drift, tolerance) and abs(drift[-1]) >= min_drift)
    report.fraction = float(np.mean(report.passed))
    return report


def replicate_blob_counts(generator: Generator, prior, seeds: Sequence[int], offset: float
                          ) -> tuple[list[int], list[int]]:
    """Blob counts for one centred object and for the object plus a copy, at -offset / +offset."""
    singles, pairs = [], []
    for i, seed in enumerate(seeds):
        cond = [1.0, 0.0] if i % 2 == 0 else [0.0, 1.0]
        spec = base_tile(generator, prior, seed, cond)
        singles.append(count_blobs(render_tile(generator, spec)))
        obj = spec["objects"][0]
        spec["objects"] = [dict(obj, translation=[obj["translation"][0] + dx, *obj["translation"][1:]])
                           for dx in (-offset, offset)]
        pairs.append(count_blobs(render_tile(generator, spec)))
    return singles, pairs
