"""Adversarial objective with R1 penalty, the alternating training loop, and checkpoints."""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import epoch_order
from .discriminator import ProjectionDiscriminator
from .generator import Generator


CHECKPOINT_SCHEMA = 1

Discriminator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class TrainingError(RuntimeError):
    """Numerical failure during training."""


def _r1_from_logits(logits: torch.Tensor, real: torch.Tensor, lam: float, create_graph: bool) -> torch.Tensor:
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=create_graph)
    if not torch.isfinite(grad).all():
        raise TrainingError(
            f"non-finite discriminator gradient on real images (logit range "
            f"{logits.min().item():.3g}..{logits.max().item():.3g})")
    return lam * grad.pow(2).flatten(1).sum(1).mean()


def r1_penalty(disc: Discriminator, real: torch.Tensor, conditions: torch.Tensor, lam: float,
               create_graph: bool = True) -> torch.Tensor:
    """lam * mean_i ||d D(real_i, c_i) / d real_i||^2."""
    real = real.detach().requires_grad_(True)
    return _r1_from_logits(disc(real, conditions), real, lam, create_graph)


def discriminator_loss(disc: Discriminator, real: torch.Tensor, fake: torch.Tensor,
                       conditions_real: torch.Tensor, conditions_fake: torch.Tensor,
                       lam: float) -> tuple[torch.Tensor, dict]:
    """Non-saturating discriminator loss plus R1 on reals; returns (loss, scalar parts)."""
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"real and fake images differ in shape: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if conditions_real.shape[0] != real.shape[0] or conditions_fake.shape[0] != fake.shape[0]:
        raise ValueError("one condition vector is needed per image")
    real = real.detach().requires_grad_(True)
    logit_real = disc(real, conditions_real)
    logit_fake = disc(fake.detach(), conditions_fake)
    if lam > 0:
        r1 = _r1_from_logits(logit_real, real, lam, create_graph=True)
    else:
        r1 = logit_real.new_zeros(())
    adv = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
    loss = adv + r1
    parts = {"loss_d": loss.item(), "r1": r1.item(), "logit_real": logit_real.mean().item(),
             "logit_fake": logit_fake.mean().item()}
    return loss, parts


def generator_loss(disc: Discriminator, fake: torch.Tensor, conditions_fake: torch.Tensor) -> torch.Tensor:
    if conditions_fake.shape[0] != fake.shape[0]:
        raise ValueError("one condition vector is needed per image")
    return F.softplus(-disc(fake, conditions_fake)).mean()


# --------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    config: dict
    iteration: int
    generator: dict
    discriminator: dict
    opt_generator: dict | None = None
    opt_discriminator: dict | None = None
    rng_state: torch.Tensor | None = None
    label_pool: torch.Tensor | None = None
    attributes: list[str] = field(default_factory=list)
    label_kinds: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def build_generator(self) -> Generator:
        cfg = self.run_config()
        g = Generator(cfg.model, cfg.render)
        g.load_state_dict(self.generator)
        return g.eval()

    def build_discriminator(self) -> ProjectionDiscriminator:
        cfg = self.run_config()
        d = make_discriminator(cfg)
        d.load_state_dict(self.discriminator)
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "schema": CHECKPOINT_SCHEMA,
            "metadata": json.dumps({
                "config": self.config, "iteration": self.iteration, "attributes": self.attributes,
                "label_kinds": self.label_kinds, "config_digest": RunConfig.from_dict(self.config).digest(),
                **self.metadata}),
            "generator": self.generator,
            "discriminator": self.discriminator,
            "opt_generator": self.opt_generator,
            "opt_discriminator": self.opt_discriminator,
            "rng_state": self.rng_state,
            "label_pool": self.label_pool,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path


class CheckpointError(Exception):
    pass


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("schema") != CHECKPOINT_SCHEMA:
            raise CheckpointError(f"{path}: unsupported checkpoint schema {payload.get('schema')!r}")
        meta = json.loads(payload["metadata"])
    except CheckpointError:
        raise
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    extra = {k: v for k, v in meta.items()
             if k not in ("config", "iteration", "attributes", "label_kinds")}
    return Checkpoint(meta["config"], meta["iteration"], payload["generator"], payload["discriminator"],
                      payload["opt_generator"], payload["opt_discriminator"], payload["rng_state"],
                      payload["label_pool"], meta.get("attributes", []), meta.get("label_kinds", []), extra)


# --------------------------------------------------------------------------
# Training loop

def make_discriminator(cfg: RunConfig) -> ProjectionDiscriminator:
    m = cfg.model
    return ProjectionDiscriminator(m.dim_condition, m.image_res, m.disc_base_channels, m.disc_max_channels)


class Trainer:
    """Holds models, optimizers and the RNG; ``step()`` runs one D update then one G update."""

    def __init__(self, cfg: RunConfig, images: torch.Tensor, conditions: torch.Tensor,
                 attributes: list[str] | None = None, label_kinds: list[str] | None = None):
        cfg.validate()
        if images.shape[0] == 0:
            raise ValueError("training data is empty")
        if conditions.shape != (images.shape[0], cfg.model.dim_condition):
            raise ValueError(
                f"conditions have shape {tuple(conditions.shape)}, expected "
                f"({images.shape[0]}, {cfg.model.dim_condition})")
        self.cfg = cfg
        self.images = images.float()
        self.conditions = conditions.float()
        self.attributes = list(attributes or [])
        self.label_kinds = list(label_kinds or [])
        t = cfg.train
        if t.num_threads:
            torch.set_num_threads(t.num_threads)
        torch.manual_seed(t.seed)
        self.generator = Generator(cfg.model, cfg.render)
        self.discriminator = make_discriminator(cfg)
        self.opt_g = torch.optim.RMSprop(self.generator.parameters(), lr=t.lr_generator,
                                         alpha=t.rmsprop_alpha, eps=t.rmsprop_eps)
        self.opt_d = torch.optim.RMSprop(self.discriminator.parameters(), lr=t.lr_discriminator,
                                         alpha=t.rmsprop_alpha, eps=t.rmsprop_eps)
        self.rng = torch.Generator().manual_seed(t.seed + 1)
        self.iteration = 0

    # data -------------------------------------------------------------
    def real_batch(self, iteration: int) -> tuple[torch.Tensor, torch.Tensor]:
        n, bs = self.images.shape[0], self.cfg.train.batch_size
        if n <= bs:
            idx = epoch_order(n, self.cfg.train.seed, iteration)
        else:
            per_epoch = n // bs
            epoch, k = divmod(iteration, per_epoch)
            idx = epoch_order(n, self.cfg.train.seed, epoch)[k * bs:(k + 1) * bs]
        idx = torch.from_numpy(np.ascontiguousarray(idx))
        return self.images[idx], self.conditions[idx]

    def fake_conditions(self, batch: int) -> torch.Tensor:
        # Draw label vectors from the empirical label distribution of the data.
        idx = torch.randint(0, self.conditions.shape[0], (batch,), generator=self.rng)
        return self.conditions[idx]

    def fake_batch(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.fake_conditions(batch)
        inputs = self.generator.sample_inputs(batch, self.cfg.prior, c, self.rng)
        return self.generator(inputs, depth_seed=self.rng), c

    # step -------------------------------------------------------------
    def step(self) -> dict:
        t0 = time.perf_counter()
        lam = self.cfg.train.r1_lambda
        real, c_real = self.real_batch(self.iteration)
        bs = real.shape[0]

        self.generator.requires_grad_(False)
        self.discriminator.requires_grad_(True)
        with torch.no_grad():
            fake, c_fake = self.fake_batch(bs)
        loss_d, parts = discriminator_loss(self.discriminator, real, fake, c_real, c_fake, lam)
        self._check_finite("discriminator", loss_d, parts)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        self.generator.requires_grad_(True)
        self.discriminator.requires_grad_(False)
        fake, c_fake = self.fake_batch(bs)
        loss_g = generator_loss(self.discriminator, fake, c_fake)
        parts["loss_g"] = loss_g.item()
        self._check_finite("generator", loss_g, parts)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()
        self.discriminator.requires_grad_(True)

        self.iteration += 1
        parts["iteration"] = self.iteration
        parts["step_time"] = time.perf_counter() - t0
        return parts

    def _check_finite(self, which: str, loss: torch.Tensor, parts: dict) -> None:
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite {which} loss at iteration {self.iteration}: {parts}")

    # persistence ------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.to_dict(), iteration=self.iteration,
            generator={k: v.detach().clone() for k, v in self.generator.state_dict().items()},
            discriminator={k: v.detach().clone() for k, v in self.discriminator.state_dict().items()},
            opt_generator=_clone_state(self.opt_g.state_dict()),
            opt_discriminator=_clone_state(self.opt_d.state_dict()),
            rng_state=self.rng.get_state(), label_pool=self.conditions.clone(),
            attributes=self.attributes, label_kinds=self.label_kinds)

    def restore(self, ckpt: Checkpoint) -> None:
        self.generator.load_state_dict(ckpt.generator)
        self.discriminator.load_state_dict(ckpt.discriminator)
        if ckpt.opt_generator is not None:
            self.opt_g.load_state_dict(ckpt.opt_generator)
        if ckpt.opt_discriminator is not None:
            self.opt_d.load_state_dict(ckpt.opt_discriminator)
        if ckpt.rng_state is not None:
            self.rng.set_state(ckpt.rng_state)
        self.iteration = ckpt.iteration


def _clone_state(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_state(v) for v in obj]
    return obj


def train(cfg: RunConfig, images: torch.Tensor, conditions: torch.Tensor, out_dir: str | Path | None = None,
          attributes: list[str] | None = None, label_kinds: list[str] | None = None,
          resume: Checkpoint | None = None, progress: Callable[[dict], None] | None = None
          ) -> Iterator[Checkpoint]:
    """Run the configured number of iterations, yielding checkpoints as they are taken.

    The initial state is always yielded first; later checkpoints follow every
    ``checkpoint_every`` iterations and at the end. With ``out_dir`` set, each
    checkpoint is also written to disk and per-iteration scalars are appended
    to ``metrics.jsonl``.
    """
    trainer = Trainer(cfg, images, conditions, attributes, label_kinds)
    if resume is not None:
        trainer.restore(resume)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = (out / "metrics.jsonl").open("a")
    t = cfg.train
    start = time.perf_counter()
    last_good: Path | None = None

    def emit() -> Checkpoint:
        nonlocal last_good
        ckpt = trainer.checkpoint()
        if out is not None:
            last_good = ckpt.save(out / f"checkpoint_{trainer.iteration:07d}.pt")
            ckpt.save(out / "checkpoint_latest.pt")
        return ckpt

    try:
        yield emit()
        while trainer.iteration < t.iterations:
            try:
                parts = trainer.step()
            except TrainingError as exc:
                # the failed step may have applied one of its two updates, so fall back to
                # the most recent checkpoint that was actually emitted
                if last_good is not None:
                    last_good = Path(shutil.copyfile(last_good, out / "checkpoint_last_good.pt"))
                raise TrainingError(f"{exc}; last good checkpoint: {last_good}") from exc
            parts["wall_time"] = time.perf_counter() - start
            if metrics is not None and trainer.iteration % max(t.log_every, 1) == 0:
                metrics.write(json.dumps(parts) + "\n")
                metrics.flush()
            if progress is not None:
                progress(parts)
            if trainer.iteration % max(t.checkpoint_every, 1) == 0 or trainer.iteration == t.iterations:
                yield emit()
    finally:
        if metrics is not None:
            metrics.close()

