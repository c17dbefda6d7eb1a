"""Optimization loops: PSNR pretraining, adversarial training, ensembles."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import ConfigError, SRUncError
from .imaging import NO_AUGMENT, AugmentConfig, DatasetManifest, TrainingPair, augment_pair, load_pairs
from .losses import (
    FeatureExtractor,
    LossWeights,
    content_l1,
    default_extractor,
    gan_discriminator_loss,
    perceptual,
    ragan_losses,
    srgan_adv,
    SRGAN_ADV_WEIGHT,
)
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    to_tensor,
)

logger = logging.getLogger(__name__)

PHASES = ("psnr_pretrain", "adversarial")
LOSS_KINDS = ("srgan", "esrgan")
ESRGAN_MILESTONES = (25, 50, 100, 150)


class TrainingDivergedError(SRUncError, RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 100
    milestones: tuple[int, ...] = ()
    decay_factor: float = 2.0
    seed: int = 0
    phase: str = "adversarial"
    max_steps: int | None = None
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.decay_factor <= 0:
            raise ConfigError("decay_factor must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


def esrgan_adversarial_config(**overrides) -> TrainConfig:
    """200 adversarial epochs, lr 1e-4 halved after epochs 25, 50, 100 and 150."""
    opts = dict(epochs=200, milestones=ESRGAN_MILESTONES, decay_factor=2.0, phase="adversarial")
    opts.update(overrides)
    return TrainConfig(**opts)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 / decay_factor ** (number of milestones <= epoch)``."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 / cfg.decay_factor**passed


# -- reports and checkpoints --------------------------------------------------------


def _cell(v) -> str:
    return str(v) if isinstance(v, (int, str)) else repr(float(v))


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    seeds: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        # phases log different losses; columns are the ordered union, blanks where absent
        cols = list(dict.fromkeys(["phase", "epoch", "lr"] + [k for rec in self.records for k in rec]))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.records:
            w.writerow([_cell(rec.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_log(self) -> str:
        lines = [f"seeds {self.seeds}"]
        for rec in self.records:
            lines.append(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def extend(self, other: "TrainReport") -> None:
        self.records += other.records
        self.wall_time += other.wall_time
        self.seeds.update(other.seeds)


@dataclass
class Checkpoint:
    generator: nn.Module
    discriminator: nn.Module | None = None
    phase: str = "init"
    epoch: int = 0
    seed: int = 0
    report: TrainReport = field(default_factory=TrainReport)

    @property
    def dropout_positions(self) -> list[int]:
        return list(self.generator.dropout_positions)


# -- helpers -----------------------------------------------------------------------


def _pairs_of(data) -> list[TrainingPair]:
    pairs = load_pairs(data) if isinstance(data, DatasetManifest) else list(data)
    if not pairs:
        raise ConfigError("training needs a non-empty dataset")
    return pairs


def _batches(pairs: Sequence[TrainingPair], cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), cfg.batch_size):
        chunk = [augment_pair(pairs[i], rng, cfg.augment) for i in order[start : start + cfg.batch_size]]
        yield to_tensor(np.stack([p.lr for p in chunk])), to_tensor(np.stack([p.hr for p in chunk]))


def _check_finite(values: dict, state: dict) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss {bad}", {**state, "losses": values})


def _set_requires_grad(model: nn.Module, flag: bool) -> None:
    for p in model.parameters():
        p.requires_grad_(flag)


def _adam(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2))


# -- phases ------------------------------------------------------------------------


def pretrain_psnr(gen: nn.Module, data, cfg: TrainConfig) -> Checkpoint:
    """Optimize the generator on the L1 reconstruction loss only."""
    if cfg.phase != "psnr_pretrain":
        raise ConfigError("pretrain_psnr needs cfg.phase == 'psnr_pretrain'")
    pairs = _pairs_of(data)
    if cfg.batch_size > len(pairs):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(pairs)}")
    rng = np.random.default_rng(cfg.seed)
    opt = _adam(gen, cfg)
    report = TrainReport(seeds={"pretrain": cfg.seed})
    t0 = time.perf_counter()
    steps, epoch = 0, 0
    gen.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            total, n = 0.0, 0
            for lr_t, hr_t in _batches(pairs, cfg, rng):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                loss = content_l1(gen(lr_t), hr_t)
                value = loss.item()
                _check_finite({"content": value}, {"epoch": epoch, "step": steps})
                opt.zero_grad()
                loss.backward()
                opt.step()
                steps += 1
                total += value * len(lr_t)
                n += len(lr_t)
            report.records.append({"phase": cfg.phase, "epoch": epoch, "lr": lr, "content": total / max(n, 1), "steps": steps})
    gen.eval()
    report.wall_time = time.perf_counter() - t0
    done = len(report.records)
    logger.info("pretrain finished: %d epochs, %d steps", done, steps)
    return Checkpoint(gen, None, "psnr_pretrain", done, cfg.seed, report)


def discriminator_step(gen, disc, opt_d, lr_t, hr_t, loss: str) -> float:
    """One discriminator update against a detached generator output."""
    _set_requires_grad(disc, True)
    with torch.no_grad():
        fake = gen(lr_t)
    if loss == "srgan":
        d_loss = gan_discriminator_loss(disc(hr_t), disc(fake))
    else:
        _, d_loss = ragan_losses(disc(hr_t), disc(fake))
    opt_d.zero_grad()
    d_loss.backward()
    opt_d.step()
    return d_loss.item()


def generator_step(gen, disc, opt_g, lr_t, hr_t, loss: str, extractor, weights: LossWeights) -> dict:
    """One generator update; the discriminator is frozen for its duration."""
    _set_requires_grad(disc, False)
    try:
        sr = gen(lr_t)
        if loss == "srgan":
            perc = perceptual(sr, hr_t, extractor, "L2")
            adv = srgan_adv(disc(sr))
            cont = content_l1(sr.detach(), hr_t)
            g_loss = perc + SRGAN_ADV_WEIGHT * adv
        else:
            with torch.no_grad():
                logits_real = disc(hr_t)
            perc = perceptual(sr, hr_t, extractor, "L1")
            adv, _ = ragan_losses(logits_real, disc(sr))
            cont = content_l1(sr, hr_t)
            g_loss = weights.lambda_perc * perc + weights.lambda_adv * adv + weights.lambda_cont * cont
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
    finally:
        _set_requires_grad(disc, True)
    return {
        "g_total": g_loss.item(),
        "g_perceptual": perc.item(),
        "g_adversarial": adv.item(),
        "g_content": cont.item(),
    }


def train_gan(
    gen: nn.Module,
    disc: nn.Module,
    data,
    cfg: TrainConfig,
    loss: str = "esrgan",
    extractor: FeatureExtractor | None = None,
    weights: LossWeights = LossWeights(),
) -> Checkpoint:
    """Alternate one discriminator step and one generator step per batch.

    ``loss="srgan"`` uses the VGG-L2 + 1e-3 adversarial generator objective and
    the standard GAN discriminator loss (``disc`` must emit probabilities);
    ``loss="esrgan"`` uses the three-term relativistic-average objective
    (``disc`` must emit logits).
    """
    if cfg.phase != "adversarial":
        raise ConfigError("train_gan needs cfg.phase == 'adversarial'")
    if loss not in LOSS_KINDS:
        raise ConfigError(f"loss must be one of {LOSS_KINDS}")
    if disc.config.relativistic != (loss == "esrgan"):
        raise ConfigError(f"{loss} training needs a {'relativistic' if loss == 'esrgan' else 'sigmoid'} discriminator")
    pairs = _pairs_of(data)
    if cfg.batch_size > len(pairs):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(pairs)}")
    extractor = extractor if extractor is not None else default_extractor()
    rng = np.random.default_rng(cfg.seed)
    opt_g, opt_d = _adam(gen, cfg), _adam(disc, cfg)
    report = TrainReport(seeds={"adversarial": cfg.seed})
    t0 = time.perf_counter()
    steps = 0
    gen.train()
    disc.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            lr = lr_at(epoch, cfg)
            for opt in (opt_g, opt_d):
                for group in opt.param_groups:
                    group["lr"] = lr
            sums: dict[str, float] = {}
            n = 0
            for lr_t, hr_t in _batches(pairs, cfg, rng):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                state = {"epoch": epoch, "step": steps}
                d_loss = discriminator_step(gen, disc, opt_d, lr_t, hr_t, loss)
                values = generator_step(gen, disc, opt_g, lr_t, hr_t, loss, extractor, weights)
                values["d_loss"] = d_loss
                _check_finite(values, state)
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v * len(lr_t)
                n += len(lr_t)
                steps += 1
            means = {k: v / max(n, 1) for k, v in sums.items()}
            report.records.append({"phase": cfg.phase, "epoch": epoch, "lr": lr, **means})
    gen.eval()
    disc.eval()
    report.wall_time = time.perf_counter() - t0
    return Checkpoint(gen, disc, "adversarial", len(report.records), cfg.seed, report)


# -- recipes and ensembles ---------------------------------------------------------


@dataclass(frozen=True)
class Recipe:
    """Everything needed to train one model from a seed.

    ``pretrain`` / ``adversarial`` may be ``None`` to skip that phase; their
    ``seed`` fields are overridden by the member seed.
    """

    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig(relativistic=True)
    pretrain: TrainConfig | None = None
    adversarial: TrainConfig | None = TrainConfig()
    loss: str = "esrgan"
    weights: LossWeights = LossWeights()
    extractor_seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.discriminator.relativistic != (self.loss == "esrgan"):
            raise ConfigError("discriminator.relativistic must be set exactly for esrgan loss")


def member_seeds(seed: int) -> dict:
    """Derived seeds for one training run: generator init, discriminator init, data order."""
    words = np.random.SeedSequence(int(seed)).generate_state(3)
    return {"generator": int(seed), "discriminator": int(words[1]), "data": int(words[2])}


def run_recipe(recipe: Recipe, data, seed: int, extractor: FeatureExtractor | None = None) -> Checkpoint:
    seeds = member_seeds(seed)
    gen = build_generator(recipe.generator, seeds["generator"])
    disc = build_discriminator(recipe.discriminator, seeds["discriminator"])
    report = TrainReport(seeds=dict(seeds))
    ckpt = Checkpoint(gen, disc, "init", 0, seed, report)
    if recipe.pretrain is not None:
        pre = pretrain_psnr(gen, data, replace(recipe.pretrain, seed=seeds["data"], phase="psnr_pretrain"))
        report.extend(pre.report)
        ckpt = Checkpoint(gen, disc, pre.phase, pre.epoch, seed, report)
    if recipe.adversarial is not None:
        if extractor is None:
            extractor = default_extractor(recipe.extractor_seed)
        adv = train_gan(gen, disc, data, replace(recipe.adversarial, seed=seeds["data"], phase="adversarial"),
                        recipe.loss, extractor, recipe.weights)
        report.extend(adv.report)
        ckpt = Checkpoint(gen, disc, adv.phase, adv.epoch, seed, report)
    report.seeds = dict(seeds)
    return ckpt


def train_ensemble(recipe: Recipe, M: int, seeds: Sequence[int], data,
                   extractor: FeatureExtractor | None = None) -> list[Checkpoint]:
    """Train ``M`` members that differ only in their seed."""
    seeds = [int(s) for s in seeds]
    if M < 1 or len(seeds) != M:
        raise ConfigError(f"need exactly M={M} seeds, got {len(seeds)}")
    if len(set(seeds)) != M:
        raise ConfigError(f"ensemble seeds must be distinct, got {seeds}")
    if extractor is None and recipe.adversarial is not None:
        extractor = default_extractor(recipe.extractor_seed)
    return [run_recipe(recipe, data, s, extractor) for s in seeds]
