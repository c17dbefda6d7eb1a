"""Run configuration: one YAML document of flat, dot-namespaced keys.

Example::

    seed: 0
    generator.arch: esrgan
    generator.n_blocks: 2
    pretrain.epochs: 100
    adversarial.milestones: [25, 50, 100, 150]
    uncertainty.method: ensemble
    uncertainty.M: 5

Nested mappings are accepted and flattened. Unknown keys are rejected
before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from . import ConfigError
from .imaging import AugmentConfig
from .losses import FeatureExtractor, LossWeights, default_extractor
from .models import DiscriminatorConfig, GeneratorConfig
from .training import Recipe, TrainConfig
from .uncertainty import STD_MODES

METHODS = ("single", "mcd", "ensemble")
EXTRACTORS = ("auto", "random", "vgg19", "identity")

_TRAIN_KEYS = {"lr0", "beta1", "beta2", "batch_size", "epochs", "milestones", "decay_factor", "max_steps"}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig(relativistic=True)
    pretrain_enabled: bool = True
    pretrain: dict = field(default_factory=lambda: {"epochs": 100, "milestones": ()})
    adversarial_enabled: bool = True
    adversarial: dict = field(default_factory=dict)
    augment: AugmentConfig = AugmentConfig()
    loss_kind: str = "esrgan"
    weights: LossWeights = LossWeights()
    extractor: str = "auto"
    extractor_seed: int = 0
    layer_tag: str | None = None
    method: str = "single"
    M: int | None = None
    std_mode: str = "paper_eq7"
    ensemble_seeds: list[int] | None = None
    n_bins: int = 10
    n_thresholds: int = 50
    luminance: bool = False
    eval_crop: str = "center"
    train_manifest: str | None = None
    eval_manifest: str | None = None
    output_dir: str | None = None

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        flat = _flatten(raw or {})
        gen_keys = {f.name for f in fields(GeneratorConfig)}
        disc_keys = {f.name for f in fields(DiscriminatorConfig)}
        aug_keys = {f.name for f in fields(AugmentConfig)}
        gen, disc, aug, pre, adv, weights = {}, {}, {}, {}, {}, {}
        opts: dict[str, Any] = {}
        simple = {
            "seed": "seed",
            "pretrain.enabled": "pretrain_enabled",
            "adversarial.enabled": "adversarial_enabled",
            "loss.kind": "loss_kind",
            "loss.extractor": "extractor",
            "loss.extractor_seed": "extractor_seed",
            "loss.layer_tag": "layer_tag",
            "uncertainty.method": "method",
            "uncertainty.M": "M",
            "uncertainty.mode": "std_mode",
            "uncertainty.seeds": "ensemble_seeds",
            "evaluation.n_bins": "n_bins",
            "evaluation.n_thresholds": "n_thresholds",
            "evaluation.luminance": "luminance",
            "evaluation.crop": "eval_crop",
            "data.train_manifest": "train_manifest",
            "data.eval_manifest": "eval_manifest",
            "output.dir": "output_dir",
        }
        errors = []
        for key, value in flat.items():
            ns, _, name = key.partition(".")
            if key in simple:
                opts[simple[key]] = value
            elif ns == "generator" and name in gen_keys:
                gen[name] = value
            elif ns == "discriminator" and name in disc_keys:
                disc[name] = value
            elif ns == "augment" and name in aug_keys:
                aug[name] = value
            elif ns == "pretrain" and name in _TRAIN_KEYS:
                pre[name] = value
            elif ns == "adversarial" and name in _TRAIN_KEYS:
                adv[name] = value
            elif ns == "loss" and name in ("lambda_cont", "lambda_adv", "lambda_perc"):
                weights[name] = float(value)
            else:
                errors.append(f"unknown key {key!r}")
        if errors:
            raise ConfigError("; ".join(errors))
        loss_kind = opts.get("loss_kind", "esrgan")
        disc.setdefault("relativistic", loss_kind == "esrgan")
        try:
            cfg = cls(
                generator=GeneratorConfig(**gen),
                discriminator=DiscriminatorConfig(**disc),
                augment=AugmentConfig(**aug),
                pretrain={"epochs": 100, "milestones": (), **pre},
                adversarial=adv,
                weights=LossWeights(**weights),
                **opts,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            for attr in ("train_manifest", "eval_manifest", "output_dir"):
                value = getattr(cfg, attr)
                if value is not None and not os.path.isabs(value):
                    setattr(cfg, attr, str(base_dir / value))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw or {}, path.parent)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"uncertainty.method must be one of {METHODS}")
        if self.std_mode not in STD_MODES:
            raise ConfigError(f"uncertainty.mode must be one of {STD_MODES}")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"loss.extractor must be one of {EXTRACTORS}")
        if self.M is not None and self.M < 1:
            raise ConfigError("uncertainty.M must be >= 1")
        if self.ensemble_seeds is not None:
            seeds = [int(s) for s in self.ensemble_seeds]
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"uncertainty.seeds must be distinct, got {seeds}")
            if self.M is not None and len(seeds) != self.M:
                raise ConfigError("uncertainty.seeds length must equal uncertainty.M")
        if self.eval_crop not in ("center", "random"):
            raise ConfigError("evaluation.crop must be 'center' or 'random'")
        # build once so bad training values fail now
        self.recipe()

    # -- derived objects --------------------------------------------------------

    def train_config(self, which: str) -> TrainConfig:
        opts = dict(self.pretrain if which == "pretrain" else self.adversarial)
        if "milestones" in opts:
            opts["milestones"] = tuple(opts["milestones"] or ())
        phase = "psnr_pretrain" if which == "pretrain" else "adversarial"
        return TrainConfig(phase=phase, seed=self.seed, augment=self.augment, **opts)

    def recipe(self) -> Recipe:
        return Recipe(
            generator=self.generator,
            discriminator=self.discriminator,
            pretrain=self.train_config("pretrain") if self.pretrain_enabled else None,
            adversarial=self.train_config("adversarial") if self.adversarial_enabled else None,
            loss=self.loss_kind,
            weights=self.weights,
            extractor_seed=self.extractor_seed,
        )

    def build_extractor(self) -> FeatureExtractor:
        if self.extractor == "identity":
            return FeatureExtractor.identity()
        if self.extractor == "random":
            return FeatureExtractor.random_conv(self.extractor_seed, self.layer_tag or "conv4",
                                                self.generator.in_channels)
        if self.extractor == "vgg19":
            return FeatureExtractor.vgg19(self.layer_tag or "conv5_4")
        return default_extractor(self.extractor_seed)

    def member_seeds(self) -> list[int]:
        if self.ensemble_seeds is not None:
            return [int(s) for s in self.ensemble_seeds]
        return [self.seed + k for k in range(self.M or 5)]
