"""Training objectives for SRGAN and ESRGAN.

Every loss takes NCHW ``torch`` tensors and returns a scalar tensor, so the
same functions serve training (autograd) and evaluation. Norms are
mean-reduced over batch and elements. Probabilities are clamped to
``[EPS, 1 - EPS]`` before any logarithm.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import ConfigError, DomainError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-7
SRGAN_ADV_WEIGHT = 1e-3
WEIGHTS_ENV = "SRUNC_WEIGHTS_DIR"


@dataclass(frozen=True)
class LossWeights:
    lambda_cont: float = 1e-2
    lambda_adv: float = 5e-3
    lambda_perc: float = 1.0

    def __post_init__(self):
        ws = (self.lambda_cont, self.lambda_adv, self.lambda_perc)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


# -- feature extractors ------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Frozen embedding network for perceptual losses.

    ``provenance`` is ``"pretrained"``, ``"random-seeded"`` or ``"identity"``.
    """

    def __init__(self, backbone: nn.Module, layer_tag: str, provenance: str, seed: int | None = None,
                 normalize: bool = False):
        super().__init__()
        self.backbone = backbone
        self.layer_tag = layer_tag
        self.provenance = provenance
        self.seed = seed
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: never leave eval mode
        return super().train(False)

    def forward(self, x):
        if self.normalize:
            if x.shape[1] == 1:
                x = x.expand(-1, 3, -1, -1)
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.backbone(x)

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        return cls(nn.Identity(), "identity", "identity")

    @classmethod
    def random_conv(cls, seed: int = 0, layer_tag: str = "conv4", in_channels: int = 3,
                    width: int = 16) -> "FeatureExtractor":
        """Small random conv net; ``layer_tag`` picks the pre-activation output of conv1..conv4."""
        depth = {"conv1": 1, "conv2": 2, "conv3": 3, "conv4": 4}.get(layer_tag)
        if depth is None:
            raise ConfigError(f"unknown layer_tag {layer_tag!r} for the random extractor")
        chans = [in_channels, width, width, 2 * width, 2 * width]
        layers: list[nn.Module] = []
        with torch.random.fork_rng(devices=[]):
            for k in range(depth):
                if k:
                    layers.append(nn.ReLU())
                layers.append(nn.Conv2d(chans[k], chans[k + 1], 3, stride=2 if k == 2 else 1, padding=1))
        backbone = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in backbone.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, generator=gen)
                    m.bias.zero_()
        return cls(backbone, layer_tag, "random-seeded", seed=seed)

    @classmethod
    def vgg19(cls, layer_tag: str = "conv5_4", weights_path: str | os.PathLike | None = None
              ) -> "FeatureExtractor":
        """Pretrained VGG19 features up to the pre-activation output of ``layer_tag``.

        Looks for the torchvision checkpoint file locally; never downloads.
        """
        from torchvision.models import vgg19

        index = _vgg19_layer_index(layer_tag)
        path = Path(weights_path) if weights_path else _find_vgg19_weights()
        if path is None or not path.is_file():
            raise FileNotFoundError("VGG19 weights not found locally")
        net = vgg19(weights=None)
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        backbone = nn.Sequential(*list(net.features.children())[: index + 1])
        return cls(backbone, layer_tag, "pretrained", normalize=True)


def _vgg19_layer_index(tag: str) -> int:
    blocks = [2, 2, 4, 4, 4]
    idx = 0
    for b, n_convs in enumerate(blocks, 1):
        for c in range(1, n_convs + 1):
            if tag == f"conv{b}_{c}":
                return idx
            idx += 2
        idx += 1  # max pool
    raise ConfigError(f"unknown VGG19 layer {tag!r}")


def _find_vgg19_weights() -> Path | None:
    name = "vgg19-dcbb9e9d.pth"
    candidates = []
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]) / name)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / name)
    return next((p for p in candidates if p.is_file()), None)


def default_extractor(seed: int = 0, prefer_pretrained: bool = True) -> FeatureExtractor:
    """Pretrained VGG19 if its weights are available locally, else a seeded random net."""
    if prefer_pretrained:
        try:
            return FeatureExtractor.vgg19()
        except FileNotFoundError:
            logger.info("VGG19 weights unavailable; using random-seeded extractor (seed=%d)", seed)
    return FeatureExtractor.random_conv(seed=seed)


# -- losses ------------------------------------------------------------------------


def _same_shape(a, b) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    if p.numel() == 0:
        raise DomainError("empty probability batch")
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise DomainError("probabilities must lie in [0, 1]")
    return p.clamp(EPS, 1.0 - EPS)


def content_l1(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    _same_shape(sr, hr)
    return (sr - hr).abs().mean()


def perceptual(sr: torch.Tensor, hr: torch.Tensor, extractor: nn.Module, norm: str = "L2") -> torch.Tensor:
    """Distance between embeddings: mean squared (``"L2"``) or mean absolute (``"L1"``)."""
    _same_shape(sr, hr)
    f_sr, f_hr = extractor(sr), extractor(hr)
    diff = f_sr - f_hr
    if norm == "L2":
        return (diff * diff).mean()
    if norm == "L1":
        return diff.abs().mean()
    raise ConfigError(f"norm must be 'L1' or 'L2', got {norm!r}")


def srgan_adv(d_prob_sr: torch.Tensor) -> torch.Tensor:
    return -torch.log(_clamp_prob(d_prob_sr)).mean()


def srgan_generator_loss(sr, hr, d_prob_sr, extractor) -> torch.Tensor:
    return perceptual(sr, hr, extractor, "L2") + SRGAN_ADV_WEIGHT * srgan_adv(d_prob_sr)


def gan_discriminator_loss(d_prob_real: torch.Tensor, d_prob_fake: torch.Tensor) -> torch.Tensor:
    real = _clamp_prob(d_prob_real)
    fake = _clamp_prob(d_prob_fake)
    return -torch.log(real).mean() - torch.log(1.0 - fake).mean()


def ragan_losses(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic-average GAN terms ``(gen_adv, disc)``.

    ``D(a, b) = sigmoid(C(a) - mean C(b))``. The discriminator wants real
    samples to look more real than the average fake and vice versa; the
    generator wants the opposite.
    """
    if logits_real.numel() == 0 or logits_fake.numel() == 0:
        raise DomainError("relativistic losses need non-empty batches")
    if not (torch.isfinite(logits_real).all() and torch.isfinite(logits_fake).all()):
        raise DomainError("logits must be finite")
    d_real = _clamp_prob(torch.sigmoid(logits_real - logits_fake.mean()))
    d_fake = _clamp_prob(torch.sigmoid(logits_fake - logits_real.mean()))
    disc = -torch.log(d_real).mean() - torch.log(1.0 - d_fake).mean()
    gen_adv = -torch.log(1.0 - d_real).mean() - torch.log(d_fake).mean()
    return gen_adv, disc


def esrgan_generator_loss(sr, hr, logits_real, logits_fake, extractor, w: LossWeights = LossWeights()
                          ) -> torch.Tensor:
    gen_adv, _ = ragan_losses(logits_real, logits_fake)
    return (
        w.lambda_perc * perceptual(sr, hr, extractor, "L1")
        + w.lambda_adv * gen_adv
        + w.lambda_cont * content_l1(sr, hr)
    )
