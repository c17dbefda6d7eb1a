"""Generator and discriminator networks for SRGAN / ESRGAN.

All networks are ``torch.nn.Module`` subclasses working on NCHW tensors.
Construction is deterministic: every weight is drawn from a private
``torch.Generator`` seeded by the caller, never from the global RNG.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ConfigError, ShapeError

GENERATOR_ARCHS = ("srgan", "esrgan")


@dataclass(frozen=True)
class GeneratorConfig:
    arch: str = "esrgan"
    scale: int = 4
    in_channels: int = 3
    base_channels: int = 64
    n_blocks: int = 16
    rdb_per_rrdb: int = 3
    convs_per_rdb: int = 5
    growth_channels: int = 32
    residual_scale: float = 0.2
    dropout_count: int = 0
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.arch not in GENERATOR_ARCHS:
            raise ConfigError(f"arch must be one of {GENERATOR_ARCHS}, got {self.arch!r}")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of 2, got {self.scale}")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        for name in ("base_channels", "n_blocks", "rdb_per_rrdb", "convs_per_rdb", "growth_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.convs_per_rdb < 2 and self.arch == "esrgan":
            raise ConfigError("convs_per_rdb must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0 <= self.dropout_count <= self.n_blocks:
            raise ConfigError("dropout_count must be between 0 and n_blocks")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    n_stages: int = 4
    relativistic: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigError("n_stages must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown discriminator keys: {sorted(unknown)}")
        return cls(**d)


def srgan_mcd_config(**overrides) -> GeneratorConfig:
    """SRGAN generator with four dropout layers at p = 0.1."""
    opts = dict(arch="srgan", dropout_count=4, dropout_p=0.1)
    opts.update(overrides)
    return GeneratorConfig(**opts)


def esrgan_mcd_config(**overrides) -> GeneratorConfig:
    """ESRGAN generator with five dropout layers at p = 0.1."""
    opts = dict(arch="esrgan", dropout_count=5, dropout_p=0.1)
    opts.update(overrides)
    return GeneratorConfig(**opts)


# -- primitives ------------------------------------------------------------------


def pixel_shuffle(x, r: int):
    """Sub-pixel rearrangement ``(..., C*r*r, H, W) -> (..., C, r*H, r*W)``.

    ``out[c, r*i + a, r*j + b] = in[c*r*r + a*r + b, i, j]``. Works on numpy
    arrays and torch tensors with any number of leading batch dimensions.
    """
    if r < 1:
        raise ShapeError("shuffle factor must be >= 1")
    *lead, ch, h, w = x.shape
    if ch % (r * r):
        raise ShapeError(f"channel count {ch} not divisible by {r * r}")
    c = ch // (r * r)
    n = len(lead)
    y = x.reshape(*lead, c, r, r, h, w)
    perm = (*range(n), n, n + 3, n + 1, n + 4, n + 2)
    y = y.permute(*perm) if isinstance(y, torch.Tensor) else y.transpose(perm)
    return y.reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(x, r: int):
    """Inverse of :func:`pixel_shuffle`."""
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    n = len(lead)
    y = x.reshape(*lead, c, h, r, w, r)
    perm = (*range(n), n, n + 2, n + 4, n + 1, n + 3)
    y = y.permute(*perm) if isinstance(y, torch.Tensor) else y.transpose(perm)
    return y.reshape(*lead, c * r * r, h, w)


class PixelShuffle(nn.Module):
    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)


class MCDropout(nn.Module):
    """Element-wise dropout that can stay on outside of training mode."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active = False

    def forward(self, x):
        if self.p == 0.0 or not (self.training or self.active):
            return x
        return F.dropout(x, self.p, training=True)

    def extra_repr(self) -> str:
        return f"p={self.p}"


def dropout_positions(n_blocks: int, count: int) -> list[int]:
    """Indices of the blocks followed by a dropout layer, evenly spaced and ending at the last block."""
    if count == 0:
        return []
    return sorted({-(-(k + 1) * n_blocks // count) - 1 for k in range(count)})


def _conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _init_weights(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                nn.init.kaiming_normal_(m.weight, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


# -- SRGAN -----------------------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, nf: int):
        super().__init__()
        self.conv1 = _conv(nf, nf)
        self.act = nn.PReLU(nf)
        self.conv2 = _conv(nf, nf)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class SRGANGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        nf = cfg.base_channels
        self.config = cfg
        self.dropout_positions = dropout_positions(cfg.n_blocks, cfg.dropout_count)
        self.head = nn.Sequential(_conv(cfg.in_channels, nf, 9), nn.PReLU(nf))
        body = []
        for i in range(cfg.n_blocks):
            body.append(ResidualBlock(nf))
            if i in self.dropout_positions:
                body.append(MCDropout(cfg.dropout_p))
        self.body = nn.Sequential(*body)
        self.trunk_conv = _conv(nf, nf)
        up = []
        for _ in range(int(math.log2(cfg.scale))):
            up += [_conv(nf, 4 * nf), PixelShuffle(2), nn.PReLU(nf)]
        self.upsample = nn.Sequential(*up)
        self.tail = _conv(nf, cfg.in_channels, 9)

    def forward(self, x):
        fea = self.head(x)
        fea = fea + self.trunk_conv(self.body(fea))
        return self.tail(self.upsample(fea))


# -- ESRGAN ----------------------------------------------------------------------


class ResidualDenseBlock(nn.Module):
    """Dense conv stack; conv ``k`` (1-based) sees ``nf + (k - 1) * gc`` channels."""

    def __init__(self, nf: int, gc: int, n_convs: int, beta: float):
        super().__init__()
        self.beta = beta
        self.convs = nn.ModuleList(
            _conv(nf + k * gc, gc if k < n_convs - 1 else nf) for k in range(n_convs)
        )

    def forward(self, x):
        feats = [x]
        for conv in self.convs[:-1]:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), 0.2))
        return x + self.beta * self.convs[-1](torch.cat(feats, 1))


class RRDB(nn.Module):
    def __init__(self, nf: int, gc: int, n_rdb: int, n_convs: int, beta: float):
        super().__init__()
        self.beta = beta
        self.rdbs = nn.Sequential(*(ResidualDenseBlock(nf, gc, n_convs, beta) for _ in range(n_rdb)))

    def forward(self, x):
        return x + self.beta * self.rdbs(x)


class ESRGANGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        nf = cfg.base_channels
        self.config = cfg
        self.dropout_positions = dropout_positions(cfg.n_blocks, cfg.dropout_count)
        self.conv_first = _conv(cfg.in_channels, nf)
        body = []
        for i in range(cfg.n_blocks):
            body.append(
                RRDB(nf, cfg.growth_channels, cfg.rdb_per_rrdb, cfg.convs_per_rdb, cfg.residual_scale)
            )
            if i in self.dropout_positions:
                body.append(MCDropout(cfg.dropout_p))
        self.body = nn.Sequential(*body)
        self.trunk_conv = _conv(nf, nf)
        up = []
        for _ in range(int(math.log2(cfg.scale))):
            up += [_conv(nf, 4 * nf), PixelShuffle(2), nn.LeakyReLU(0.2)]
        self.upsample = nn.Sequential(*up)
        self.conv_hr = _conv(nf, nf)
        self.conv_last = _conv(nf, cfg.in_channels)

    def forward(self, x):
        fea = self.conv_first(x)
        fea = fea + self.trunk_conv(self.body(fea))
        out = self.upsample(fea)
        return self.conv_last(F.leaky_relu(self.conv_hr(out), 0.2))


# -- discriminator ---------------------------------------------------------------


def stage_channels(cfg: DiscriminatorConfig) -> list[int]:
    return [cfg.base_channels * 2 ** min(k, 3) for k in range(cfg.n_stages)]


def discriminator_grid(h: int, w: int, n_stages: int) -> tuple[int, int]:
    """Spatial size of the last feature map; each stage halves (ceil) once."""
    for _ in range(n_stages):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


class Discriminator(nn.Module):
    """Strided-conv classifier.

    Emits a probability per image, or an unbounded logit when
    ``cfg.relativistic`` is set (the relativistic comparison lives in the losses).
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.config = cfg
        layers = [_conv(cfg.in_channels, cfg.base_channels), nn.LeakyReLU(0.2)]
        prev = cfg.base_channels
        for ch in stage_channels(cfg):
            layers += [_conv(prev, ch), nn.LeakyReLU(0.2), _conv(ch, ch, stride=2), nn.LeakyReLU(0.2)]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(prev, 2 * prev), nn.LeakyReLU(0.2), nn.Linear(2 * prev, 1))

    def logits(self, x):
        fea = self.features(x).mean(dim=(2, 3))
        return self.head(fea).squeeze(1)

    def forward(self, x):
        out = self.logits(x)
        return out if self.config.relativistic else torch.sigmoid(out)


# -- builders --------------------------------------------------------------------


def _seeded(cls, cfg, seed: int) -> nn.Module:
    # construction runs torch's default init; keep it off the global RNG
    with torch.random.fork_rng(devices=[]):
        model = cls(cfg)
    _init_weights(model, seed)
    model.seed = int(seed)
    return model


def build_srgan_generator(cfg: GeneratorConfig, seed: int = 0) -> SRGANGenerator:
    if cfg.arch != "srgan":
        cfg = GeneratorConfig(**{**cfg.to_dict(), "arch": "srgan"})
    return _seeded(SRGANGenerator, cfg, seed)


def build_esrgan_generator(cfg: GeneratorConfig, seed: int = 0) -> ESRGANGenerator:
    if cfg.arch != "esrgan":
        cfg = GeneratorConfig(**{**cfg.to_dict(), "arch": "esrgan"})
    return _seeded(ESRGANGenerator, cfg, seed)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> nn.Module:
    return (build_srgan_generator if cfg.arch == "srgan" else build_esrgan_generator)(cfg, seed)


def build_srgan_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    if cfg.relativistic:
        raise ConfigError("the SRGAN discriminator is not relativistic")
    return _seeded(Discriminator, cfg, seed)


def build_esrgan_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    if not cfg.relativistic:
        raise ConfigError("the ESRGAN discriminator requires relativistic=True")
    return _seeded(Discriminator, cfg, seed)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return (build_esrgan_discriminator if cfg.relativistic else build_srgan_discriminator)(cfg, seed)


def is_generator(model: nn.Module) -> bool:
    return isinstance(model, (SRGANGenerator, ESRGANGenerator))


def set_dropout(model: nn.Module, active: bool) -> None:
    for m in model.modules():
        if isinstance(m, MCDropout):
            m.active = active


def has_dropout(model: nn.Module) -> bool:
    return any(isinstance(m, MCDropout) and m.p > 0 for m in model.modules())


# -- closed-form parameter counts -------------------------------------------------


def _conv_params(cin: int, cout: int, k: int = 3) -> int:
    return k * k * cin * cout + cout


def count_generator_params(cfg: GeneratorConfig) -> int:
    nf, c = cfg.base_channels, cfg.in_channels
    stages = int(math.log2(cfg.scale))
    if cfg.arch == "srgan":
        block = 2 * _conv_params(nf, nf) + nf
        return (
            _conv_params(c, nf, 9) + nf
            + cfg.n_blocks * block
            + _conv_params(nf, nf)
            + stages * (_conv_params(nf, 4 * nf) + nf)
            + _conv_params(nf, c, 9)
        )
    gc, k = cfg.growth_channels, cfg.convs_per_rdb
    rdb = sum(_conv_params(nf + i * gc, gc) for i in range(k - 1)) + _conv_params(nf + (k - 1) * gc, nf)
    return (
        _conv_params(c, nf)
        + cfg.n_blocks * cfg.rdb_per_rrdb * rdb
        + _conv_params(nf, nf)
        + stages * _conv_params(nf, 4 * nf)
        + _conv_params(nf, nf)
        + _conv_params(nf, c)
    )


def count_discriminator_params(cfg: DiscriminatorConfig) -> int:
    total = _conv_params(cfg.in_channels, cfg.base_channels)
    prev = cfg.base_channels
    for ch in stage_channels(cfg):
        total += _conv_params(prev, ch) + _conv_params(ch, ch)
        prev = ch
    return total + (prev * 2 * prev + 2 * prev) + (2 * prev + 1)


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- numpy-facing forward ---------------------------------------------------------


def to_tensor(batch) -> torch.Tensor:
    """NHWC numpy batch (or single HWC image) to an NCHW float32 tensor."""
    arr = np.asarray(batch, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected an NHWC batch, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def from_tensor(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def forward(model: nn.Module, batch, dropout_active: bool = False, clamp: bool = True) -> np.ndarray:
    """Inference forward on an NHWC numpy batch.

    Generators return an NHWC batch ``scale`` times larger (clamped to
    ``[0, 1]`` unless ``clamp=False``); discriminators return one value per
    image. Dropout layers are stochastic only when ``dropout_active``.
    """
    x = to_tensor(batch)
    cfg = model.config
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"model expects {cfg.in_channels} channels, got {x.shape[1]}")
    was_training = model.training
    model.eval()
    set_dropout(model, dropout_active)
    try:
        with torch.no_grad():
            out = model(x)
    finally:
        set_dropout(model, False)
        model.train(was_training)
    if is_generator(model):
        if clamp:
            out = out.clamp(0.0, 1.0)
        return from_tensor(out).astype(np.float64)
    return out.numpy().astype(np.float64)
