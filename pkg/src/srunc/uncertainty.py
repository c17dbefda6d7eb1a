"""Sampling stochastic / ensemble predictions and aggregating them.

Two standard-deviation conventions are exposed:

``paper_eq7``
    ``sqrt(sum_m (y_m - mu)^2 / M^2)``, i.e. the standard error of the mean.
``sample_std``
    ``sqrt(sum_m (y_m - mu)^2 / M)``, the population standard deviation.

They differ by exactly ``sqrt(M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import ConfigError, ShapeError
from .models import forward, has_dropout

STD_MODES = ("paper_eq7", "sample_std")
DEFAULT_MCD_SAMPLES = 10
DEFAULT_ENSEMBLE_SIZE = 5


@dataclass
class SampleStack:
    samples: np.ndarray
    source: str
    seed_record: list[int] = field(default_factory=list)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 3:
            s = s[..., None]
        if s.ndim != 4 or s.shape[0] < 1:
            raise ShapeError(f"expected an (M, H, W, C) stack, got {s.shape}")
        self.samples = np.clip(s, 0.0, 1.0)

    @property
    def M(self) -> int:
        return self.samples.shape[0]


@dataclass
class UncertaintyMap:
    sigma: np.ndarray
    mode: str

    @property
    def sigma_mean(self) -> float:
        return float(self.sigma.mean())


def sub_seed(seed: int, m: int) -> int:
    """Seed for sample ``m``: first word of ``numpy.random.SeedSequence([seed, m])``."""
    return int(np.random.SeedSequence([int(seed), int(m)]).generate_state(1)[0])


def mc_dropout_sample(gen, lr: np.ndarray, M: int = DEFAULT_MCD_SAMPLES, seed: int = 0) -> SampleStack:
    """``M`` forwards with dropout left on, sample ``m`` seeded by ``sub_seed(seed, m)``."""
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    seeds = [sub_seed(seed, m) for m in range(M)]
    out = []
    with torch.random.fork_rng(devices=[]):
        for s in seeds:
            torch.manual_seed(s)
            out.append(forward(gen, lr, dropout_active=True)[0])
    return SampleStack(np.stack(out), "mcd", seeds)


def ensemble_sample(members: Sequence, lr: np.ndarray) -> SampleStack:
    """One deterministic forward per member."""
    if len(members) < 1:
        raise ConfigError("ensemble needs at least one member")
    out = [forward(g, lr, dropout_active=False)[0] for g in members]
    if any(o.shape != out[0].shape for o in out):
        raise ShapeError("ensemble members produce different output shapes")
    return SampleStack(np.stack(out), "ensemble", [getattr(g, "seed", -1) for g in members])


def _sorted(stack: SampleStack) -> np.ndarray:
    # a fixed per-pixel order makes both reductions exactly permutation invariant
    return np.sort(stack.samples, axis=0)


def _mean(s: np.ndarray) -> np.ndarray:
    mu = s.mean(axis=0)
    flat = s[0] == s[-1]
    mu[flat] = s[0][flat]  # rounding in sum/M must not perturb constant pixels
    return mu


def aggregate_mean(stack: SampleStack) -> np.ndarray:
    return _mean(_sorted(stack))


def aggregate_std(stack: SampleStack, mode: str = "paper_eq7") -> UncertaintyMap:
    if mode not in STD_MODES:
        raise ConfigError(f"mode must be one of {STD_MODES}, got {mode!r}")
    s = _sorted(stack)
    sq = ((s - _mean(s)) ** 2).sum(axis=0)
    denom = stack.M ** 2 if mode == "paper_eq7" else stack.M
    return UncertaintyMap(np.sqrt(sq / denom), mode)


def predict_with_uncertainty(stack: SampleStack, mode: str = "paper_eq7") -> tuple[np.ndarray, UncertaintyMap]:
    return aggregate_mean(stack), aggregate_std(stack, mode)


def check_mcd_capable(gen) -> None:
    if not has_dropout(gen):
        raise ConfigError("MC-Dropout needs a generator with dropout layers (dropout_count > 0, p > 0)")
