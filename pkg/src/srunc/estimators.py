"""scikit-learn style wrapper around the training and sampling functions.

>>> est = SuperResolver(method="ensemble", n_members=3, n_blocks=2, base_channels=16)
>>> est.fit(lr_batch, hr_batch)                       # doctest: +SKIP
>>> mean, std = est.predict(lr_batch, return_std=True)  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import ConfigError, ShapeError
from .evaluation import psnr
from .imaging import NO_AUGMENT, AugmentConfig, TrainingPair
from .losses import FeatureExtractor, LossWeights, default_extractor
from .models import DiscriminatorConfig, GeneratorConfig
from .training import Recipe, TrainConfig, run_recipe, train_ensemble
from .uncertainty import aggregate_mean, aggregate_std, ensemble_sample, mc_dropout_sample, SampleStack
from .models import forward


def check_image_batch(X, name: str = "X", channels: int | None = None) -> np.ndarray:
    """Coerce to a finite ``(N, H, W, C)`` float batch with values in ``[0, 1]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeError(f"{name} must be an (N, H, W, C) batch, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ShapeError(f"{name} is empty")
    if channels is not None and X.shape[3] != channels:
        raise ShapeError(f"{name} has {X.shape[3]} channels, expected {channels}")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} must be finite and within [0, 1]")
    return X


def check_pairs(X, y, scale: int) -> tuple[np.ndarray, np.ndarray]:
    X = check_image_batch(X, "X")
    y = check_image_batch(y, "y", X.shape[3])
    if len(X) != len(y):
        raise ShapeError(f"X and y hold {len(X)} and {len(y)} images")
    if y.shape[1:3] != (scale * X.shape[1], scale * X.shape[2]):
        raise ShapeError(f"y images must be {scale}x the size of X images")
    return X, y


class SuperResolver(RegressorMixin, BaseEstimator):
    """GAN super-resolution with optional MC-Dropout or deep-ensemble uncertainty.

    Parameters mirror :class:`~srunc.models.GeneratorConfig` and
    :class:`~srunc.training.TrainConfig`; ``method`` selects ``"single"``,
    ``"mcd"`` (``n_samples`` stochastic passes) or ``"ensemble"``
    (``n_members`` independently seeded models).
    """

    def __init__(
        self,
        arch="esrgan",
        scale=4,
        base_channels=16,
        n_blocks=2,
        growth_channels=8,
        residual_scale=0.2,
        method="single",
        n_samples=10,
        n_members=5,
        dropout_count=None,
        dropout_p=0.1,
        std_mode="paper_eq7",
        pretrain_epochs=100,
        adversarial_epochs=0,
        lr0=1e-3,
        batch_size=8,
        augment=False,
        extractor=None,
        random_state=0,
    ):
        self.arch = arch
        self.scale = scale
        self.base_channels = base_channels
        self.n_blocks = n_blocks
        self.growth_channels = growth_channels
        self.residual_scale = residual_scale
        self.method = method
        self.n_samples = n_samples
        self.n_members = n_members
        self.dropout_count = dropout_count
        self.dropout_p = dropout_p
        self.std_mode = std_mode
        self.pretrain_epochs = pretrain_epochs
        self.adversarial_epochs = adversarial_epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.augment = augment
        self.extractor = extractor
        self.random_state = random_state

    def _recipe(self, n_channels: int, n_pairs: int) -> Recipe:
        if self.method not in ("single", "mcd", "ensemble"):
            raise ConfigError(f"unknown method {self.method!r}")
        drops = self.dropout_count
        if drops is None:
            drops = min(self.n_blocks, 4 if self.arch == "srgan" else 5) if self.method == "mcd" else 0
        gen = GeneratorConfig(
            arch=self.arch, scale=self.scale, in_channels=n_channels, base_channels=self.base_channels,
            n_blocks=self.n_blocks, growth_channels=self.growth_channels, residual_scale=self.residual_scale,
            dropout_count=drops, dropout_p=self.dropout_p,
        )
        relativistic = self.arch == "esrgan"
        disc = DiscriminatorConfig(base_channels=self.base_channels, n_stages=2, relativistic=relativistic,
                                   in_channels=n_channels)
        batch = min(self.batch_size, n_pairs)
        aug = AugmentConfig() if self.augment else NO_AUGMENT
        pre = TrainConfig(lr0=self.lr0, batch_size=batch, epochs=self.pretrain_epochs,
                          phase="psnr_pretrain", augment=aug) if self.pretrain_epochs else None
        adv = TrainConfig(lr0=self.lr0, batch_size=batch, epochs=self.adversarial_epochs,
                          augment=aug) if self.adversarial_epochs else None
        return Recipe(gen, disc, pre, adv, "esrgan" if relativistic else "srgan", LossWeights())

    def fit(self, X, y):
        X, y = check_pairs(X, y, self.scale)
        pairs = [TrainingPair(lr, hr, f"{i}") for i, (lr, hr) in enumerate(zip(X, y))]
        recipe = self._recipe(X.shape[3], len(pairs))
        extractor = self.extractor
        if extractor is None and recipe.adversarial is not None:
            extractor = (FeatureExtractor.random_conv(0, in_channels=X.shape[3]) if X.shape[3] != 3
                         else default_extractor())
        seed = int(self.random_state)
        if self.method == "ensemble":
            seeds = [seed + k for k in range(self.n_members)]
            self.checkpoints_ = train_ensemble(recipe, self.n_members, seeds, pairs, extractor)
        else:
            self.checkpoints_ = [run_recipe(recipe, pairs, seed, extractor)]
        self.generators_ = [c.generator for c in self.checkpoints_]
        self.n_channels_ = X.shape[3]
        return self

    def sample(self, lr: np.ndarray) -> SampleStack:
        """Sample stack for one ``(H, W, C)`` LR image."""
        check_is_fitted(self, "generators_")
        if self.method == "mcd":
            return mc_dropout_sample(self.generators_[0], lr, self.n_samples, int(self.random_state))
        if self.method == "ensemble":
            return ensemble_sample(self.generators_, lr)
        return SampleStack(forward(self.generators_[0], lr), "single")

    def predict(self, X, return_std: bool = False):
        check_is_fitted(self, "generators_")
        X = check_image_batch(X, "X", self.n_channels_)
        means, stds = [], []
        for lr in X:
            stack = self.sample(lr)
            means.append(aggregate_mean(stack))
            if return_std:
                stds.append(aggregate_std(stack, self.std_mode).sigma)
        if return_std:
            return np.stack(means), np.stack(stds)
        return np.stack(means)

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB) of the mean prediction against ``y``."""
        X, y = check_pairs(X, y, self.scale)
        pred = self.predict(X)
        scores = np.array([psnr(p, t) for p, t in zip(pred, y)])
        return float(np.average(scores, weights=sample_weight))
