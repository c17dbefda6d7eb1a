"""Image I/O, bicubic resampling and paired dataset preparation.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and float intensities in ``[0, 1]``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import ConfigError, ImageFormatError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 4
DEFAULT_HR_SIZE = 256
DEFAULT_LR_SIZE = 64
BICUBIC_A = -0.5

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate and coerce ``data`` to an ``(H, W, C)`` float64 image."""
    arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) image, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ShapeError(f"image must be non-empty, got shape {arr.shape}")
    if c not in (1, 3):
        raise ImageFormatError(f"unsupported channel count {c}")
    if not np.all(np.isfinite(arr)):
        raise ImageFormatError("image contains non-finite values")
    return arr


@dataclass(frozen=True)
class TrainingPair:
    lr: np.ndarray
    hr: np.ndarray
    source_id: str = ""

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]

    def check(self, scale: int = DEFAULT_SCALE) -> "TrainingPair":
        lh, lw = self.lr.shape[:2]
        hh, hw = self.hr.shape[:2]
        if (hh, hw) != (scale * lh, scale * lw):
            raise ShapeError(f"hr {hh}x{hw} is not {scale}x lr {lh}x{lw}")
        return self


# -- I/O ---------------------------------------------------------------------


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a raster file into an ``(H, W, C)`` float image in ``[0, 1]``.

    Raises ``OSError`` for missing or undecodable files and
    ``ImageFormatError`` for rasters that are neither grayscale nor RGB.
    """
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("L", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            elif mode in ("I;16", "I;16L", "I;16B"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                raise ImageFormatError(f"{path}: unsupported image mode {mode!r}")
    except (ImageFormatError, FileNotFoundError):
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return as_image(arr)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an image as 8-bit PNG (or whatever the suffix implies)."""
    img = as_image(img)
    data = to_uint8(img)
    if data.shape[2] == 1:
        out = Image.fromarray(data[:, :, 0], mode="L")
    else:
        out = Image.fromarray(data, mode="RGB")
    out.save(path)


def save_image16(gray: np.ndarray, path: str | os.PathLike) -> None:
    """Write a 2-D array in ``[0, 1]`` as a 16-bit grayscale PNG."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ShapeError("16-bit export expects a 2-D array")
    data = np.round(np.clip(gray, 0.0, 1.0) * 65535.0).astype("<u2")
    Image.fromarray(data).save(path)  # uint16 maps to I;16


# -- resampling ----------------------------------------------------------------


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix, edges clamped."""
    scale = n_in / n_out
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(np.int64)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        weight = cubic_kernel(centers - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), weight)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resize with clamped borders.

    Output sample ``o`` reads the source at ``(o + 0.5) * in / out - 0.5``.
    No anti-alias prefilter is applied when downsampling.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be >= 1, got {out_h}x{out_w}")
    img = as_image(img)
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = _resize_matrix(h, out_h)
    cols = _resize_matrix(w, out_w)
    out = np.einsum("oh,hwc,pw->opc", rows, img, cols)
    return np.clip(out, 0.0, 1.0)


# -- pairs and augmentation ----------------------------------------------------


def center_origin(shape: Sequence[int], size: int) -> tuple[int, int]:
    h, w = shape[0], shape[1]
    return (max(h - size, 0) // 2, max(w - size, 0) // 2)


def make_pair(
    hr_source: np.ndarray,
    crop_origin: tuple[int, int] = (0, 0),
    hr_size: int = DEFAULT_HR_SIZE,
    scale: int = DEFAULT_SCALE,
    source_id: str = "",
) -> TrainingPair:
    """Crop an ``hr_size`` square at ``crop_origin`` and derive its bicubic LR."""
    if hr_size % scale:
        raise ConfigError(f"hr_size {hr_size} is not divisible by scale {scale}")
    src = as_image(hr_source)
    r, c = crop_origin
    h, w, _ = src.shape
    if r < 0 or c < 0 or r + hr_size > h or c + hr_size > w:
        raise IndexError(
            f"crop {hr_size}x{hr_size} at ({r}, {c}) out of bounds for {h}x{w} source"
        )
    hr = src[r : r + hr_size, c : c + hr_size].copy()
    lr_size = hr_size // scale
    return TrainingPair(bicubic_resize(hr, lr_size, lr_size), hr, source_id)


@dataclass(frozen=True)
class AugmentConfig:
    """Probabilities for the paired geometric augmentations.

    ``crop_size`` is measured in LR pixels; ``None`` keeps the full pair.
    A rotation, when drawn, is uniform over 90, 180 and 270 degrees.
    """

    crop_size: int | None = None
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rotate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError("crop_size must be positive")


NO_AUGMENT = AugmentConfig(crop_size=None, p_hflip=0.0, p_vflip=0.0, p_rotate=0.0)


def _geometric(img: np.ndarray, hflip: bool, vflip: bool, quarter_turns: int) -> np.ndarray:
    if hflip:
        img = img[:, ::-1]
    if vflip:
        img = img[::-1, :]
    if quarter_turns:
        img = np.rot90(img, k=quarter_turns, axes=(0, 1))
    return np.ascontiguousarray(img)


def transform_pair(
    pair: TrainingPair,
    hflip: bool = False,
    vflip: bool = False,
    quarter_turns: int = 0,
    lr_crop: tuple[int, int, int] | None = None,
) -> TrainingPair:
    """Apply one fixed geometric transform to both halves of a pair.

    ``lr_crop`` is ``(row, col, size)`` on the LR grid; the HR crop is the
    same window scaled by the pair's factor.
    """
    lr, hr = pair.lr, pair.hr
    s = hr.shape[0] // lr.shape[0]
    if lr_crop is not None:
        r, c, size = lr_crop
        lr = lr[r : r + size, c : c + size]
        hr = hr[s * r : s * (r + size), s * c : s * (c + size)]
    return TrainingPair(
        _geometric(lr, hflip, vflip, quarter_turns),
        _geometric(hr, hflip, vflip, quarter_turns),
        pair.source_id,
    )


def augment_pair(
    pair: TrainingPair, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()
) -> TrainingPair:
    """Random crop, flips and quarter-turn rotation, shared by LR and HR."""
    lh, lw = pair.lr.shape[:2]
    lr_crop = None
    if cfg.crop_size is not None:
        size = cfg.crop_size
        if size > min(lh, lw):
            raise ConfigError(f"crop_size {size} exceeds LR size {lh}x{lw}")
        lr_crop = (int(rng.integers(0, lh - size + 1)), int(rng.integers(0, lw - size + 1)), size)
    hflip = bool(rng.random() < cfg.p_hflip)
    vflip = bool(rng.random() < cfg.p_vflip)
    turns = int(rng.integers(1, 4)) if rng.random() < cfg.p_rotate else 0
    if lh != lw and turns % 2 and lr_crop is None:
        turns = 0  # batching needs a fixed orientation for non-square pairs
    return transform_pair(pair, hflip, vflip, turns, lr_crop)


# -- manifests -------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Ordered list of ``(source_id, path, split)`` entries.

    Relative paths are resolved against ``root``.
    """

    entries: list[tuple[str, str, str]]
    scale: int = DEFAULT_SCALE
    hr_size: int = DEFAULT_HR_SIZE
    lr_size: int = DEFAULT_LR_SIZE
    root: Path | None = None
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.hr_size != self.scale * self.lr_size:
            raise ConfigError(
                f"hr_size {self.hr_size} != scale {self.scale} x lr_size {self.lr_size}"
            )
        ids = [e[0] for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ConfigError("duplicate source_id in manifest")

    def __len__(self) -> int:
        return len(self.entries)

    def path_of(self, entry: tuple[str, str, str]) -> Path:
        p = Path(entry[1])
        return p if p.is_absolute() or self.root is None else self.root / p

    def split(self, tag: str) -> "DatasetManifest":
        return DatasetManifest(
            [e for e in self.entries if e[2] == tag], self.scale, self.hr_size, self.lr_size, self.root
        )

    def to_text(self) -> str:
        lines = [f"# scale={self.scale} hr_size={self.hr_size} lr_size={self.lr_size}"]
        lines += ["\t".join(e) for e in self.entries]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        meta = {"scale": DEFAULT_SCALE, "hr_size": DEFAULT_HR_SIZE, "lr_size": DEFAULT_LR_SIZE}
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, value = tok.partition("=")
                    if key in meta:
                        meta[key] = int(value)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            entries.append(tuple(parts))
        return cls(entries, root=path.parent, **meta)


def scan_manifest(
    root: str | os.PathLike,
    scale: int = DEFAULT_SCALE,
    hr_size: int = DEFAULT_HR_SIZE,
    split: str = "train",
) -> DatasetManifest:
    """List every decodable image under ``root`` in lexicographic path order.

    Undecodable files and images smaller than ``hr_size`` are recorded in
    ``manifest.skipped`` rather than raising.
    """
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"not a readable directory: {root}")
    if hr_size % scale:
        raise ConfigError(f"hr_size {hr_size} is not divisible by scale {scale}")
    files = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    entries, skipped = [], []
    for rel in files:
        try:
            img = load_image(root / rel)
        except (OSError, ImageFormatError) as exc:
            logger.warning("skipping %s: %s", rel, exc)
            skipped.append((rel, str(exc)))
            continue
        if min(img.shape[:2]) < hr_size:
            skipped.append((rel, f"smaller than {hr_size}px"))
            continue
        entries.append((rel, rel, split))
    return DatasetManifest(entries, scale, hr_size, hr_size // scale, root, skipped)


def load_pairs(
    manifest: DatasetManifest, crop: str = "center", rng: np.random.Generator | None = None
) -> list[TrainingPair]:
    """Materialize one :class:`TrainingPair` per manifest entry.

    ``crop`` is ``"center"`` (reproducible evaluation default) or ``"random"``.
    """
    pairs = []
    for entry in manifest.entries:
        img = load_image(manifest.path_of(entry))
        if crop == "center":
            origin = center_origin(img.shape, manifest.hr_size)
        elif crop == "random":
            rng = rng if rng is not None else np.random.default_rng(0)
            origin = (
                int(rng.integers(0, img.shape[0] - manifest.hr_size + 1)),
                int(rng.integers(0, img.shape[1] - manifest.hr_size + 1)),
            )
        else:
            raise ConfigError(f"unknown crop policy {crop!r}")
        pairs.append(make_pair(img, origin, manifest.hr_size, manifest.scale, entry[0]))
    return pairs


def stack_pairs(pairs: Iterable[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    return np.stack([p.lr for p in pairs]), np.stack([p.hr for p in pairs])


def synthetic_images(n: int, size: int, seed: int = 0, channels: int = 3) -> list[np.ndarray]:
    """Smooth random test images: sums of a few random sinusoids."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        img = np.empty((size, size, channels))
        for c in range(channels):
            acc = np.zeros((size, size))
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * math.pi)
                acc += np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
            img[:, :, c] = 0.5 + acc / 6.0
        out.append(np.clip(img, 0.0, 1.0))
    return out
