"""On-disk formats: checkpoints, raw sigma sidecars, colormap, overlays.

Checkpoint layout (all integers little-endian)::

    b"SRUNCKPT" | u32 version | u64 header length | header JSON | tensor blobs

The header is canonical JSON (sorted keys, no whitespace) holding the
architecture configs, dropout placement, provenance and a tensor table of
``name, dtype, shape, offset, nbytes``. Blobs are float32 in state-dict
order, so save -> load -> save is byte-identical.

Sigma sidecar layout: eight u32 header words ``(magic, version, H, W, C,
mode, M, reserved)`` followed by ``H*W*C`` float32 values in HWC order.
"""

from __future__ import annotations

import json
import os
import struct
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import ConfigError, SRUncError, ShapeError
from .models import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator
from .training import Checkpoint, TrainReport

CKPT_MAGIC = b"SRUNCKPT"
CKPT_VERSION = 1
SIGMA_MAGIC = int.from_bytes(b"SIGM", "little")
SIGMA_VERSION = 1
SIGMA_MODES = {"paper_eq7": 0, "sample_std": 1}


class CheckpointError(SRUncError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _tensor_table(prefix: str, module: torch.nn.Module, offset: int, blobs: list[bytes]) -> tuple[list, int]:
    table = []
    for name, t in module.state_dict().items():
        data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        table.append({"name": f"{prefix}.{name}", "dtype": "<f4", "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    return table, offset


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs: list[bytes] = []
    table, offset = _tensor_table("generator", ckpt.generator, 0, blobs)
    disc = None
    if ckpt.discriminator is not None:
        more, offset = _tensor_table("discriminator", ckpt.discriminator, offset, blobs)
        table += more
        disc = {"config": ckpt.discriminator.config.to_dict()}
    header = {
        "format_version": CKPT_VERSION,
        "generator": {"config": ckpt.generator.config.to_dict(),
                      "dropout_positions": list(ckpt.generator.dropout_positions)},
        "discriminator": disc,
        "provenance": {
            "phase": ckpt.phase,
            "epoch": ckpt.epoch,
            "seed": ckpt.seed,
            "seeds": ckpt.report.seeds,
            "loss_trace_digest": ckpt.report.digest(),
            "loss_trace": ckpt.report.records,
        },
        "tensors": table,
    }
    head = _canonical(header)
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _load_module(module: torch.nn.Module, prefix: str, table: list, payload: memoryview) -> None:
    state = {}
    for entry in table:
        if not entry["name"].startswith(prefix + "."):
            continue
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        state[entry["name"][len(prefix) + 1 :]] = torch.from_numpy(arr)
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the {prefix} architecture: {exc}") from exc


def load_checkpoint(path: str | os.PathLike, expect_generator: GeneratorConfig | None = None) -> Checkpoint:
    """Rebuild models from a checkpoint file.

    Raises :class:`CheckpointError` on a bad file or when ``expect_generator``
    differs from the stored architecture.
    """
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack_from("<IQ", data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(CKPT_MAGIC) + 12
    header = json.loads(data[start : start + head_len])
    payload = memoryview(data)[start + head_len :]
    gcfg = GeneratorConfig.from_dict(header["generator"]["config"])
    if expect_generator is not None and expect_generator != gcfg:
        raise CheckpointError(f"{path}: architecture mismatch: stored {gcfg}, expected {expect_generator}")
    gen = build_generator(gcfg, 0)
    _load_module(gen, "generator", header["tensors"], payload)
    if list(gen.dropout_positions) != header["generator"]["dropout_positions"]:
        raise CheckpointError(f"{path}: dropout placement differs from this version's layout")
    disc = None
    if header["discriminator"] is not None:
        disc = build_discriminator(DiscriminatorConfig.from_dict(header["discriminator"]["config"]), 0)
        _load_module(disc, "discriminator", header["tensors"], payload)
        disc.eval()
    prov = header["provenance"]
    gen.seed = prov["seed"]
    gen.eval()
    report = TrainReport(records=prov["loss_trace"], seeds=prov["seeds"])
    return Checkpoint(gen, disc, prov["phase"], prov["epoch"], prov["seed"], report)


# -- sigma sidecar ---------------------------------------------------------------


def write_sigma(sigma: np.ndarray, path: str | os.PathLike, mode: str = "paper_eq7", M: int = 1) -> None:
    sigma = np.asarray(sigma)
    if sigma.ndim == 2:
        sigma = sigma[:, :, None]
    if sigma.ndim != 3:
        raise ShapeError("sigma must be (H, W, C)")
    if mode not in SIGMA_MODES:
        raise ConfigError(f"unknown sigma mode {mode!r}")
    h, w, c = sigma.shape
    head = struct.pack("<8I", SIGMA_MAGIC, SIGMA_VERSION, h, w, c, SIGMA_MODES[mode], M, 0)
    Path(path).write_bytes(head + sigma.astype("<f4").tobytes())


def read_sigma(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < 32:
        raise CheckpointError(f"{path}: truncated sigma file")
    magic, version, h, w, c, mode, m, _ = struct.unpack_from("<8I", data)
    if magic != SIGMA_MAGIC or version != SIGMA_VERSION:
        raise CheckpointError(f"{path}: not a sigma sidecar")
    arr = np.frombuffer(data, dtype="<f4", offset=32)
    if arr.size != h * w * c:
        raise CheckpointError(f"{path}: payload size mismatch")
    modes = {v: k for k, v in SIGMA_MODES.items()}
    return arr.reshape(h, w, c).astype(np.float64), {"mode": modes.get(mode, "unknown"), "M": m}


def sigma_gray(sigma: np.ndarray) -> np.ndarray:
    """Channel-mean sigma linearly mapped from ``[0, max]`` to ``[0, 1]``."""
    gray = np.asarray(sigma, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    top = gray.max()
    return gray / top if top > 0 else np.zeros_like(gray)


# -- overlay rendering ---------------------------------------------------------


def colormap_table() -> np.ndarray:
    """The shipped 256 x 3 uint8 colormap."""
    text = resources.files("srunc.data").joinpath("viridis256.txt").read_text(encoding="utf-8")
    rows = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    table = np.array([[int(r[i : i + 2], 16) for i in (0, 2, 4)] for r in rows], dtype=np.uint8)
    if table.shape != (256, 3):
        raise CheckpointError("colormap table must have 256 entries")
    return table


def render_overlay(sr: np.ndarray, sigma: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped, max-normalized sigma over the SR image; returns uint8 RGB."""
    sr = np.asarray(sr, dtype=np.float64)
    if sr.ndim == 2:
        sr = sr[:, :, None]
    if sr.shape[2] == 1:
        sr = np.repeat(sr, 3, axis=2)
    gray = sigma_gray(sigma)
    if gray.shape != sr.shape[:2]:
        raise ShapeError(f"sigma {gray.shape} and image {sr.shape[:2]} differ")
    idx = np.round(gray * 255.0).astype(np.int64)
    color = colormap_table()[idx].astype(np.float64) / 255.0
    out = (1.0 - alpha) * np.clip(sr, 0.0, 1.0) + alpha * color
    return np.round(out * 255.0).astype(np.uint8)
