"""Checkpoint container.

Layout::

    b"SDCK" | uint32 header_len | header (UTF-8 JSON) | tensor payload

The header stores the format version, the full run config, step, seed, a
tensor index (name, shape, byte offset) and the SHA-256 of the payload.
Tensors are little-endian float32, concatenated in index order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_dict
from .data import _atomic_write
from .model import ZeroShotTTS
from .objectives import PatchDiscriminator

CHECKPOINT_VERSION = 1
MAGIC = b"SDCK"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    model: ZeroShotTTS
    discriminator: PatchDiscriminator | None = None
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def build_discriminator(cfg: RunConfig) -> PatchDiscriminator:
    return PatchDiscriminator(cfg.model.disc_channels, cfg.model.disc_layers)


def _tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in (("model.", ckpt.model), ("disc.", ckpt.discriminator)):
        if module is None:
            continue
        for name, t in module.state_dict().items():
            out[prefix + name] = t.detach().cpu().numpy().astype("<f4")
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    tensors = _tensors(ckpt)
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "extra": ckpt.extra,
        "tensors": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    _atomic_write(path, MAGIC + struct.pack("<I", len(hb)) + hb + payload)
    return path


def _read(path: Path):
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:4] != MAGIC or len(raw) < 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8 : 8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header (file truncated?)") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} not supported (expected {CHECKPOINT_VERSION})"
        )
    payload = raw[8 + n :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt payload)")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return header, tensors


def _load_module(module: torch.nn.Module, tensors: dict, prefix: str, path) -> None:
    own = module.state_dict()
    names = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    if names != set(own):
        missing = sorted(set(own) - names)[:3]
        unexpected = sorted(names - set(own))[:3]
        raise CheckpointError(f"{path}: incompatible model (missing {missing}, unexpected {unexpected})")
    state = {}
    for name, ref in own.items():
        arr = tensors[prefix + name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"{path}: incompatible model, {prefix}{name} has shape {arr.shape}, model expects {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(state)


def load_checkpoint(path: str | Path, model: ZeroShotTTS | None = None) -> Checkpoint:
    """Read a checkpoint.  If ``model`` is given, load into it (rejecting
    incompatible shapes) instead of rebuilding from the stored config."""
    path = Path(path)
    header, tensors = _read(path)
    cfg = from_dict(header["config"])
    if model is None:
        model = ZeroShotTTS(cfg.model)
    _load_module(model, tensors, "model.", path)
    disc = None
    if any(k.startswith("disc.") for k in tensors):
        disc = build_discriminator(cfg)
        _load_module(disc, tensors, "disc.", path)
    return Checkpoint(cfg, model, disc, header["step"], header["seed"], header.get("extra", {}))


def count_params(ckpt_or_module) -> int:
    """Trainable scalars of the acoustic model (frozen embedder and the
    training-only discriminator excluded)."""
    if isinstance(ckpt_or_module, (str, Path)):
        ckpt_or_module = load_checkpoint(ckpt_or_module)
    module = ckpt_or_module.model if isinstance(ckpt_or_module, Checkpoint) else ckpt_or_module
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
