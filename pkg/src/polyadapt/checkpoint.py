"""MLCK checkpoint files with a JSON sidecar.

Layout, little-endian: magic ``MLCK``, u32 version, u32 tensor count, then per
tensor u32 name length, UTF-8 name, u32 rank, u32 dims, float32 data. The
sidecar ``<name>.json`` next to the file holds the model config, the seed, the
sha256 of the file bytes and the parameter checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from polyadapt.errors import CheckpointError, ChecksumError, TruncatedError, VersionError

MAGIC = b"MLCK"
VERSION = 1


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_tensors(state: dict, version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not an MLCK file (magic {buf[:4]!r})")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, reader supports {VERSION}")
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float64)
        state[name] = data.reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last tensor")
    return state


def save_checkpoint(path, model, seed, extra=None, version: int = VERSION):
    """Write ``model`` to ``path`` and its sidecar; returns the sidecar dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = encode_tensors(model.state_dict(), version)
    side = {
        "format": "MLCK",
        "version": version,
        "config": model.config(),
        "seed": seed,
        "frozen": bool(model.frozen),
        "sha256": hashlib.sha256(buf).hexdigest(),
        "param_checksum": model.checksum(),
    }
    if extra:
        side.update(extra)
    path.write_bytes(buf)
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return side


def load_checkpoint(path):
    """Read and verify a checkpoint; returns (state dict, sidecar dict)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    side_p = sidecar_path(path)
    if not side_p.exists():
        raise CheckpointError(f"sidecar not found: {side_p}")
    buf = path.read_bytes()
    side = json.loads(side_p.read_text())
    state = decode_tensors(buf)
    digest = hashlib.sha256(buf).hexdigest()
    if digest != side.get("sha256"):
        raise ChecksumError(f"{path}: sha256 {digest[:12]} does not match sidecar "
                            f"{str(side.get('sha256'))[:12]}")
    return state, side


def build_model(config: dict, seed: int):
    """Instantiate an untrained model from a sidecar config."""
    from polyadapt.adapters import Adapter, AdapterDims
    from polyadapt.diffusion import Denoiser, DenoiserConfig
    from polyadapt.encoders import EncoderDims, ImageEncoder, TextEncoder

    kind = config.get("kind")
    if kind == "text_encoder":
        return TextEncoder(config["vocab"], seed, EncoderDims(**config["dims"]))
    if kind == "image_encoder":
        return ImageEncoder(seed, EncoderDims(**config["dims"]), config["patch"])
    if kind == "denoiser":
        cfg = {k: v for k, v in config.items() if k != "kind"}
        return Denoiser(seed, DenoiserConfig(**cfg))
    if kind == "adapter":
        return Adapter(config["variant"], seed, AdapterDims(**config["dims"]))
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_model(path):
    """Rebuild a model from its checkpoint; frozen state follows the sidecar."""
    state, side = load_checkpoint(path)
    model = build_model(side["config"], side["seed"])
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if model.checksum() != side["param_checksum"]:
        raise ChecksumError(f"{path}: parameter checksum differs from sidecar")
    if side.get("frozen"):
        model.freeze()
    return model
