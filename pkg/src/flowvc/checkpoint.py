"""Binary model checkpoints.

Little-endian layout:

    magic   4 bytes  b"FVCK"
    version u32
    meta    u32 length + UTF-8 JSON (model/train configs, step, RNG state)
    count   u32 parameter records:
        name   u16 length + UTF-8
        ndim   u8, extents u32 each
        offset u64 into the payload (in float32 elements)
    payload raw float32 values

Loading rebuilds the model from the stored config and requires an exact
parameter-name match, so a round trip reproduces forward passes
bit-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig, TrainConfig, config_from_dict, config_to_dict
from .model import VoiceConversionModel

__all__ = ["CheckpointError", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"FVCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


def save_checkpoint(model: VoiceConversionModel, path, step: int = 0,
                    rng_state: dict | None = None,
                    train_config: TrainConfig | None = None) -> None:
    params = model.named_parameters()
    meta = {
        "model_config": config_to_dict(model.config),
        "train_config": config_to_dict(train_config) if train_config else None,
        "step": int(step),
        "rng_state": _encode_rng_state(rng_state),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    table = bytearray()
    payload = bytearray()
    offset = 0
    for name, p in params.items():
        data = np.ascontiguousarray(p.data, dtype="<f4")
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", data.ndim)
        for extent in data.shape:
            table += struct.pack("<I", extent)
        table += struct.pack("<Q", offset)
        payload += data.tobytes()
        offset += data.size

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        fh.write(table)
        fh.write(payload)


def _encode_rng_state(state):
    if state is None:
        return None
    return json.loads(json.dumps(state, default=int))


def _take(buf: bytes, pos: int, count: int, what: str):
    if pos + count > len(buf):
        raise CheckpointError(
            f"truncated checkpoint: expected {pos + count} bytes for {what}, "
            f"file has {len(buf)}"
        )
    return buf[pos : pos + count], pos + count


def load_checkpoint(path):
    """Rebuild the model from a checkpoint.

    Returns (model, meta) where meta carries step, rng_state, and the
    decoded train config (if stored).
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, pos = _take(buf, 0, 8, "header")
    magic, version = struct.unpack("<4sI", raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    raw, pos = _take(buf, pos, 4, "metadata length")
    (meta_len,) = struct.unpack("<I", raw)
    raw, pos = _take(buf, pos, meta_len, "metadata")
    meta = json.loads(raw.decode("utf-8"))
    raw, pos = _take(buf, pos, 4, "parameter count")
    (count,) = struct.unpack("<I", raw)

    table = []
    for _ in range(count):
        raw, pos = _take(buf, pos, 2, "parameter name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, name_len, "parameter name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 1, f"rank of {name}")
        (ndim,) = struct.unpack("<B", raw)
        raw, pos = _take(buf, pos, 4 * ndim, f"shape of {name}")
        shape = struct.unpack(f"<{ndim}I", raw) if ndim else ()
        raw, pos = _take(buf, pos, 8, f"offset of {name}")
        (offset,) = struct.unpack("<Q", raw)
        table.append((name, shape, offset))

    payload = buf[pos:]
    total_elems = sum(int(np.prod(shape)) if shape else 1 for _, shape, _ in table)
    expected_bytes = total_elems * 4
    if len(payload) < expected_bytes:
        raise CheckpointError(
            f"truncated checkpoint payload: expected {expected_bytes} bytes, "
            f"got {len(payload)}"
        )

    model_config = config_from_dict(ModelConfig, meta["model_config"])
    model = VoiceConversionModel(model_config)
    params = model.named_parameters()

    stored_names = {name for name, _, _ in table}
    unknown = sorted(stored_names - set(params))
    if unknown:
        raise CheckpointError(f"checkpoint holds unknown parameters: {unknown}")
    missing = sorted(set(params) - stored_names)
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")

    for name, shape, offset in table:
        target = params[name]
        if tuple(shape) != tuple(target.shape):
            raise CheckpointError(
                f"parameter {name} has shape {tuple(shape)} in file, "
                f"model expects {tuple(target.shape)}"
            )
        size = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(
            payload, dtype="<f4", count=size, offset=offset * 4
        ).reshape(shape)
        target.data = values.astype(target.data.dtype).copy()

    train_config = None
    if meta.get("train_config"):
        train_config = config_from_dict(TrainConfig, meta["train_config"])
    return model, {
        "step": meta.get("step", 0),
        "rng_state": meta.get("rng_state"),
        "train_config": train_config,
    }
