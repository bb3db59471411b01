"""Binary checkpoint container for model and adapter parameters.

Layout: magic "PSPT" | u32 version | u64 header length | JSON header |
raw little-endian float32 buffers in header order. The JSON header holds
the model config, the vocabulary, free-form metadata, and the buffer
index (name + shape per buffer). Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .model import MicroLM, ModelConfig, Vocabulary
from .tensor import Tensor

MAGIC = b"PSPT"
VERSION = 1


@dataclass
class Checkpoint:
    buffers: dict[str, np.ndarray]
    config: ModelConfig | None = None
    vocab: Vocabulary | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint_file(path, buffers: dict[str, np.ndarray], *,
                         config: ModelConfig | None = None,
                         vocab: Vocabulary | None = None,
                         meta: dict | None = None) -> None:
    names = sorted(buffers)
    header = {
        "config": config.to_dict() if config is not None else None,
        "vocab": vocab.tokens if vocab is not None else None,
        "meta": meta or {},
        "buffers": [{"name": n, "shape": list(buffers[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for n in names:
            f.write(np.ascontiguousarray(buffers[n], dtype="<f4").tobytes())


def load_checkpoint_file(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + header_len > len(raw):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    offset = 16 + header_len
    buffers: dict[str, np.ndarray] = {}
    for entry in header["buffers"]:
        name, shape = entry["name"], tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated payload at buffer {name!r}")
        buffers[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes
    config = ModelConfig(**header["config"]) if header.get("config") else None
    vocab = Vocabulary(header["vocab"]) if header.get("vocab") is not None else None
    return Checkpoint(buffers=buffers, config=config, vocab=vocab, meta=header.get("meta", {}))


def save_model(model: MicroLM, path, meta: dict | None = None,
               extra_buffers: dict[str, np.ndarray] | None = None) -> None:
    buffers = {name: p.data for name, p in model.params.items()}
    if extra_buffers:
        buffers.update(extra_buffers)
    save_checkpoint_file(path, buffers, config=model.config, vocab=model.vocab, meta=meta)


def load_model(path) -> MicroLM:
    ckpt = load_checkpoint_file(path)
    if ckpt.config is None or ckpt.vocab is None:
        raise CheckpointError("checkpoint carries no model config/vocabulary")
    params = {
        name: Tensor(arr) for name, arr in ckpt.buffers.items() if not name.startswith("pspt.")
    }
    return MicroLM(ckpt.config, ckpt.vocab, params)
