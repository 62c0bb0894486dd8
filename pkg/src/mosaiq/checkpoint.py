"""Binary checkpoint archive.

Layout (little-endian)::

    b"MSQ1"
    u32 n, n bytes UTF-8 JSON  {"version", "config", "meta"}
    repeated until EOF:
        u32 n, n bytes UTF-8 parameter name
        u8 trainable
        u32 rank, rank * u32 extents
        prod(extents) * f32 values
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, SLUModel

MAGIC = b"MSQ1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    config: ModelConfig
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: SLUModel, meta: dict | None = None) -> "Checkpoint":
        params, trainable = {}, {}
        for name, p in model.named_parameters():
            params[name] = p.detach().to(torch.float32).numpy().copy()
            trainable[name] = bool(p.requires_grad)
        return cls(params, trainable, ModelConfig.from_dict(model.config.to_dict()), dict(meta or {}))

    def to_model(self) -> SLUModel:
        model = SLUModel(ModelConfig.from_dict(self.config.to_dict()))
        self.load_into(model)
        model.set_trainable(())
        return model

    @torch.no_grad()
    def load_into(self, model: SLUModel, prefixes: tuple[str, ...] | None = None):
        own = dict(model.named_parameters())
        for name, value in self.params.items():
            if prefixes is not None and not name.startswith(prefixes):
                continue
            if name not in own or tuple(own[name].shape) != value.shape:
                raise CheckpointError(f"parameter {name} does not fit the model")
            own[name].copy_(torch.from_numpy(value))

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        header = json.dumps({"version": self.version, "config": self.config.to_dict(), "meta": self.meta},
                            sort_keys=True).encode()
        out += struct.pack("<I", len(header)) + header
        for name, value in self.params.items():
            raw = name.encode()
            out += struct.pack("<I", len(raw)) + raw
            out += struct.pack("<B", int(self.trainable.get(name, False)))
            out += struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
            out += np.ascontiguousarray(value, dtype="<f4").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        pos = 4

        def take(n):
            nonlocal pos
            if pos + n > len(blob):
                raise CheckpointError("truncated checkpoint")
            chunk = blob[pos: pos + n]
            pos += n
            return chunk

        (n,) = struct.unpack("<I", take(4))
        header = json.loads(take(n).decode())
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        params, trainable = {}, {}
        while pos < len(blob):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode()
            (flag,) = struct.unpack("<B", take(1))
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
            trainable[name] = bool(flag)
        return cls(params, trainable, ModelConfig.from_dict(header["config"]), header.get("meta", {}))

    def save(self, path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def changed_names(a: Checkpoint, b: Checkpoint) -> set[str]:
    """Names whose bytes differ between two checkpoints of the same model."""
    if a.params.keys() != b.params.keys():
        raise CheckpointError("checkpoints hold different parameter names")
    out = set()
    for name, x in a.params.items():
        y = b.params[name]
        if x.shape != y.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        if x.tobytes() != y.tobytes():
            out.add(name)
    return out
