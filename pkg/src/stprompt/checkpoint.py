"""Checkpoint serialization: a JSON manifest plus raw float64 payloads.

File layout: an 8-byte magic, an 8-byte little-endian manifest length, the
manifest JSON, then every array's raw little-endian float64 bytes
concatenated in manifest order. Loading verifies shapes against the
manifest, so a round trip restores forward outputs bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STPCKPT1"


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> str:
    lines = "".join(f"{k}={config[k]}\n" for k in sorted(config))
    return hashlib.sha256(lines.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Named float64 parameter arrays plus run metadata."""

    stage: str
    config: dict  # flat string map of the training configuration
    arrays: dict[str, np.ndarray]
    history: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.config)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(self.arrays)
        manifest = {
            "stage": self.stage,
            "config": self.config,
            "config_hash": self.hash,
            "arrays": [
                {"name": n, "shape": list(self.arrays[n].shape), "dtype": "float64"}
                for n in names
            ],
            "history": self.history,
            "meta": self.meta,
        }
        blob = json.dumps(manifest).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(self.arrays[n], dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"missing checkpoint: {path}")
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (length,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16 : 16 + length].decode())
        offset = 16 + length
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(raw):
                raise CheckpointError(f"truncated payload for array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(
                raw[offset:end], dtype="<f8"
            ).reshape(shape).copy()
            offset = end
        if offset != len(raw):
            raise CheckpointError("trailing bytes after declared arrays")
        return cls(
            stage=manifest["stage"],
            config=manifest["config"],
            arrays=arrays,
            history=manifest.get("history", {}),
            meta=manifest.get("meta", {}),
        )

    def require_shapes(self, expected: dict[str, tuple]):
        """Check that named arrays exist with the given shapes."""
        for name, shape in expected.items():
            if name not in self.arrays:
                raise CheckpointError(f"checkpoint missing array {name!r}")
            if tuple(self.arrays[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"array {name!r} has shape {self.arrays[name].shape}, "
                    f"config implies {tuple(shape)}"
                )
