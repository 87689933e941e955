"""Binary checkpoint archive.

Layout (all integers little-endian)::

    b"SYMT" | u32 version | u32 n | n bytes config JSON
           | u32 m | m bytes tensor-table JSON | u64 p | p bytes payload
           | u64 blake2b-64 of everything before it

The tensor table lists ``name, dtype, shape, offset, nbytes`` in sorted name
order; the payload concatenates the raw little-endian buffers in that order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, parse_model_config, to_dict

MAGIC = b"SYMT"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


class IntegrityError(CheckpointError):
    """Truncated file, bad magic or hash mismatch."""


class VersionError(CheckpointError):
    """Checkpoint written by an unknown format version."""


def _digest(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Checkpoint:
    model: ModelConfig
    stage: str
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            if le.dtype not in _NAMES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            buf = np.ascontiguousarray(le).tobytes()
            table.append({"name": name, "dtype": _NAMES[le.dtype], "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(buf)})
            chunks.append(buf)
            offset += len(buf)
        config = _dumps({"model": to_dict(self.model), "stage": self.stage, "meta": self.meta})
        tbl = _dumps(table)
        payload = b"".join(chunks)
        body = b"".join([
            MAGIC, struct.pack("<I", VERSION),
            struct.pack("<I", len(config)), config,
            struct.pack("<I", len(tbl)), tbl,
            struct.pack("<Q", len(payload)), payload,
        ])
        return body + struct.pack("<Q", _digest(body))

    @property
    def content_hash(self) -> str:
        return f"{_digest(self.to_bytes()[:-8]):016x}"

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 24 or blob[:4] != MAGIC:
            raise IntegrityError("not a checkpoint (bad magic or too short)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
        if _digest(body) != stored:
            raise IntegrityError("content hash mismatch (corrupt or truncated file)")
        try:
            pos = 8
            (n,) = struct.unpack_from("<I", blob, pos)
            config = json.loads(blob[pos + 4:pos + 4 + n])
            pos += 4 + n
            (m,) = struct.unpack_from("<I", blob, pos)
            table = json.loads(blob[pos + 4:pos + 4 + m])
            pos += 4 + m
            (p,) = struct.unpack_from("<Q", blob, pos)
            payload = blob[pos + 8:pos + 8 + p]
            if len(payload) != p or pos + 8 + p != len(body):
                raise IntegrityError("payload length disagrees with header")
            tensors = {}
            for rec in table:
                raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
                arr = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]).reshape(rec["shape"])
                tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        except (struct.error, ValueError, KeyError) as exc:
            raise IntegrityError(f"malformed checkpoint: {exc}") from None
        return cls(parse_model_config(config["model"]), config["stage"], tensors, config["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(model, path, meta: dict | None = None) -> Path:
    return checkpoint_from_model(model, meta).save(path)


def load_checkpoint(path):
    return model_from_checkpoint(Checkpoint.load(path))


def checkpoint_from_model(model, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(model.cfg, model.stage, dict(model.state_arrays()), dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint):
    from .model import SymTracker

    model = SymTracker(ckpt.model)
    model.stage = ckpt.stage
    model.load_arrays(ckpt.tensors)
    return model
