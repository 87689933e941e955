import hashlib
import json
import struct

import numpy as np
import pytest

from symtrack.checkpoint import (Checkpoint, IntegrityError, VersionError, checkpoint_from_model,
                                 load_checkpoint, save_checkpoint)
from symtrack.config import ModelConfig, to_dict
from symtrack.model import SymTracker


@pytest.fixture
def model():
    m = SymTracker(ModelConfig.micro(), np.random.default_rng(3))
    m.init_adaptation(np.random.default_rng(4))
    return m


def inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.random((2, cfg.template_size, cfg.template_size, 3)).astype(np.float32)
    x = rng.random((2, cfg.search_size, cfg.search_size, 3)).astype(np.float32)
    return z, x


def test_round_trip_bytes_identical(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "a.ckpt", {"steps": 3})
    blob = p.read_bytes()
    again = Checkpoint.load(p)
    assert again.to_bytes() == blob
    assert again.meta == {"steps": 3} and again.stage == "adapt"


def test_forward_bitwise_after_load(model, tmp_path):
    z, x = inputs(model.cfg)
    before, _ = model.forward(z, z, x, x)
    back = load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt"))
    after, _ = back.forward(z, z, x, x)
    for a, b in ((before.score, after.score), (before.offset, after.offset), (before.size, after.size)):
        assert a.data.tobytes() == b.data.tobytes()
    assert back.stage == model.stage
    assert {k for k, _ in back.trainable()} == {k for k, _ in model.trainable()}


def test_content_hash_is_stable(model):
    a = checkpoint_from_model(model).content_hash
    b = checkpoint_from_model(model).content_hash
    assert a == b and len(a) == 16


def test_format_matches_independent_encoder(model):
    """Rebuild the archive by hand from the documented layout."""
    ck = checkpoint_from_model(model, {"k": 1})
    dumps = lambda o: json.dumps(o, sort_keys=True, separators=(",", ":")).encode()  # noqa: E731
    table, payload, off = [], b"", 0
    for name in sorted(ck.tensors):
        raw = np.ascontiguousarray(ck.tensors[name], dtype="<f4").tobytes()
        table.append({"name": name, "dtype": "f32", "shape": list(ck.tensors[name].shape),
                      "offset": off, "nbytes": len(raw)})
        payload += raw
        off += len(raw)
    cfg = dumps({"model": to_dict(ck.model), "stage": ck.stage, "meta": {"k": 1}})
    tbl = dumps(table)
    body = (b"SYMT" + struct.pack("<I", 1) + struct.pack("<I", len(cfg)) + cfg + struct.pack("<I", len(tbl))
            + tbl + struct.pack("<Q", len(payload)) + payload)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    assert ck.to_bytes() == body + digest


def test_truncated_file_rejected(model, tmp_path):
    p = save_checkpoint(model, tmp_path / "t.ckpt")
    blob = p.read_bytes()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        p.write_bytes(blob[:cut])
        with pytest.raises(IntegrityError):
            Checkpoint.load(p)


def test_flipped_byte_rejected(model):
    blob = bytearray(checkpoint_from_model(model).to_bytes())
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(IntegrityError):
        Checkpoint.from_bytes(bytes(blob))


def test_version_mismatch_rejected(model):
    blob = bytearray(checkpoint_from_model(model).to_bytes())
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        Checkpoint.from_bytes(bytes(blob))


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        Checkpoint.load(tmp_path / "nope.ckpt")


def test_float64_round_trip(tmp_path):
    m = SymTracker(ModelConfig.micro(), np.random.default_rng(0), dtype=np.float64)
    back = load_checkpoint(save_checkpoint(m, tmp_path / "d.ckpt"))
    assert all(v.dtype == np.float64 for v in back.params.values())
    for k, v in m.params.items():
        assert v.data.tobytes() == back.params[k].data.tobytes()
