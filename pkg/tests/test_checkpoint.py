import json
import struct

import numpy as np
import pytest

from pinfer.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from pinfer.errors import CheckpointError
from pinfer.nn import ConvBlockSpec, MLPSpec, ParamStore, init_conv_block, init_mlp, rng_stream


@pytest.fixture()
def store():
    s = ParamStore({"kind": "dynamics", "config_hash": "abc123",
                    "norm_stats": {"mean": [0.0, 0.5, 0.0], "std": [0.1, 0.2, 0.1]}})
    rng = rng_stream(0)
    init_mlp(s, MLPSpec("m", (3, 5, 2)), rng)
    init_conv_block(s, ConvBlockSpec("c", 1, 2), rng)
    return s


def _header(blob: bytes) -> dict:
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    return json.loads(blob[16:16 + hlen].decode("utf-8"))


def test_round_trip_is_byte_identical_after_first_save(store, tmp_path):
    path = save_checkpoint(store, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)
    assert encode_checkpoint(loaded) == path.read_bytes()
    assert loaded.names() == store.names()
    assert loaded.buffer_names() == store.buffer_names()
    for name, t in store.items():
        np.testing.assert_allclose(loaded[name].data, t.data, rtol=1e-6, atol=1e-7)


def test_metadata_survives(store):
    loaded = decode_checkpoint(encode_checkpoint(store))
    assert loaded.metadata["kind"] == "dynamics"
    assert loaded.metadata["config_hash"] == "abc123"
    assert loaded.metadata["norm_stats"]["std"] == [0.1, 0.2, 0.1]


def test_offsets_are_eight_byte_aligned(store):
    blob = encode_checkpoint(store)
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    assert hlen % 8 == 0
    assert all(rec["offset"] % 8 == 0 for rec in _header(blob)["tensors"])


def test_bad_magic(store):
    blob = b"NOTACKPT" + encode_checkpoint(store)[8:]
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob)


def test_truncated_payload(store):
    blob = encode_checkpoint(store)
    assert blob.startswith(MAGIC)
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-8])
