import json
import struct

import numpy as np
import pytest

from src.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from src.exceptions import CheckpointError
from src.models import LossContext, Nonlinearity, init_model, model_forward


def assert_same_model(a, b):
    assert a.kind == b.kind and a.n == b.n and a.d == b.d and a.num_layers == b.num_layers
    assert list(a.named_blocks()) == list(b.named_blocks())
    for x, y in zip(a.named_blocks().values(), b.named_blocks().values()):
        assert np.array_equal(x.data, y.data)


@pytest.mark.parametrize("kwargs", [
    dict(kind="generic", n=4, d=3, layers=2, nonlinearity=Nonlinearity("soft_threshold", 0.1)),
    dict(kind="ut", n=4, d=5, layers=3, num_classes=3, eta=0.5, orientation="row"),
    dict(kind="dust", n=4, d=8, layers=2, shared_dictionary=True, lambda1=0.5, c=2.0),
    dict(kind="dust", n=4, d=8, layers=2),
])
def test_save_load(tmp_path, kwargs):
    params = init_model(seed=3, **kwargs)
    for tensor in params.named_blocks().values():
        tensor.data = tensor.data + 0.125
    path = save_checkpoint(tmp_path / "model.ckpt", params, {"model_tag": "constrained", "seed": 3})
    loaded, meta = load_checkpoint(path)
    assert_same_model(params, loaded)
    assert meta == {"model_tag": "constrained", "seed": 3}
    assert loaded.nonlinearity == params.nonlinearity
    assert loaded.orientation == params.orientation and loaded.eta == params.eta
    assert loaded.shared_dictionary == params.shared_dictionary
    if params.kind == "dust":
        assert loaded.layers[0].lambda1 == params.layers[0].lambda1
        assert loaded.layers[0].c == params.layers[0].c
        if params.shared_dictionary:
            assert loaded.layers[0].dictionary is loaded.layers[1].dictionary


def test_reevaluation_matches(tmp_path, rng):
    params = init_model("ut", 4, 4, 3, seed=1)
    X = rng.normal(size=(5, 4, 6))
    clean = rng.normal(size=(5, 4, 6))
    before = model_forward(X, params, LossContext("denoising", clean)).measured_losses()
    loaded, _ = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", params))
    after = model_forward(X, loaded, LossContext("denoising", clean)).measured_losses()
    np.testing.assert_allclose(after, before, atol=1e-12)


def test_layout(rng):
    params = init_model("generic", 2, 2, 1, seed=0)
    blob = encode_checkpoint(params, {"seed": 0})
    magic, version, length = struct.unpack_from("<8sII", blob)
    assert magic == MAGIC == b"UTRNCKPT"
    assert version == 1
    header = json.loads(blob[16:16 + length])
    assert [b["name"] for b in header["blocks"]] == ["layer0.Q", "layer0.K", "layer0.V", "layer0.W", "layer0.U"]
    assert len(blob) == 16 + length + 8 * 20
    first = np.frombuffer(blob, dtype="<f8", count=4, offset=16 + length).reshape(2, 2)
    np.testing.assert_array_equal(first, params.layers[0].Q.data)


def test_encoding_is_deterministic():
    a = encode_checkpoint(init_model("ut", 4, 3, 2, seed=9), {"b": 1, "a": 2})
    b = encode_checkpoint(init_model("ut", 4, 3, 2, seed=9), {"a": 2, "b": 1})
    assert a == b


def test_bad_magic():
    blob = bytearray(encode_checkpoint(init_model("ut", 4, 3, 1)))
    blob[:8] = b"NOTACKPT"
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(bytes(blob))


def test_unknown_version():
    blob = bytearray(encode_checkpoint(init_model("ut", 4, 3, 1)))
    struct.pack_into("<I", blob, 8, 2)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bytes(blob))


def test_truncated_and_trailing():
    blob = encode_checkpoint(init_model("ut", 4, 3, 1))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\0" * 8)
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:10])


def test_block_table_mismatch():
    blob = encode_checkpoint(init_model("ut", 4, 3, 1))
    _, _, length = struct.unpack_from("<8sII", blob)
    header = json.loads(blob[16:16 + length])
    header["blocks"][0]["shape"] = [4, 3]
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    forged = struct.pack("<8sII", MAGIC, 1, len(encoded)) + encoded + blob[16 + length:]
    with pytest.raises(CheckpointError, match="block table"):
        decode_checkpoint(forged)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
