import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tsnodule.backbone import BackboneConfig
from tsnodule.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint,
                                 load_parameters, save_checkpoint)
from tsnodule.errors import (BadMagicError, DigestMismatchError, OverlappingOffsetsError, TruncatedPayloadError,
                             UnsupportedVersionError)
from tsnodule.model import HeadConfig, build_model, forward_pair


def tiny_model(seed):
    return build_model(BackboneConfig.tiny(), "Block4", HeadConfig(8), "two_stream", seed, input_extent=16)


def rewrite_manifest(data, edit):
    mlen = struct.unpack_from("<Q", data, 8)[0]
    manifest = json.loads(data[16:16 + mlen])
    edit(manifest)
    text = json.dumps(manifest).encode()
    return data[:8] + struct.pack("<Q", len(text)) + text + data[16 + mlen:]


def test_model_round_trip_gives_identical_logits(tmp_path):
    src = tiny_model(1)
    # perturb running stats so they are part of what must survive
    for k, v in src.parameters().items():
        if k.endswith("rmean"):
            v += 0.25
    digest = save_checkpoint(tmp_path / "m.nckp", src.parameters(), {"tap": "Block4"}, {"note": "x"})
    dst = tiny_model(2)
    report = load_parameters(dst.parameters(), tmp_path / "m.nckp")
    assert report.complete and not report.unexpected
    x = np.random.default_rng(0).random((2, 2, 1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(forward_pair(src, *x), forward_pair(dst, *x))
    ck = load_checkpoint(tmp_path / "m.nckp")
    assert ck.digest == digest and ck.config == {"tap": "Block4"} and ck.metadata == {"note": "x"}
    assert [e["name"] for e in inspect_checkpoint(tmp_path / "m.nckp")["tensors"]] == list(src.parameters())


def test_encoding_is_deterministic():
    p = tiny_model(3).parameters()
    assert encode_checkpoint(p, {"a": 1}) == encode_checkpoint(dict(p), {"a": 1})


@settings(max_examples=30, deadline=None)
@given(st.lists(arrays(np.float32, array_shapes(max_dims=3, max_side=4), elements=st.floats(-1e6, 1e6, width=32)),
                min_size=1, max_size=4))
def test_arbitrary_tensors_round_trip(tensors):
    named = {f"t{i}": t for i, t in enumerate(tensors)}
    back = decode_checkpoint(encode_checkpoint(named)).tensors
    assert all(np.array_equal(back[k], v) and back[k].shape == v.shape for k, v in named.items())


def test_corruptions_raise_distinct_errors():
    data = encode_checkpoint({"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4)})
    flipped = bytearray(data)
    flipped[-3] ^= 0x01
    with pytest.raises(DigestMismatchError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(MAGIC + struct.pack("<I", 2) + data[8:])
    with pytest.raises(TruncatedPayloadError):
        decode_checkpoint(data[:-4])

    def overlap(m):
        m["tensors"][1]["offset"] = 8
    with pytest.raises(OverlappingOffsetsError):
        decode_checkpoint(rewrite_manifest(data, overlap))


def test_non_finite_parameters_refused():
    with pytest.raises(ValueError, match="w"):
        encode_checkpoint({"w": np.array([1.0, np.nan])})


def test_backbone_only_checkpoint_into_model(tmp_path):
    src = tiny_model(4)
    save_checkpoint(tmp_path / "bb.nckp", src.backbone.params)
    dst = tiny_model(5)
    head_before = {k: v.copy() for k, v in dst.head.items()}
    report = load_parameters(dst.parameters(), tmp_path / "bb.nckp", strict=False)
    assert sorted(report.missing) == sorted(dst.head)
    assert all(np.array_equal(dst.backbone.params[k], v) for k, v in src.backbone.params.items())
    assert all(np.array_equal(dst.head[k], v) for k, v in head_before.items())
