import json
import struct

import numpy as np
import pytest

from dhce.checkpoint import MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from dhce.ehr import DiseaseVocabulary
from dhce.events import HashingEncoder
from dhce.model import DHCE, HyperParams, prepare_patient


@pytest.fixture(scope="module")
def ckpt(small_data):
    enc = HashingEncoder(16, seed=0)
    model = DHCE.create(len(small_data.vocabulary), 16, HyperParams(d=8), seed=4)
    rng = np.random.default_rng(0)
    for t in model.params.values():
        t.data = rng.normal(size=t.shape) / 3  # arbitrary bit patterns, not just the init grid
    return Checkpoint(model.hp, small_data.vocabulary, small_data.event_types, enc.describe(), model.params,
                      meta={"note": "fixture"})


def test_round_trip_bytes(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_round_trip_parameters(ckpt):
    back = from_bytes(to_bytes(ckpt))
    assert back.params.manifest() == ckpt.params.manifest()
    for name in ckpt.params:
        assert back.params[name].data.tobytes() == ckpt.params[name].data.tobytes()
    assert back.hyperparams == ckpt.hyperparams
    assert back.vocabulary == ckpt.vocabulary
    assert back.event_types == ckpt.event_types
    assert back.meta == {"note": "fixture"}


def test_forward_bit_exact(ckpt, small_data):
    enc = HashingEncoder(16, seed=0)
    back = from_bytes(to_bytes(ckpt))
    for p in small_data.patients[:4]:
        inputs = prepare_patient(p, small_data.vocabulary, enc)
        assert ckpt.model().predict_next(inputs).tobytes() == back.model().predict_next(inputs).tobytes()


def test_layout(ckpt):
    blob = to_bytes(ckpt)
    assert blob[:8] == b"DHCEv1\x00\x00"
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen])
    assert header["version"] == 1
    assert [n for n, _ in header["manifest"]] == list(ckpt.params.keys())
    first = header["manifest"][0][0]
    n = ckpt.params[first].data.size
    np.testing.assert_array_equal(np.frombuffer(blob, "<f8", n, 16 + hlen), ckpt.params[first].data.ravel())


def test_corrupt_magic(ckpt):
    blob = bytearray(to_bytes(ckpt))
    blob[0:4] = b"PK\x03\x04"
    with pytest.raises(CheckpointError, match="not a DHCE checkpoint"):
        from_bytes(bytes(blob))


def test_version_marker(ckpt):
    blob = b"DHCEv2\x00\x00" + to_bytes(ckpt)[8:]
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(blob)


def test_header_version_mismatch(ckpt):
    blob = to_bytes(ckpt)
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen])
    header["version"] = 7
    raw = json.dumps(header).encode()
    with pytest.raises(CheckpointError, match="version 7"):
        from_bytes(MAGIC + struct.pack("<Q", len(raw)) + raw + blob[16 + hlen :])


@pytest.mark.parametrize("cut", [3, 12, 40, -1])
def test_truncated_reports_offset(ckpt, cut):
    blob = to_bytes(ckpt)
    with pytest.raises(CheckpointError, match=r"truncated"):
        from_bytes(blob[:cut])


def test_truncated_parameter_names_offset(ckpt):
    blob = to_bytes(ckpt)
    with pytest.raises(CheckpointError, match=rf"offset {len(blob) - 5}"):
        from_bytes(blob[:-5])


def test_trailing_bytes(ckpt):
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(to_bytes(ckpt) + b"\x00")


def test_vocabulary_order_preserved():
    vocab = DiseaseVocabulary(("z", "a", "m"))
    model = DHCE.create(3, 8, HyperParams(d=2))
    back = from_bytes(to_bytes(Checkpoint(model.hp, vocab, (), {"kind": "hashing", "dim": 8, "seed": 0},
                                          model.params)))
    assert back.vocabulary.codes == ("z", "a", "m")
