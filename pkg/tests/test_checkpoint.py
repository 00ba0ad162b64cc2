import json
import struct

import numpy as np
import pytest

from neuda import checkpoint as ck


def sample_tensors():
    rng = np.random.default_rng(12)
    return {
        "net/W0": rng.standard_normal((7, 5)).astype(np.float32),
        "net/b0": rng.standard_normal(5).astype(np.float32),
        "grid/offsets": rng.standard_normal((64, 3)),
        "render/log_s": np.array(1.2039728),
        "empty": np.zeros((0, 3)),
    }


def test_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "a.ckpt")
    tensors = sample_tensors()
    meta = {"iteration": 42, "bbox": [[-1, -1, -1], [1, 1, 1]]}
    ck.save_checkpoint(path, tensors, meta)
    loaded, meta2 = ck.load_checkpoint(path)
    assert meta2 == meta
    assert sorted(loaded) == sorted(tensors)
    for k, v in tensors.items():
        assert loaded[k].dtype == np.asarray(v).dtype
        assert loaded[k].shape == np.asarray(v).shape
        np.testing.assert_array_equal(loaded[k], v)


def test_save_load_save_byte_identical(tmp_path):
    p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
    ck.save_checkpoint(p1, sample_tensors(), {"iteration": 3})
    loaded, meta = ck.load_checkpoint(p1)
    ck.save_checkpoint(p2, loaded, meta)
    with open(p1, "rb") as a, open(p2, "rb") as b:
        assert a.read() == b.read()


def test_meta_optional(tmp_path):
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(path, {"x": np.zeros(3)})
    _, meta = ck.load_checkpoint(path)
    assert meta is None


def test_reserved_meta_name_rejected(tmp_path):
    with pytest.raises(ck.CheckpointError, match="reserved"):
        ck.save_checkpoint(str(tmp_path / "r.ckpt"),
                           {"__meta__": np.zeros(1)})


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ck.CheckpointError, match="dtype"):
        ck.save_checkpoint(str(tmp_path / "d.ckpt"),
                           {"x": np.zeros(3, dtype=np.int32)})


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    ck.save_checkpoint(path, {"x": np.zeros(3)})
    blob = bytearray(open(path, "rb").read())
    blob[:8] = b"NOTACKPT"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load_checkpoint(path)


def test_wrong_version_rejected(tmp_path):
    path = str(tmp_path / "v.ckpt")
    ck.save_checkpoint(path, {"x": np.zeros(3)})
    blob = bytearray(open(path, "rb").read())
    blob[8:12] = struct.pack("<I", 99)
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ck.CheckpointError, match="version 99"):
        ck.load_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    path = str(tmp_path / "t.ckpt")
    ck.save_checkpoint(path, {"x": np.arange(10, dtype=np.float64)})
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-8])
    with pytest.raises(ck.CheckpointError, match="payload"):
        ck.load_checkpoint(path)


def test_truncated_manifest_rejected(tmp_path):
    path = str(tmp_path / "tm.ckpt")
    ck.save_checkpoint(path, {"x": np.zeros(4)})
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:24])
    with pytest.raises(ck.CheckpointError, match="manifest"):
        ck.load_checkpoint(path)


def test_manifest_payload_length_disagreement(tmp_path):
    # shrink a tensor's shape in the manifest without touching the payload
    path = str(tmp_path / "mm.ckpt")
    ck.save_checkpoint(path, {"x": np.zeros(6)})
    blob = open(path, "rb").read()
    mlen = struct.unpack_from("<Q", blob, 12)[0]
    manifest = json.loads(blob[20:20 + mlen])
    manifest["x"]["shape"] = [5]
    mbytes = json.dumps(manifest, sort_keys=True,
                        separators=(",", ":")).encode()
    out = blob[:12] + struct.pack("<Q", len(mbytes)) + mbytes + blob[20 + mlen:]
    open(path, "wb").write(out)
    with pytest.raises(ck.CheckpointError, match="disagree"):
        ck.load_checkpoint(path)


def test_garbage_manifest_rejected(tmp_path):
    path = str(tmp_path / "g.ckpt")
    mbytes = b"{not json"
    blob = ck.MAGIC + struct.pack("<I", ck.VERSION) \
        + struct.pack("<Q", len(mbytes)) + mbytes
    open(path, "wb").write(blob)
    with pytest.raises(ck.CheckpointError, match="manifest"):
        ck.load_checkpoint(path)


def test_non_checkpoint_file_rejected(tmp_path):
    path = str(tmp_path / "x.bin")
    open(path, "wb").write(b"short")
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(path)
