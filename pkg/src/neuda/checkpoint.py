"""Binary checkpoint container.

Layout: 8-byte magic ``NEUDACKP``, little-endian u32 format version,
little-endian u64 manifest byte length, UTF-8 JSON manifest, raw payload.
The manifest maps tensor names to {dtype: f32|f64, shape, offset} with
offsets relative to the payload start; the reserved key ``__meta__``
carries JSON metadata (model config, iteration counter, bounding box)
that has no payload bytes.

Determinism: names are sorted, offsets assigned in that order, JSON keys
sorted — saving identical state twice yields byte-identical files.
"""

import json
import struct

import numpy as np

MAGIC = b"NEUDACKP"
VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    """Write named float32/float64 arrays plus a JSON-able meta dict."""
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        if name == "__meta__":
            raise CheckpointError("tensor name __meta__ is reserved")
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest[name] = {"dtype": code, "shape": list(arr.shape),
                          "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    if meta is not None:
        manifest["__meta__"] = meta
    mbytes = json.dumps(manifest, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    """-> (tensors dict, meta dict or None); validates structure fully."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = struct.unpack_from("<I", blob, 8)[0]
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {VERSION})")
    mlen = struct.unpack_from("<Q", blob, 12)[0]
    if 20 + mlen > len(blob):
        raise CheckpointError("truncated checkpoint: manifest exceeds file")
    try:
        manifest = json.loads(blob[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from e
    meta = manifest.pop("__meta__", None)
    payload = blob[20 + mlen:]

    expected = 0
    for name, desc in manifest.items():
        dt = _DTYPES.get(desc.get("dtype"))
        if dt is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code")
        expected += int(np.prod(desc["shape"], dtype=np.int64)) * dt.itemsize
    if expected != len(payload):
        raise CheckpointError(
            f"manifest/payload disagree: expected {expected} payload bytes, "
            f"file has {len(payload)}")

    tensors = {}
    for name, desc in manifest.items():
        dt = _DTYPES[desc["dtype"]]
        shape = tuple(desc["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = desc["offset"]
        if off < 0 or off + count * dt.itemsize > len(payload):
            raise CheckpointError(f"tensor {name!r}: offset out of range")
        tensors[name] = np.frombuffer(
            payload, dtype=dt, count=count, offset=off).reshape(shape).copy()
    return tensors, meta
