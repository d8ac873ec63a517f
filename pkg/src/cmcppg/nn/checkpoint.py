"""CKPT1 checkpoint container.

Layout: magic ``CKPT1``, u32-LE JSON length, UTF-8 JSON (architecture spec
plus the ordered tensor table), then every tensor as f32-LE in table order.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from cmcppg.errors import FormatError
from cmcppg.nn.models import ArchSpec, build_model

MAGIC = b"CKPT1"


def dumps(model) -> bytes:
    arrays = model.state_arrays()
    header = {
        "arch": model.spec.to_json(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw: bytes):
    if raw[:5] != MAGIC:
        raise FormatError("not a CKPT1 file")
    (n,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + n].decode())
    model = build_model(ArchSpec.from_json(header["arch"]))
    pos = 9 + n
    arrays = []
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(t["shape"])
        arrays.append(a.astype(np.float32))
        pos += 4 * count
    if pos != len(raw):
        raise FormatError(f"trailing bytes in checkpoint ({len(raw) - pos})")
    model.load_state_arrays(arrays)
    # restored models are for inference; callers resuming training call .train()
    model.eval()
    return model


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
