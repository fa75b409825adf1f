"""Binary checkpoint: JSON header followed by length-prefixed little-endian float64 tensors.

Layout::

    b"MCDCKPT\\n"                    8-byte magic
    uint64 LE                        header length in bytes
    header                           UTF-8 JSON (sorted keys)
    for each tensor in header order:
        uint64 LE                    payload length in bytes
        float64 LE * n               row-major values
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .model import TwoHeadConfig, init_model

MAGIC = b"MCDCKPT\n"
FORMAT_VERSION = 1
PHASES = ("pretrained", "finetuned")


def save_checkpoint(path, model, phase, seeds=None):
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    named = model.named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "model_config": model.config.to_dict(),
        "seeds": seeds or {},
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in named],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in named:
            payload = t.data.astype("<f8").tobytes(order="C")
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path):
    """Return ``(model, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header length at byte offset 8")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + hlen
    if len(raw) < pos:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    try:
        header = json.loads(raw[16:pos])
    except ValueError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    if header.get("phase") not in PHASES:
        raise FormatError(f"{path}: unknown phase {header.get('phase')!r}")
    model = init_model(TwoHeadConfig.from_dict(header["model_config"]))
    state = {}
    for spec in header["tensors"]:
        if len(raw) < pos + 8:
            raise FormatError(f"{path}: truncated length prefix for {spec['name']} at byte offset {pos}")
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        expected = 8 * int(np.prod(spec["shape"], dtype=np.int64))
        if nbytes != expected or len(raw) < pos + nbytes:
            raise FormatError(f"{path}: tensor {spec['name']} payload mismatch at byte offset {pos}")
        state[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(spec["shape"])
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after offset {pos}")
    model.load_state(state)
    return model, header
