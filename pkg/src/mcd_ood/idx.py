"""Reader/writer for the big-endian IDX format (MNIST-style image and label files).

Layout of an unsigned-byte file::

    [0:4]   magic 0x00000801 (1-D labels) or 0x00000803 (3-D images)
    [4:..]  one big-endian uint32 per dimension
    [...]   raw uint8 payload, row-major
"""

import gzip
import struct

import numpy as np

from .data import LabeledSet
from .errors import FormatError

MAGIC_LABELS = 0x00000801
MAGIC_IMAGES = 0x00000803


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic=None):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need 4 bytes of magic)")
    (magic,) = struct.unpack_from(">I", raw, 0)
    zero, dtype_code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0")
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x} at byte offset 0, expected 0x{expect_magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}, need {header_end}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header_end < size:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(raw)}, expected {header_end + size} bytes")
    if len(raw) - header_end > size:
        raise FormatError(f"{path}: {len(raw) - header_end - size} trailing bytes after offset {header_end + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError(f"only uint8 IDX payloads are supported, got {array.dtype}")
    magic = (0x08 << 8) | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes(order="C"))


def load_idx_images(images_path, labels_path):
    """Images scaled to [0, 1] with shape (n, 1, h, w), paired with their labels."""
    images = read_idx(images_path, MAGIC_IMAGES)
    labels = read_idx(labels_path, MAGIC_LABELS)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledSet(x, labels.astype(np.int64))
