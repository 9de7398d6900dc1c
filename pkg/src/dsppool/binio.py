"""Little-endian binary container helpers.

Every on-disk artifact uses the same framing: a 4-byte ASCII magic,
a u16 format version, then format-specific fields. All integers are
little-endian unsigned, all floats are little-endian f64.
"""

import struct

import numpy as np

from .errors import BadMagicError, TruncationError, VersionError

VERSION = 1


def write_header(fh, magic):
    assert len(magic) == 4
    fh.write(magic.encode("ascii"))
    fh.write(struct.pack("<H", VERSION))


def read_header(fh, magic):
    raw = fh.read(6)
    if len(raw) < 6:
        raise TruncationError(6, len(raw))
    if raw[:4] != magic.encode("ascii"):
        raise BadMagicError(
            "bad magic %r, expected %r" % (raw[:4].decode("latin1"), magic)
        )
    (version,) = struct.unpack("<H", raw[4:6])
    if version != VERSION:
        raise VersionError("unsupported version %d" % version)


def read_exact(fh, nbytes):
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise TruncationError(nbytes, len(raw))
    return raw


def write_u32(fh, value):
    fh.write(struct.pack("<I", value))


def read_u32(fh):
    return struct.unpack("<I", read_exact(fh, 4))[0]


def write_f64(fh, value):
    fh.write(struct.pack("<d", value))


def read_f64(fh):
    return struct.unpack("<d", read_exact(fh, 8))[0]


def write_matrix(fh, mat):
    """Row-major f64 payload, shape written by the caller."""
    fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def read_matrix(fh, rows, cols):
    raw = read_exact(fh, rows * cols * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
