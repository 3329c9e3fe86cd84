"""Little-endian binary container helpers.

Every model/feature file starts with a 4-byte magic and a u32 version.
Payload fields are written with explicit little-endian dtypes so files
are portable between platforms.
"""

import io
import struct

import numpy as np

from .errors import BadMagicError, FileFormatError, UnsupportedVersionError

FORMAT_VERSION = 1


class Writer:
    def __init__(self, fh, magic, version=FORMAT_VERSION):
        self.fh = fh
        fh.write(magic)
        self.u32(version)

    def u32(self, *values):
        self.fh.write(struct.pack("<%dI" % len(values), *values))

    def f32(self, value):
        self.fh.write(struct.pack("<f", value))

    def string(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.fh.write(raw)

    def array(self, arr, dtype="<f8"):
        self.fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


class Reader:
    def __init__(self, fh, magic, versions=(FORMAT_VERSION,)):
        self.fh = fh
        head = fh.read(4)
        if head != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {head!r}")
        (self.version,) = self.u32()
        if self.version not in versions:
            raise UnsupportedVersionError(
                f"{magic.decode()} version {self.version} not supported")

    def _read(self, n):
        raw = self.fh.read(n)
        if len(raw) != n:
            raise FileFormatError("truncated file")
        return raw

    def u32(self, count=1):
        return struct.unpack("<%dI" % count, self._read(4 * count))

    def f32(self):
        return struct.unpack("<f", self._read(4))[0]

    def string(self):
        (n,) = self.u32()
        return self._read(n).decode("utf-8")

    def array(self, shape, dtype="<f8"):
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        raw = self._read(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(np.float64).reshape(shape)

    def expect_eof(self):
        if self.fh.read(1):
            raise FileFormatError("trailing bytes after payload")


def dump_bytes(write_fn, obj):
    """Serialize `obj` with `write_fn(obj, fh)` into a bytes object."""
    buf = io.BytesIO()
    write_fn(obj, buf)
    return buf.getvalue()


def save(write_fn, obj, path):
    with open(path, "wb") as fh:
        write_fn(obj, fh)


def load(read_fn, path):
    with open(path, "rb") as fh:
        return read_fn(fh)
