"""Versioned binary container for checkpoints and feature dumps.

Byte layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"DPKWSBIN"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header: {"kind", "descriptor", "tensors": [{"name", "shape"}]}
    16+H    ...   tensors in header order, float64 little-endian, C order, no padding

A reader needs only the header to locate every tensor.
"""

import json
import struct

import numpy as np

MAGIC = b"DPKWSBIN"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, kind, descriptor, tensors):
    """Write ``tensors`` (an ordered mapping name -> array) to ``path``."""
    arrays = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in tensors.items()]
    header = {
        "kind": kind,
        "descriptor": descriptor,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.tobytes(order="C"))


def read_container(path, kind=None):
    """Return ``(descriptor, tensors)``; checks magic, version and ``kind``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected {kind!r}, found {header['kind']!r}")
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(data):
            raise ContainerError(f"{path}: truncated at tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n // 8,
                                               offset=offset).reshape(shape).astype(np.float64)
        offset += n
    return header["descriptor"], tensors
