"""Named-tensor archive (``GDCKPT1``).

Layout, all text ASCII with ``\\n`` line ends::

    GDCKPT1
    <entry count>
    then per entry:
    <name>
    <dim0> <dim1> ...        (empty line for a scalar)
    <prod(dims) little-endian float64 values, row-major>
"""
from __future__ import annotations

import io
from collections import OrderedDict

import numpy as np

MAGIC = b"GDCKPT1\n"


class CheckpointError(ValueError):
    pass


def dumps(tensors) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(f"{len(tensors)}\n".encode("ascii"))
    for name, arr in tensors.items():
        if "\n" in name:
            raise CheckpointError(f"tensor name {name!r} contains a newline")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(name.encode("ascii") + b"\n")
        buf.write(" ".join(str(d) for d in arr.shape).encode("ascii") + b"\n")
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a GDCKPT1 archive")
    pos = len(MAGIC)

    def line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated archive")
        try:
            out = blob[pos:end].decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError("non-ASCII header line") from None
        pos = end + 1
        return out

    try:
        count = int(line())
    except ValueError:
        raise CheckpointError("bad entry count line") from None
    out = OrderedDict()
    for _ in range(count):
        name = line()
        try:
            shape = tuple(int(d) for d in line().split())
        except ValueError:
            raise CheckpointError(f"bad shape line for {name!r}") from None
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated data for {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path, tensors) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return loads(fh.read())
