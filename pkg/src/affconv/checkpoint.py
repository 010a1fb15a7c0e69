"""Parameter checkpoint format: a text manifest of name -> shape followed by
the concatenated little-endian float64 payloads in manifest order."""

from __future__ import annotations

import numpy as np

MAGIC = "affckpt 1"


def save_checkpoint(path, named: dict) -> None:
    names = list(named)
    for name in names:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
    with open(path, "wb") as fh:
        lines = [f"{MAGIC} {len(names)}"]
        for name in names:
            arr = np.asarray(named[name])
            dims = " ".join(str(d) for d in arr.shape)
            lines.append(f"{name} {arr.ndim} {dims}".rstrip())
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in names:
            arr = np.asarray(named[name], dtype=np.float64)
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    header_end = 0
    first = data.index(b"\n")
    head = data[:first].decode("ascii").rsplit(" ", 1)
    if head[0] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    count = int(head[1])
    pos = first + 1
    entries = []
    for _ in range(count):
        nl = data.index(b"\n", pos)
        parts = data[pos:nl].decode("ascii").split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(d) for d in parts[2:2 + ndim])
        entries.append((name, shape))
        pos = nl + 1
    header_end = pos
    out = {}
    offset = header_end
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
        offset += n * 8
    return out
