"""TARC tensor archive: a text index followed by raw float payloads.

Layout (bytes, in order):
    b"TARC\n"
    b"<entry count>\n"
    one line per entry: b"<name> f32 <d0> <d1> ...\n"   (scalar: no dims)
    raw little-endian float32 payloads, concatenated in index order

Names are slash-separated identifiers ([A-Za-z0-9_.-] between slashes).
Reading preserves index order; writing a dict preserves its insertion order,
so round-trips are byte-identical.
"""

from __future__ import annotations

import re

import numpy as np

__all__ = ["ArchiveError", "write_archive", "read_archive"]

_MAGIC = b"TARC\n"
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+(/[A-Za-z0-9_.\-]+)*$")


class ArchiveError(ValueError):
    """Malformed archive content or invalid entries."""


def write_archive(path, entries):
    """entries: mapping name -> array convertible to float32 (no data loss is
    checked; callers store float32 state to begin with)."""
    arrays = []
    lines = [_MAGIC, f"{len(entries)}\n".encode("ascii")]
    for name, arr in entries.items():
        if not _NAME_RE.match(name):
            raise ArchiveError(f"invalid entry name {name!r}")
        a = np.asarray(arr)
        if a.dtype != np.float32:
            a = a.astype(np.float32)
        # note: tobytes() below serializes in C order, so no contiguity fixup
        # is needed; ascontiguousarray would silently turn 0-d into 1-d.
        dims = " ".join(str(d) for d in a.shape)
        line = f"{name} f32 {dims}".rstrip() + "\n"
        lines.append(line.encode("ascii"))
        arrays.append(a)
    with open(path, "wb") as fh:
        for line in lines:
            fh.write(line)
        for a in arrays:
            fh.write(a.astype("<f4", copy=False).tobytes())


def read_archive(path):
    """Returns an ordered dict name -> float32 ndarray."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ArchiveError("bad magic: not a TARC archive")
    pos = len(_MAGIC)

    def next_line(p):
        nl = blob.find(b"\n", p)
        if nl < 0:
            raise ArchiveError("truncated archive index")
        return blob[p:nl], nl + 1

    count_raw, pos = next_line(pos)
    try:
        count = int(count_raw.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ArchiveError(f"bad entry count line: {count_raw!r}") from exc
    if count < 0:
        raise ArchiveError("negative entry count")
    specs = []
    for k in range(count):
        raw, pos = next_line(pos)
        parts = raw.decode("ascii", errors="replace").split()
        if len(parts) < 2:
            raise ArchiveError(f"index line {k + 3}: too few fields: {raw!r}")
        name, dtype, dims = parts[0], parts[1], parts[2:]
        if not _NAME_RE.match(name):
            raise ArchiveError(f"index line {k + 3}: invalid name {name!r}")
        if dtype != "f32":
            raise ArchiveError(f"index line {k + 3}: unsupported dtype {dtype!r}")
        try:
            shape = tuple(int(d) for d in dims)
        except ValueError as exc:
            raise ArchiveError(f"index line {k + 3}: bad dims {dims}") from exc
        if any(d < 0 for d in shape):
            raise ArchiveError(f"index line {k + 3}: negative dim in {shape}")
        specs.append((name, shape))
    out = {}
    for name, shape in specs:
        if name in out:
            raise ArchiveError(f"duplicate entry name {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * 4
        if pos + nbytes > len(blob):
            raise ArchiveError(f"payload for {name!r} truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float32, copy=True)
        pos += nbytes
    if pos != len(blob):
        raise ArchiveError(f"{len(blob) - pos} trailing bytes after last payload")
    return out
