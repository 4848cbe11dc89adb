"""On-disk formats: point clouds, positional maps, manifests, config files.

Everything here is deterministic byte-for-byte: float fields are written with
numpy's shortest round-trip repr for float32, dict/list order is preserved,
and no timestamps or machine state leak into the output.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FormatError", "read_ply", "write_ply", "read_pmap", "write_pmap",
    "Manifest", "read_manifest", "write_manifest",
    "parse_config", "format_config",
]

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz")
_PMAP_MAGIC = b"PMAP\n"


class FormatError(ValueError):
    """Malformed file content, with a line number where one applies."""


def _f32_str(v):
    return str(np.float32(v))


# --- point clouds (ASCII ply, positions + unit normals) ---------------------


def write_ply(path, points, normals):
    points = np.asarray(points, dtype=np.float32)
    normals = np.asarray(normals, dtype=np.float32)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape != normals.shape:
        raise FormatError(
            f"expected matching (N, 3) arrays, got {points.shape} and {normals.shape}")
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    buf.write(f"element vertex {len(points)}\n")
    for p in _PLY_PROPS:
        buf.write(f"property float {p}\n")
    buf.write("end_header\n")
    for row in np.hstack([points, normals]):
        buf.write(" ".join(_f32_str(v) for v in row))
        buf.write("\n")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(buf.getvalue())


def read_ply(path):
    """Returns (points (N,3) float32, normals (N,3) float32)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    ln = 0

    def take():
        nonlocal ln
        if ln >= len(lines):
            raise FormatError(f"{path}: truncated header at line {ln + 1}")
        ln += 1
        return lines[ln - 1]

    if take().strip() != "ply":
        raise FormatError(f"{path}: line 1: not a ply file")
    if take().strip() != "format ascii 1.0":
        raise FormatError(f"{path}: line 2: unsupported format (need ascii 1.0)")
    # header body: optional comments, one vertex element, six float properties
    count = None
    props = []
    while True:
        line = take().strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            if count is not None or len(parts) != 3 or parts[1] != "vertex":
                raise FormatError(f"{path}: line {ln}: unsupported element {line!r}")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise FormatError(f"{path}: line {ln}: bad vertex count") from exc
            if count < 0:
                raise FormatError(f"{path}: line {ln}: negative vertex count")
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] != "float":
                raise FormatError(f"{path}: line {ln}: unsupported property {line!r}")
            props.append(parts[2])
        else:
            raise FormatError(f"{path}: line {ln}: unexpected header line {line!r}")
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    if tuple(props) != _PLY_PROPS:
        raise FormatError(
            f"{path}: need exactly properties {list(_PLY_PROPS)}, got {props}")
    first_data = ln
    data_lines = lines[ln:ln + count]
    if len(data_lines) < count or any(not l.strip() for l in data_lines):
        raise FormatError(f"{path}: expected {count} vertex rows after header")
    tail = [l for l in lines[ln + count:] if l.strip()]
    if tail:
        raise FormatError(
            f"{path}: line {first_data + count + 1}: trailing content after vertices")
    if count == 0:
        z = np.zeros((0, 3), dtype=np.float32)
        return z, z.copy()
    try:
        arr = np.loadtxt(io.StringIO("\n".join(data_lines)),
                         dtype=np.float32, ndmin=2)
    except ValueError:
        arr = None
    if arr is None or arr.shape != (count, 6):
        for k, l in enumerate(data_lines):
            parts = l.split()
            if len(parts) != 6:
                raise FormatError(
                    f"{path}: line {first_data + k + 1}: expected 6 fields, "
                    f"got {len(parts)}")
            for tok in parts:
                try:
                    float(tok)
                except ValueError as exc:
                    raise FormatError(
                        f"{path}: line {first_data + k + 1}: bad float "
                        f"{tok!r}") from exc
        raise FormatError(f"{path}: malformed vertex block")
    return arr[:, :3].copy(), arr[:, 3:].copy()


# --- positional maps (binary, positions + validity mask) --------------------


def write_pmap(path, positions, mask):
    """positions: (3, H, W) float32 posed surface points; mask: (H, W) bool."""
    positions = np.asarray(positions, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if positions.ndim != 3 or positions.shape[0] != 3:
        raise FormatError(f"positions must be (3, H, W), got {positions.shape}")
    if mask.shape != positions.shape[1:]:
        raise FormatError(
            f"mask shape {mask.shape} does not match map {positions.shape[1:]}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(_PMAP_MAGIC)
        fh.write(f"{h} {w} 3 f32\n".encode("ascii"))
        fh.write(positions.astype("<f4", copy=False).tobytes())
        fh.write(mask.astype(np.uint8).tobytes())


def read_pmap(path):
    """Returns (positions (3, H, W) float32, mask (H, W) bool)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_PMAP_MAGIC):
        raise FormatError(f"{path}: bad magic: not a positional map")
    nl = blob.find(b"\n", len(_PMAP_MAGIC))
    if nl < 0:
        raise FormatError(f"{path}: truncated dimension line")
    parts = blob[len(_PMAP_MAGIC):nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[2] != "3" or parts[3] != "f32":
        raise FormatError(f"{path}: line 2: bad dimension line {parts}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise FormatError(f"{path}: line 2: bad dimensions") from exc
    if h <= 0 or w <= 0:
        raise FormatError(f"{path}: line 2: non-positive dimensions {h}x{w}")
    pos_bytes = 3 * h * w * 4
    want = nl + 1 + pos_bytes + h * w
    if len(blob) != want:
        raise FormatError(
            f"{path}: payload is {len(blob) - nl - 1} bytes, expected "
            f"{want - nl - 1}")
    positions = np.frombuffer(blob, dtype="<f4", count=3 * h * w,
                              offset=nl + 1).reshape(3, h, w).copy()
    raw_mask = np.frombuffer(blob, dtype=np.uint8, count=h * w,
                             offset=nl + 1 + pos_bytes)
    if not np.isin(raw_mask, (0, 1)).all():
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    return positions, raw_mask.reshape(h, w).astype(bool)


# --- dataset manifests -------------------------------------------------------


@dataclass
class Manifest:
    """Index of a generated dataset; all paths are relative to the manifest."""

    skeleton: str
    outfits: list = field(default_factory=list)
    # rows of (outfit, pose_path, cloud_path, split) with split train|test
    examples: list = field(default_factory=list)

    def rows(self, outfit=None, split=None):
        return [e for e in self.examples
                if (outfit is None or e[0] == outfit)
                and (split is None or e[3] == split)]


def write_manifest(path, manifest):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("MANIFEST v1\n")
        fh.write(f"skeleton {manifest.skeleton}\n")
        for name in manifest.outfits:
            fh.write(f"outfit {name}\n")
        for outfit, pose_path, cloud_path, split in manifest.examples:
            fh.write(f"example {outfit} {pose_path} {cloud_path} {split}\n")


def read_manifest(path):
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != "MANIFEST v1":
        raise FormatError(f"{path}: line 1: missing MANIFEST v1 header")
    skeleton = None
    outfits = []
    examples = []
    for k, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "skeleton":
            if len(parts) != 2 or skeleton is not None:
                raise FormatError(f"{path}: line {k}: bad skeleton record")
            skeleton = parts[1]
        elif kind == "outfit":
            if len(parts) != 2:
                raise FormatError(f"{path}: line {k}: bad outfit record")
            if parts[1] in outfits:
                raise FormatError(f"{path}: line {k}: duplicate outfit {parts[1]!r}")
            outfits.append(parts[1])
        elif kind == "example":
            if len(parts) != 5 or parts[4] not in ("train", "test"):
                raise FormatError(f"{path}: line {k}: bad example record")
            if parts[1] not in outfits:
                raise FormatError(
                    f"{path}: line {k}: example references unknown outfit "
                    f"{parts[1]!r}")
            examples.append((parts[1], parts[2], parts[3], parts[4]))
        else:
            raise FormatError(f"{path}: line {k}: unknown record {kind!r}")
    if skeleton is None:
        raise FormatError(f"{path}: missing skeleton record")
    return Manifest(skeleton=skeleton, outfits=outfits, examples=examples)


# --- key = value config files ------------------------------------------------


def parse_config(text, schema, source="<config>"):
    """Parse ``key = value`` lines against {key: (type, default)}.

    A default of None marks the key required. bool accepts true/false.
    Unknown and duplicate keys are errors, as is a missing required key.
    """
    out = {}
    for k, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}: line {k}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise FormatError(f"{source}: line {k}: unknown key {key!r}")
        if key in out:
            raise FormatError(f"{source}: line {k}: duplicate key {key!r}")
        typ = schema[key][0]
        try:
            if typ is bool:
                if val not in ("true", "false"):
                    raise ValueError
                out[key] = val == "true"
            else:
                out[key] = typ(val)
        except ValueError as exc:
            raise FormatError(
                f"{source}: line {k}: bad {typ.__name__} value {val!r} for "
                f"{key!r}") from exc
    for key, (typ, default) in schema.items():
        if key not in out:
            if default is None:
                raise FormatError(f"{source}: missing required key {key!r}")
            out[key] = default
    return out


def format_config(values):
    lines = []
    for key, val in values.items():
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
