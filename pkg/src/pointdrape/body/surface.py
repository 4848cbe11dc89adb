"""Posed body surface: positional maps, point queries, rigid reposing.

A body object answers three questions at a chosen map resolution:

* ``positional_map``: where is the surface at every texel center (the input
  the pose encoder consumes);
* ``query_support``: for continuous UV points, the bilinearly blended surface
  position plus the segment rotation that carries decoded displacement
  vectors into world space (queries between texels of different islands are
  invalid, never blended);
* ``dense_query_grid``: the set of valid UV points on an s-times-denser grid,
  which is where the model decodes points.

``PosedBody`` derives everything from a skeleton and a pose. ``ImportedBody``
reads the same maps from files, so bodies produced by external tooling can
drive fitting and animation without this package's skeleton.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import kernels
from ..engine.archive import read_archive, write_archive
from ..formats import FormatError, read_pmap, write_pmap
from .atlas import UVAtlas
from .skeleton import fk

__all__ = [
    "OutOfManifoldError", "QuerySupport", "PosedBody", "ImportedBody",
    "rigid_repose", "export_body",
]

_SNAP = 1e-9


class OutOfManifoldError(ValueError):
    """A UV query fell in a gutter, off the map, or across an island seam."""


@dataclass
class QuerySupport:
    """Per-query surface data; invalid rows are zeroed and flagged in ok."""

    ok: np.ndarray  # (N,) bool
    island: np.ndarray  # (N,) int32, -1 where invalid
    position: np.ndarray  # (N, 3) float64 blended surface point
    rotation: np.ndarray  # (N, 3, 3) float64 segment world rotation
    # clamped bilinear coordinates, safe for 4-corner samplers at (H, W)
    i0: np.ndarray  # (N,) int64
    j0: np.ndarray
    fi: np.ndarray  # (N,) float64
    fj: np.ndarray


def _bilinear_coords(h, w, u, v):
    """UV -> texel-space bilinear coordinates with exact-center snapping."""
    x = np.asarray(u, dtype=np.float64) * w - 0.5
    y = np.asarray(v, dtype=np.float64) * h - 0.5
    j0 = np.floor(x)
    i0 = np.floor(y)
    fj = x - j0
    fi = y - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    # fractions within 1e-9 of a texel center collapse onto it, so queries
    # constructed at centers never depend on a neighbor texel
    hi = fj > 1.0 - _SNAP
    j0[hi] += 1
    fj = np.where(hi | (fj < _SNAP), 0.0, fj)
    hi = fi > 1.0 - _SNAP
    i0[hi] += 1
    fi = np.where(hi | (fi < _SNAP), 0.0, fi)
    return i0, j0, fi, fj


def _support_from_maps(pos_map, island_map, seg_rot, u, v):
    """Shared query path over a positional map, island map and rotations."""
    h, w = island_map.shape
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"u and v must be matching 1-d arrays, got "
                         f"{u.shape} and {v.shape}")
    i0, j0, fi, fj = _bilinear_coords(h, w, u, v)
    i1 = i0 + (fi > 0)
    j1 = j0 + (fj > 0)

    def corner_island(ii, jj):
        inb = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        out = np.full(ii.shape, -1, dtype=np.int32)
        out[inb] = island_map[ii[inb], jj[inb]]
        return out

    c00 = corner_island(i0, j0)
    c01 = corner_island(i0, j1)
    c10 = corner_island(i1, j0)
    c11 = corner_island(i1, j1)
    ok = (c00 >= 0) & (c00 == c01) & (c00 == c10) & (c00 == c11)
    island = np.where(ok, c00, -1).astype(np.int32)

    # clamp so every sampler corner (i0..i0+1, j0..j0+1) is in bounds; the
    # weight shift keeps the blend exact for valid queries
    ci0 = np.clip(i0, 0, h - 2)
    cj0 = np.clip(j0, 0, w - 2)
    cfi = fi + (i0 - ci0)
    cfj = fj + (j0 - cj0)

    p00 = pos_map[:, ci0, cj0]
    p01 = pos_map[:, ci0, cj0 + 1]
    p10 = pos_map[:, ci0 + 1, cj0]
    p11 = pos_map[:, ci0 + 1, cj0 + 1]
    w00 = (1.0 - cfi) * (1.0 - cfj)
    w01 = (1.0 - cfi) * cfj
    w10 = cfi * (1.0 - cfj)
    w11 = cfi * cfj
    pos = (w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11).T
    pos = np.where(ok[:, None], pos, 0.0)

    rot = np.zeros((u.shape[0], 3, 3))
    if ok.any():
        rot[ok] = seg_rot[island[ok]]
    return QuerySupport(ok=ok, island=island, position=pos, rotation=rot,
                        i0=ci0, j0=cj0, fi=cfi, fj=cfj)


class _QueryableBody:
    """Query interface shared by posed and imported bodies.

    Subclasses provide positional_map, island_map and seg_rot/seg_org arrays.
    """

    def query_support(self, h, w, u, v):
        pos_map, _ = self.positional_map(h, w)
        return _support_from_maps(pos_map, self.island_map(h, w),
                                  self.seg_rot, u, v)

    def query(self, h, w, u, v):
        """Like query_support but every query must be valid."""
        sup = self.query_support(h, w, u, v)
        if not sup.ok.all():
            bad = int(np.flatnonzero(~sup.ok)[0])
            n_bad = int((~sup.ok).sum())
            uu = np.atleast_1d(u)[bad]
            vv = np.atleast_1d(v)[bad]
            raise OutOfManifoldError(
                f"{n_bad} of {sup.ok.size} queries are off the body manifold; "
                f"first at index {bad}, uv=({uu:.6f}, {vv:.6f})")
        return sup

    def dense_query_grid(self, h, w, scale):
        """Valid (u, v, island) points of the scale-times-denser grid."""
        key = (int(h), int(w), int(scale))
        cached = self._query_grids.get(key)
        if cached is None:
            if scale < 1:
                raise ValueError(f"grid scale must be >= 1, got {scale}")
            gw, gh = w * scale, h * scale
            u = np.tile((np.arange(gw) + 0.5) / gw, gh)
            v = np.repeat((np.arange(gh) + 0.5) / gh, gw)
            sup = self.query_support(h, w, u, v)
            cached = (u[sup.ok], v[sup.ok], sup.island[sup.ok])
            self._query_grids[key] = cached
        return cached

    def dense_support(self, h, w, scale):
        """Cached (QuerySupport, uv) for the valid dense-grid points.

        The grid never changes for a given body, so callers that decode the
        same pose repeatedly (training epochs, fitting iterations) pay for
        the support lookup once.
        """
        cache = self.__dict__.setdefault("_support_cache", {})
        key = (int(h), int(w), int(scale))
        cached = cache.get(key)
        if cached is None:
            u, v, _ = self.dense_query_grid(h, w, scale)
            sup = self.query_support(h, w, u, v)
            cache[key] = cached = (sup, np.column_stack([u, v]))
        return cached


class PosedBody(_QueryableBody):
    """Capsule body surface under one pose of a skeleton."""

    def __init__(self, skeleton, pose, atlas=None):
        if atlas is None:
            atlas = UVAtlas(n_islands=skeleton.n_bones)
        elif atlas.n_islands != skeleton.n_bones:
            raise ValueError(f"atlas has {atlas.n_islands} islands for "
                             f"{skeleton.n_bones} segments")
        self.skeleton = skeleton
        self.pose = pose
        self.atlas = atlas
        self.joint_rot, self.joint_pos = fk(skeleton, pose)
        bones = skeleton.bones
        self.seg_rot = np.stack([self.joint_rot[b.joint] for b in bones])
        self.seg_org = np.stack([self.joint_pos[b.joint] for b in bones])
        self.seg_frame = np.stack([b.frame for b in bones])
        self.seg_radius = np.array([b.radius for b in bones])
        self.seg_length = np.array([b.length for b in bones])
        self._pos_maps = {}
        self._query_grids = {}

    def island_map(self, h, w):
        return self.atlas.texel_table(h, w).island

    def local_dirs(self, island, theta):
        """Outward normal and circumferential tangent, segment-local frame.

        These are the axes displacement fields are expressed along; world
        vectors are seg_rot[island] @ v.
        """
        island = np.asarray(island)
        frame = self.seg_frame[island]
        zero = np.zeros_like(theta)
        n = np.stack([np.cos(theta), np.sin(theta), zero], axis=-1)
        t = np.stack([-np.sin(theta), np.cos(theta), zero], axis=-1)
        return (np.einsum("...ij,...j->...i", frame, n),
                np.einsum("...ij,...j->...i", frame, t))

    def surface_point(self, island, theta, axial):
        """World position of bare-surface points given island coordinates."""
        island = np.asarray(island)
        r = self.seg_radius[island]
        length = self.seg_length[island]
        local = np.stack([r * np.cos(theta), r * np.sin(theta),
                          axial * length], axis=-1)
        local = np.einsum("...ij,...j->...i", self.seg_frame[island], local)
        world = np.einsum("...ij,...j->...i", self.seg_rot[island], local)
        return self.seg_org[island] + world

    def positional_map(self, h, w):
        """(positions (3, H, W) float64 with zeros in gutters, mask (H, W))."""
        key = (int(h), int(w))
        cached = self._pos_maps.get(key)
        if cached is None:
            tt = self.atlas.texel_table(h, w)
            ii, jj = np.nonzero(tt.mask)
            pts = self.surface_point(tt.island[ii, jj],
                                     2.0 * np.pi * tt.circ_frac[ii, jj],
                                     tt.axial_frac[ii, jj])
            pos = np.zeros((3, h, w))
            pos[:, ii, jj] = pts.T
            cached = (pos, tt.mask.copy())
            self._pos_maps[key] = cached
        return cached


class ImportedBody(_QueryableBody):
    """Body defined by files: a positional map plus segment transforms.

    The escape hatch for driving the pipeline with externally fitted bodies:
    anything that can render these two files can be posed against.
    """

    def __init__(self, positions, island, seg_rot, seg_org):
        positions = np.asarray(positions, dtype=np.float64)
        island = np.asarray(island, dtype=np.int32)
        seg_rot = np.asarray(seg_rot, dtype=np.float64)
        seg_org = np.asarray(seg_org, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[0] != 3:
            raise ValueError(f"positions must be (3, H, W), got {positions.shape}")
        if island.shape != positions.shape[1:]:
            raise ValueError(f"island map {island.shape} does not match "
                             f"{positions.shape[1:]}")
        n_seg = seg_rot.shape[0]
        if seg_rot.shape != (n_seg, 3, 3) or seg_org.shape != (n_seg, 3):
            raise ValueError("segment transforms must be (B, 3, 3) and (B, 3)")
        if island.max(initial=-1) >= n_seg:
            raise ValueError(f"island id {island.max()} exceeds {n_seg} segments")
        self.positions = positions
        self.island = island
        self.seg_rot = seg_rot
        self.seg_org = seg_org
        self.resolution = island.shape
        self._query_grids = {}

    @staticmethod
    def from_files(pmap_path, tarc_path):
        positions, mask = read_pmap(pmap_path)
        entries = read_archive(tarc_path)
        for need in ("island", "seg_rot", "seg_org"):
            if need not in entries:
                raise FormatError(f"{tarc_path}: missing entry {need!r}")
        island_f = entries["island"]
        island = island_f.astype(np.int32)
        if not np.array_equal(island_f, island.astype(np.float32)):
            raise FormatError(f"{tarc_path}: island ids must be integral")
        if not np.array_equal(island >= 0, mask):
            raise FormatError(
                f"{tarc_path}: island map disagrees with positional-map mask")
        return ImportedBody(positions.astype(np.float64), island,
                            entries["seg_rot"], entries["seg_org"])

    def _check_res(self, h, w):
        if (h, w) != self.resolution:
            raise ValueError(f"imported body has fixed resolution "
                             f"{self.resolution}, asked for {(h, w)}")

    def island_map(self, h, w):
        self._check_res(h, w)
        return self.island

    def positional_map(self, h, w):
        self._check_res(h, w)
        return self.positions, self.island >= 0


def export_body(body, h, w, pmap_path, tarc_path):
    """Write the two files ImportedBody.from_files reads back."""
    pos, mask = body.positional_map(h, w)
    write_pmap(pmap_path, pos.astype(np.float32), mask)
    write_archive(tarc_path, {
        "island": body.island_map(h, w).astype(np.float32),
        "seg_rot": body.seg_rot.astype(np.float32),
        "seg_org": body.seg_org.astype(np.float32),
    })


def rigid_repose(src_body, dst_body, points, h, w, normals=None):
    """Carry world points from one pose to another by their nearest segment.

    Each point inherits the rigid motion of the segment owning its nearest
    source-surface texel. The piecewise-rigid baseline animation: cloth
    detail is frozen in the source pose. With ``normals`` the vectors ride
    the same per-segment rotations and (points, normals) is returned.
    """
    if src_body.seg_rot.shape != dst_body.seg_rot.shape:
        raise ValueError("bodies have different segment counts")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    pos_map, mask = src_body.positional_map(h, w)
    centers = pos_map[:, mask].T
    texel_seg = src_body.island_map(h, w)[mask]
    grid = kernels.build_grid(centers)
    nn_idx, _ = kernels.nn_query(grid, points)
    seg = texel_seg[nn_idx]
    rel = np.einsum("nji,nj->ni", src_body.seg_rot[seg],
                    points - src_body.seg_org[seg])
    moved = dst_body.seg_org[seg] + np.einsum(
        "nij,nj->ni", dst_body.seg_rot[seg], rel)
    if normals is None:
        return moved
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != points.shape:
        raise ValueError(f"normals {normals.shape} do not match points "
                         f"{points.shape}")
    rel_n = np.einsum("nji,nj->ni", src_body.seg_rot[seg], normals)
    spun = np.einsum("nij,nj->ni", dst_body.seg_rot[seg], rel_n)
    return moved, spun
