"""Rectangular UV atlas: one island per body segment on the unit square.

The square is divided into a fixed grid of cells (2 columns by 6 rows for the
default 11-segment body); island i occupies cell (i // 2, i % 2), shrunk by a
constant inset on every side so island interiors stay disjoint. Texels of
different islands can still end up adjacent at coarse resolutions; what keeps
islands independent is the query rule (all four bilinear corners must share
one island), not empty gutter texels. Inside an island the horizontal
coordinate sweeps the cylinder circumference and the vertical coordinate runs
along the segment axis, both normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["UVAtlas", "TexelTable"]


@dataclass(frozen=True)
class TexelTable:
    """Per-texel island assignment and island-local coordinates."""

    island: np.ndarray  # (H, W) int32, -1 in the gutters
    circ_frac: np.ndarray  # (H, W) float64 in [0, 1], circumference fraction
    axial_frac: np.ndarray  # (H, W) float64 in [0, 1], along the segment axis

    @property
    def mask(self):
        return self.island >= 0


class UVAtlas:
    def __init__(self, n_islands=11, cols=2, rows=6, inset=0.010):
        if n_islands > cols * rows:
            raise ValueError(f"{n_islands} islands exceed {cols}x{rows} cells")
        cell_w, cell_h = 1.0 / cols, 1.0 / rows
        if inset <= 0 or 2 * inset >= min(cell_w, cell_h):
            raise ValueError(f"inset {inset} leaves no island interior")
        self.n_islands = n_islands
        self.cols = cols
        self.rows = rows
        self.inset = inset
        self._tables = {}

    def island_rect(self, i):
        """(u0, v0, u1, v1) of island i's interior rectangle."""
        if not 0 <= i < self.n_islands:
            raise ValueError(f"island {i} out of range")
        row, col = divmod(i, self.cols)
        u0 = col / self.cols + self.inset
        u1 = (col + 1) / self.cols - self.inset
        v0 = row / self.rows + self.inset
        v1 = (row + 1) / self.rows - self.inset
        return u0, v0, u1, v1

    def locate(self, u, v):
        """Vectorized (u, v) -> (island, circ_frac, axial_frac).

        island is -1 outside every interior rectangle; the fractions are 0
        there. Boundary points (exactly on a rectangle edge) count as inside.
        """
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        island = np.full(u.shape, -1, dtype=np.int32)
        circ = np.zeros(u.shape)
        axial = np.zeros(u.shape)
        inside01 = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        col = np.clip((u * self.cols).astype(np.int64), 0, self.cols - 1)
        row = np.clip((v * self.rows).astype(np.int64), 0, self.rows - 1)
        cand = row * self.cols + col
        u0 = col / self.cols + self.inset
        u1 = (col + 1) / self.cols - self.inset
        v0 = row / self.rows + self.inset
        v1 = (row + 1) / self.rows - self.inset
        ok = (inside01 & (cand < self.n_islands)
              & (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1))
        island[ok] = cand[ok]
        circ[ok] = (u[ok] - u0[ok]) / (u1[ok] - u0[ok])
        axial[ok] = (v[ok] - v0[ok]) / (v1[ok] - v0[ok])
        return island, circ, axial

    def texel_table(self, h, w):
        """Cached per-resolution table evaluated at texel centers."""
        key = (int(h), int(w))
        if key not in self._tables:
            if h < self.rows * 4 or w < self.cols * 4:
                raise ValueError(f"map {h}x{w} too coarse for {self.rows}x"
                                 f"{self.cols} cells")
            v = (np.arange(h) + 0.5) / h
            u = (np.arange(w) + 0.5) / w
            uu = np.broadcast_to(u[None, :], (h, w))
            vv = np.broadcast_to(v[:, None], (h, w))
            island, circ, axial = self.locate(uu, vv)
            self._tables[key] = TexelTable(island, circ, axial)
        return self._tables[key]
