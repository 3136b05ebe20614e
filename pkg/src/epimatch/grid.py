"""Coarse-grid bookkeeping shared by the losses, matcher and data generator.

Pixel (i, j) has its centre at continuous coordinates (u, v) = (j, i); rays
are cast through integer coordinates. Coarse cell (r, c) covers the pixel
block [r*w, (r+1)*w) x [c*w, (c+1)*w) and its centre is the pixel
(r*w + w//2, c*w + w//2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    patch_width: int = 8

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.patch_width < 1:
            raise ValueError("grid dimensions must be positive")

    @property
    def m(self):
        return self.rows * self.cols

    def cell_center(self, index):
        """Pixel-centre (u, v) of a flat cell index."""
        r, c = divmod(index, self.cols)
        w = self.patch_width
        return float(c * w + w // 2), float(r * w + w // 2)

    def cell_centers(self):
        """(m, 2) array of (u, v) centres in row-major cell order."""
        w = self.patch_width
        us = np.arange(self.cols) * w + w // 2
        vs = np.arange(self.rows) * w + w // 2
        uu, vv = np.meshgrid(us, vs)
        return np.column_stack([uu.ravel(), vv.ravel()]).astype(float)

    def cell_of_point(self, u, v):
        """Flat index of the cell containing continuous coords, or -1."""
        w = self.patch_width
        c = int(round(u)) // w
        r = int(round(v)) // w
        if 0 <= r < self.rows and 0 <= c < self.cols:
            return r * self.cols + c
        return -1

    @staticmethod
    def for_image(height, width, patch_width=8):
        if height % patch_width or width % patch_width:
            raise ValueError("image dimensions must be multiples of the patch width")
        return GridSpec(height // patch_width, width // patch_width, patch_width)
