"""Iso-surface extraction from the learned density field."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage import measure

from .errors import EmptyLevelSet
from .field import RadianceField


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (signed tetrahedra)."""
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return float(abs(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0))

    def save_obj(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]} {v[1]} {v[2]}\n")
            for f in self.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def density_grid(
    field: RadianceField,
    grid_resolution: int,
    bounds: tuple[float, float],
    chunk: int = 65536,
) -> np.ndarray:
    """Densities sampled on a regular grid over bounds^3, shape (g, g, g)."""
    lo, hi = bounds
    axis = torch.linspace(lo, hi, grid_resolution)
    zz, yy, xx = torch.meshgrid(axis, axis, axis, indexing="ij")
    pts = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
    dtype = next(field.parameters()).dtype
    sigmas = []
    dirs = torch.zeros(1, 3, dtype=dtype)
    dirs[0, 2] = 1.0
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            block = pts[i : i + chunk].to(dtype)
            d = dirs.expand_as(block) if field.cfg.dir_levels > 0 else None
            _, sigma = field(block, d)
            sigmas.append(sigma)
    return torch.cat(sigmas).reshape(grid_resolution, grid_resolution, grid_resolution).numpy()


def extract_mesh(
    field: RadianceField,
    grid_resolution: int = 64,
    density_threshold: float = 10.0,
    bounds: tuple[float, float] = (-1.8, 1.8),
) -> TriangleMesh:
    """Marching cubes over the density sampled on a regular grid.

    Raises:
        EmptyLevelSet: if the threshold exceeds the maximum sampled density.
    """
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be >= 8")
    grid = density_grid(field, grid_resolution, bounds)
    if grid.max() <= density_threshold:
        raise EmptyLevelSet(
            f"threshold {density_threshold} above max sampled density {grid.max():.4f}"
        )
    spacing = (bounds[1] - bounds[0]) / (grid_resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        grid, level=density_threshold, spacing=(spacing,) * 3
    )
    # Grid axes are (z, y, x); swap back to world (x, y, z) and offset.
    verts = verts[:, ::-1] + bounds[0]
    return TriangleMesh(vertices=np.ascontiguousarray(verts), faces=faces.astype(np.int64))
