"""Patch coordinate generation, bilinear patch extraction, intrinsics annealing.

Two patch flavors drive training:
  - dynamic 16x16 patches with random scale and offset, for real/fake
    discrimination;
  - a deterministic static 64x64 patch spanning the full image, the canonical
    input for pose regression (its uniqueness is what lets one patch stand in
    for the whole image).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ImageTooSmall, OutOfBounds, ScaleTooLarge

DYNAMIC_PATCH_SIZE = 16
STATIC_PATCH_SIZE = 64


@dataclass
class PatchSpec:
    """An axis-aligned n x n grid of continuous pixel coordinates."""

    coords: torch.Tensor  # (n, n, 2), (x, y) pixel coordinates
    scale: float
    offset: tuple[float, float]
    n: int


def _grid(n: int, spacing: float, offset: tuple[float, float], dtype=torch.float32) -> torch.Tensor:
    steps = torch.arange(n, dtype=dtype) * spacing
    xs = offset[0] + steps
    ys = offset[1] + steps
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def dynamic_patch(
    width: int,
    height: int,
    rng: torch.Generator | None,
    scale_range: tuple[float, float],
    n: int = DYNAMIC_PATCH_SIZE,
) -> PatchSpec:
    """Random-scale, random-offset n x n patch kept fully inside the image.

    Scale is U(smin, smax); the offset is uniform over all placements that
    keep the grid (spacing = scale) in bounds.

    Raises:
        ScaleTooLarge: if ``n * smax`` exceeds the smaller image side.
    """
    smin, smax = scale_range
    if smin < 1.0:
        raise ScaleTooLarge("minimum dynamic scale must be >= 1")
    if n * smax > min(width, height):
        raise ScaleTooLarge(
            f"patch of size {n} at scale {smax} does not fit in {width}x{height}"
        )
    u = torch.rand(3, generator=rng)
    scale = smin + (smax - smin) * float(u[0])
    extent = (n - 1) * scale
    ox = float(u[1]) * (width - 1 - extent)
    oy = float(u[2]) * (height - 1 - extent)
    return PatchSpec(coords=_grid(n, scale, (ox, oy)), scale=scale, offset=(ox, oy), n=n)


def static_patch(width: int, height: int, n: int = STATIC_PATCH_SIZE) -> PatchSpec:
    """Deterministic n x n grid spanning the full image domain."""
    if width < n or height < n:
        raise ImageTooSmall(f"static patch needs at least {n}x{n}, got {width}x{height}")
    xs = torch.arange(n, dtype=torch.float32) * ((width - 1) / (n - 1))
    ys = torch.arange(n, dtype=torch.float32) * ((height - 1) / (n - 1))
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy], dim=-1)
    return PatchSpec(coords=coords, scale=(min(width, height) - 1) / (n - 1),
                     offset=(0.0, 0.0), n=n)


def extract_patch(image: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """Bilinearly sample an (H, W, C) image at the patch coordinates.

    Exact at integer coordinates.

    Raises:
        OutOfBounds: if any coordinate leaves [0, W-1] x [0, H-1].
    """
    h, w = image.shape[0], image.shape[1]
    coords = spec.coords.to(image.dtype)
    x = coords[..., 0]
    y = coords[..., 1]
    if float(x.min()) < 0 or float(y.min()) < 0 or float(x.max()) > w - 1 or float(y.max()) > h - 1:
        raise OutOfBounds("patch coordinates outside the image domain")
    x0 = x.floor().long().clamp(0, w - 2) if w > 1 else torch.zeros_like(x, dtype=torch.long)
    y0 = y.floor().long().clamp(0, h - 2) if h > 1 else torch.zeros_like(y, dtype=torch.long)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(image.dtype)).unsqueeze(-1)
    fy = (y - y0.to(image.dtype)).unsqueeze(-1)
    flat = image.reshape(h * w, -1)
    p00 = flat[(y0 * w + x0).reshape(-1)].reshape(*x.shape, -1)
    p01 = flat[(y0 * w + x1).reshape(-1)].reshape(*x.shape, -1)
    p10 = flat[(y1 * w + x0).reshape(-1)].reshape(*x.shape, -1)
    p11 = flat[(y1 * w + x1).reshape(-1)].reshape(*x.shape, -1)
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


def default_scale_range(width: int, height: int, n: int = DYNAMIC_PATCH_SIZE) -> tuple[float, float]:
    """Default dynamic scale range: [1, 0.9 * min(W, H) / n]."""
    return (1.0, max(1.0, 0.9 * min(width, height) / n))


def intrinsics_schedule(iteration: int, ramp_iters: int, start_factor: float) -> float:
    """Linear focal-length annealing factor in (0, 1].

    Early iterations shrink fx/fy so patches cover a wide field of view;
    the factor ramps linearly to 1 over ``ramp_iters`` iterations.
    """
    if not (0.0 < start_factor <= 1.0):
        raise ValueError("start_factor must be in (0, 1]")
    if ramp_iters < 1:
        raise ValueError("ramp_iters must be >= 1")
    return start_factor + (1.0 - start_factor) * min(iteration / ramp_iters, 1.0)
