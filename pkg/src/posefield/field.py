"""Positional-encoded radiance-field MLP and differentiable volume rendering.

One MLP serves both the coarse and the fine pass of hierarchical sampling:
the per-ray render composites a single merged set of coarse + importance
samples, so there is no separate coarse network or coarse loss. Everything
is differentiable with respect to the field parameters and the 9 pose
parameters feeding the rays.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn as nn

from .errors import NonMonotonicDepths
from .geometry import Intrinsics, camera_rays, RayBundle
from .sampling import PatchSpec

WEIGHT_FLOOR = 1e-5  # uniform floor added per bin before inverse-CDF sampling


@dataclass
class FieldConfig:
    """Architecture and sampling hyperparameters of the radiance field."""

    pos_levels: int = 10
    dir_levels: int = 4
    width: int = 360
    depth: int = 8
    skip_layers: tuple[int, ...] = (4,)
    n_coarse: int = 64
    n_fine: int = 64
    channels: int = 3
    background: tuple[float, ...] = (1.0, 1.0, 1.0)
    density_noise_std: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.n_coarse < 1 or self.n_fine < 1:
            raise ValueError("width and sample counts must be >= 1")
        if len(self.background) != self.channels:
            raise ValueError("background must have one value per color channel")
        if any(not (0.0 <= b <= 1.0) for b in self.background):
            raise ValueError("background components must lie in [0, 1]")


def positional_encoding(p: torch.Tensor, levels: int) -> torch.Tensor:
    """Sinusoidal encoding: (sin, cos) of 2^i * pi * p for i = 0..levels-1.

    Input (..., k) maps to (..., 2 * levels * k); per component the layout is
    [sin(pi p), cos(pi p), sin(2 pi p), cos(2 pi p), ...].
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    freqs = (2.0 ** torch.arange(levels, dtype=p.dtype, device=p.device)) * torch.pi
    angles = p.unsqueeze(-1) * freqs  # (..., k, levels)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., k, levels, 2)
    return enc.reshape(*p.shape[:-1], 2 * levels * p.shape[-1])


class RadianceField(nn.Module):
    """MLP mapping (position, direction) -> (color, density).

    Density depends on position only (the viewing direction enters after the
    density head), uses a softplus activation for smooth pose gradients, and
    color channels are sigmoid-bounded to [0, 1].
    """

    def __init__(self, cfg: FieldConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        pos_in = 2 * cfg.pos_levels * 3
        layers = []
        in_dim = pos_in
        for i in range(cfg.depth):
            if i in cfg.skip_layers and i > 0:
                in_dim += pos_in
            layers.append(nn.Linear(in_dim, cfg.width))
            in_dim = cfg.width
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(cfg.width, 1)
        self.feature = nn.Linear(cfg.width, cfg.width)
        color_in = cfg.width + (2 * cfg.dir_levels * 3 if cfg.dir_levels > 0 else 0)
        self.color_hidden = nn.Linear(color_in, max(cfg.width // 2, 8))
        self.color_out = nn.Linear(max(cfg.width // 2, 8), cfg.channels)
        if dtype != torch.float32:
            self.to(dtype)

    def forward(
        self, x: torch.Tensor, d: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Query the field at positions ``x`` (N, 3) along directions ``d`` (N, 3).

        Returns (color (N, C) in [0, 1], sigma (N,) >= 0).
        """
        enc = positional_encoding(x, self.cfg.pos_levels)
        h = enc
        for i, layer in enumerate(self.trunk):
            if i in self.cfg.skip_layers and i > 0:
                h = torch.cat([h, enc], dim=-1)
            h = torch.relu(layer(h))
        sigma = nn.functional.softplus(self.sigma_head(h)).squeeze(-1)
        feat = self.feature(h)
        if self.cfg.dir_levels > 0:
            if d is None:
                raise ValueError("field was built with direction input; d is required")
            feat = torch.cat([feat, positional_encoding(d, self.cfg.dir_levels)], dim=-1)
        c = torch.sigmoid(self.color_out(torch.relu(self.color_hidden(feat))))
        return c, sigma


def query_field(
    field: RadianceField, x: torch.Tensor, d: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional alias for ``field(x, d)``."""
    return field(x, d)


def stratified_sample(
    near: float,
    far: float,
    n: int,
    rng: torch.Generator | None,
    batch_shape: tuple[int, ...] = (),
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """One uniform draw per equal-width bin partitioning [near, far].

    ``rng=None`` uses bin midpoints (deterministic quadrature rule).
    Returns shape (*batch_shape, n), strictly increasing along the last axis.
    """
    if not near < far:
        raise ValueError("require near < far")
    if rng is None:
        u = torch.full((*batch_shape, n), 0.5, dtype=dtype)
    else:
        u = torch.rand(*batch_shape, n, generator=rng, dtype=dtype)
    idx = torch.arange(n, dtype=dtype)
    return near + (idx + u) * (far - near) / n


def importance_sample(
    bin_edges: torch.Tensor,
    weights: torch.Tensor,
    n: int,
    rng: torch.Generator | None,
) -> torch.Tensor:
    """Inverse-CDF draws from the piecewise-constant density ~ weights + floor.

    Args:
        bin_edges: (..., m+1) increasing depths.
        weights: (..., m) nonnegative bin weights; a uniform floor of 1e-5 is
            added so empty bins keep nonzero probability.
        n: number of samples per batch row.
        rng: generator for the uniform draws (None -> evenly spaced u).

    Returns:
        (..., n) depths inside [first edge, last edge]; differentiable with
        respect to ``weights`` (samples move smoothly with the CDF).
    """
    w = weights + WEIGHT_FLOOR
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)  # (..., m+1)
    batch = cdf.shape[:-1]
    if rng is None:
        u = (torch.arange(n, dtype=cdf.dtype) + 0.5) / n
        u = u.expand(*batch, n)
    else:
        u = torch.rand(*batch, n, generator=rng, dtype=cdf.dtype)
    idx = torch.searchsorted(cdf.detach().contiguous(), u.contiguous(), right=True)
    idx = idx.clamp(1, cdf.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, idx - 1)
    cdf_hi = torch.gather(cdf, -1, idx)
    edges = bin_edges.expand(*batch, -1)
    edge_lo = torch.gather(edges, -1, idx - 1)
    edge_hi = torch.gather(edges, -1, idx)
    denom = (cdf_hi - cdf_lo).clamp_min(1e-12)
    frac = (u - cdf_lo) / denom
    return edge_lo + frac * (edge_hi - edge_lo)


@dataclass
class RenderOutput:
    """Per-pixel results of volume rendering."""

    rgb: torch.Tensor      # (..., C) in [0, 1]
    depth: torch.Tensor    # (...,) expected termination distance
    opacity: torch.Tensor  # (...,) accumulated weight in [0, 1]
    weights: torch.Tensor  # (..., S) per-sample compositing weights


def volume_render(
    colors: torch.Tensor,
    sigmas: torch.Tensor,
    depths: torch.Tensor,
    far: float,
    background: torch.Tensor,
) -> RenderOutput:
    """Quadrature of the volume rendering integral along each ray.

    alpha_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - alpha_j),
    w_i = T_i alpha_i, rgb = sum w_i c_i + T_end * background, with delta
    from consecutive depth differences and the last delta = far - depth_N.

    Raises:
        NonMonotonicDepths: if depths are not strictly increasing.
    """
    with torch.no_grad():
        if depths.shape[-1] > 1 and not (depths[..., 1:] > depths[..., :-1]).all():
            raise NonMonotonicDepths("sample depths must be strictly increasing")
    deltas = torch.cat(
        [depths[..., 1:] - depths[..., :-1], (far - depths[..., -1:]).clamp_min(0.0)],
        dim=-1,
    )
    alpha = 1.0 - torch.exp(-sigmas * deltas)
    one_minus = (1.0 - alpha).clamp_min(0.0)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(one_minus[..., :1]), one_minus], dim=-1), dim=-1
    )
    weights = trans[..., :-1] * alpha
    opacity = weights.sum(-1)
    rgb = (weights.unsqueeze(-1) * colors).sum(-2) + trans[..., -1:] * background
    depth = (weights * depths).sum(-1) / opacity.clamp_min(1e-10)
    return RenderOutput(rgb=rgb, depth=depth, opacity=opacity, weights=weights)


def render_rays(
    field: RadianceField,
    rays: RayBundle,
    cfg: FieldConfig,
    rng: torch.Generator | None,
) -> RenderOutput:
    """Hierarchical render of a ray bundle against a single shared MLP.

    A stratified coarse pass produces compositing weights, an inverse-CDF
    importance pass adds n_fine samples, and ONE final composite runs over
    the sorted union of both sample sets.
    """
    n_rays = len(rays)
    dtype = rays.origins.dtype
    coarse = stratified_sample(
        rays.near, rays.far, cfg.n_coarse, rng, batch_shape=(n_rays,), dtype=dtype
    )
    background = torch.tensor(cfg.background, dtype=dtype)

    def query(depths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pts = rays.origins.unsqueeze(1) + depths.unsqueeze(-1) * rays.directions.unsqueeze(1)
        flat = pts.reshape(-1, 3)
        dirs = None
        if cfg.dir_levels > 0:
            dirs = rays.directions.unsqueeze(1).expand_as(pts).reshape(-1, 3)
        c, s = field(flat, dirs)
        if cfg.density_noise_std > 0 and rng is not None:
            s = torch.relu(s + cfg.density_noise_std * torch.randn(
                s.shape, generator=rng, dtype=dtype))
        return c.reshape(n_rays, depths.shape[-1], -1), s.reshape(n_rays, depths.shape[-1])

    colors_c, sigmas_c = query(coarse)
    coarse_out = volume_render(colors_c, sigmas_c, coarse, rays.far, background)

    mid = 0.5 * (coarse[..., 1:] + coarse[..., :-1])
    edges = torch.cat(
        [
            torch.full_like(coarse[..., :1], rays.near),
            mid,
            torch.full_like(coarse[..., :1], rays.far),
        ],
        dim=-1,
    )
    fine = importance_sample(edges, coarse_out.weights, cfg.n_fine, rng)
    merged, _ = torch.sort(torch.cat([coarse, fine], dim=-1), dim=-1)
    # De-duplicate rounding ties so the strict-monotonicity contract holds;
    # the ramp is far above one ulp, far below the bin width, and only
    # applied on the (rare) steps where a tie actually occurs.
    if not (merged[..., 1:] > merged[..., :-1]).all():
        eps = (rays.far - rays.near) * (1e-5 if dtype == torch.float32 else 1e-12)
        merged = merged + torch.arange(merged.shape[-1], dtype=dtype) * eps
    colors_m, sigmas_m = query(merged)
    return volume_render(colors_m, sigmas_m, merged, rays.far, background)


def render_image(
    field: RadianceField,
    pose_params: torch.Tensor,
    intr: Intrinsics,
    cfg: FieldConfig,
    near: float,
    far: float,
    rng: torch.Generator | None = None,
    chunk: int = 4096,
) -> RenderOutput:
    """Render a full image (deterministic midpoint sampling when rng is None)."""
    h, w = intr.height, intr.width
    dtype = pose_params.dtype
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    coords = torch.stack([xs, ys], dim=-1).reshape(-1, 2)
    rgbs, depths, opacities = [], [], []
    with torch.no_grad():
        for i in range(0, coords.shape[0], chunk):
            rays = camera_rays(pose_params, intr, coords[i : i + chunk], near, far)
            out = render_rays(field, rays, cfg, rng)
            rgbs.append(out.rgb)
            depths.append(out.depth)
            opacities.append(out.opacity)
    weights = torch.zeros(h * w, 0, dtype=dtype)  # per-sample weights are not retained
    return RenderOutput(
        rgb=torch.cat(rgbs).reshape(h, w, -1),
        depth=torch.cat(depths).reshape(h, w),
        opacity=torch.cat(opacities).reshape(h, w),
        weights=weights.reshape(h, w, 0),
    )


def render_patch(
    field: RadianceField,
    pose_params: torch.Tensor,
    intr: Intrinsics,
    patch: PatchSpec,
    cfg: FieldConfig,
    rng: torch.Generator | None,
    near: float,
    far: float,
) -> RenderOutput:
    """Render the pixel grid of a patch; outputs keep the (n, n, ...) layout."""
    coords = patch.coords.reshape(-1, 2)
    rays = camera_rays(pose_params, intr, coords, near, far)
    out = render_rays(field, rays, cfg, rng)
    n = patch.n
    return RenderOutput(
        rgb=out.rgb.reshape(n, n, -1),
        depth=out.depth.reshape(n, n),
        opacity=out.opacity.reshape(n, n),
        weights=out.weights.reshape(n, n, -1),
    )
