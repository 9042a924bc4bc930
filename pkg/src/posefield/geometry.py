"""Camera pose representation, pose-prior sampling, and pinhole ray generation.

Conventions (fixed across the package):
  - Right-handed world frame; +z is "up" for the default hemisphere prior.
  - Camera-to-world convention: a pose maps camera coordinates to world
    coordinates. The camera looks down its -z axis, +y is image-up. This
    matches the NeRF-synthetic ``transform_matrix`` layout, so those JSON
    poses load without modification.
  - Elevation is measured from the horizontal plane: 0 deg at the equator,
    +90 deg at the pole.

Rotations are carried around as a continuous 6D embedding (the first two
columns of the rotation matrix, column-major) plus a 3D translation, giving
a 9-parameter pose that is friendly to gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DegenerateLookAt, DegenerateRotation, NotARotation

_DEGENERACY_TOL = 1e-8

IDENTITY_ROT6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def rot6d_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Recover rotation matrices from 6D embeddings by Gram-Schmidt.

    Args:
        r: tensor of shape (..., 6); the two halves are the (unnormalized)
           first and second columns of the rotation.

    Returns:
        Tensor of shape (..., 3, 3) with orthonormal columns, det +1.

    Raises:
        DegenerateRotation: if either half has norm < 1e-8 or the halves
            are parallel within 1e-8. Learnable embeddings can drift toward
            this configuration; a hard error beats silent NaNs.
    """
    if r.shape[-1] != 6:
        raise DegenerateRotation(f"expected (..., 6) embedding, got {tuple(r.shape)}")
    a1 = r[..., :3]
    a2 = r[..., 3:]
    n1 = torch.linalg.norm(a1, dim=-1)
    n2 = torch.linalg.norm(a2, dim=-1)
    with torch.no_grad():
        if (n1 < _DEGENERACY_TOL).any() or (n2 < _DEGENERACY_TOL).any():
            raise DegenerateRotation("6D embedding column with near-zero norm")
    b1 = a1 / n1.unsqueeze(-1)
    a2_perp = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n_perp = torch.linalg.norm(a2_perp, dim=-1)
    with torch.no_grad():
        if (n_perp < _DEGENERACY_TOL).any():
            raise DegenerateRotation("6D embedding columns are (near-)parallel")
    b2 = a2_perp / n_perp.unsqueeze(-1)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(mat: torch.Tensor, tol: float = 1e-4) -> torch.Tensor:
    """Drop the last column of a rotation matrix, keeping the first two.

    Raises:
        NotARotation: if ``mat`` is not orthonormal with det +1 within ``tol``.
    """
    if mat.shape[-2:] != (3, 3):
        raise NotARotation(f"expected (..., 3, 3), got {tuple(mat.shape)}")
    with torch.no_grad():
        eye = torch.eye(3, dtype=mat.dtype, device=mat.device)
        ortho_err = (mat.transpose(-1, -2) @ mat - eye).abs().max()
        det = torch.linalg.det(mat)
        if ortho_err > tol or (det - 1.0).abs().max() > tol:
            raise NotARotation(
                f"orthonormality error {ortho_err:.2e}, det {det.reshape(-1)[0]:.6f}"
            )
    return torch.cat([mat[..., :, 0], mat[..., :, 1]], dim=-1)


def lookat_rotation(
    position: torch.Tensor, target: torch.Tensor, up: torch.Tensor
) -> torch.Tensor:
    """Camera-to-world rotation for a camera at ``position`` looking at ``target``.

    The camera forward axis (-z in camera frame) points from position toward
    target; the image-up direction is as close to ``up`` as orthogonality allows.

    Raises:
        DegenerateLookAt: when position == target or up is parallel to the
            viewing direction.
    """
    forward = target - position
    fn = torch.linalg.norm(forward, dim=-1)
    if (fn < _DEGENERACY_TOL).any():
        raise DegenerateLookAt("camera position coincides with look-at target")
    forward = forward / fn.unsqueeze(-1)
    z_axis = -forward
    x_axis = torch.cross(up / torch.linalg.norm(up, dim=-1, keepdim=True), z_axis, dim=-1)
    xn = torch.linalg.norm(x_axis, dim=-1)
    if (xn < _DEGENERACY_TOL).any():
        raise DegenerateLookAt("up vector is parallel to the viewing direction")
    x_axis = x_axis / xn.unsqueeze(-1)
    y_axis = torch.cross(z_axis, x_axis, dim=-1)
    return torch.stack([x_axis, y_axis, z_axis], dim=-1)


@dataclass
class CameraPose:
    """Learnable 9-parameter pose: 6D rotation embedding + 3D camera center."""

    params: torch.Tensor  # shape (9,): [r6d, translation]

    def __post_init__(self):
        if self.params.shape != (9,):
            raise DegenerateRotation(f"pose must have 9 parameters, got {tuple(self.params.shape)}")

    @property
    def rotation6d(self) -> torch.Tensor:
        return self.params[:6]

    @property
    def translation(self) -> torch.Tensor:
        return self.params[6:]

    def rotation_matrix(self) -> torch.Tensor:
        return rot6d_to_matrix(self.rotation6d)

    def matrix(self) -> torch.Tensor:
        """4x4 camera-to-world matrix."""
        out = torch.eye(4, dtype=self.params.dtype, device=self.params.device)
        out[:3, :3] = self.rotation_matrix()
        out[:3, 3] = self.translation
        return out

    @staticmethod
    def from_matrix(mat: torch.Tensor) -> "CameraPose":
        r6 = matrix_to_rot6d(mat[:3, :3])
        return CameraPose(torch.cat([r6, mat[:3, 3]]))

    @staticmethod
    def identity(dtype: torch.dtype = torch.float32) -> "CameraPose":
        return CameraPose(torch.tensor([*IDENTITY_ROT6D, 0.0, 0.0, 0.0], dtype=dtype))


@dataclass
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def scaled(self, factor: float) -> "Intrinsics":
        """Focal lengths multiplied by ``factor``; principal point unchanged."""
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx, self.cy,
                          self.width, self.height)


@dataclass
class PosePrior:
    """Parametric sampling space over camera positions and orientations.

    Positions are spherical coordinates around the world origin with the
    polar axis along ``up``; the look-at point is an isotropic Gaussian.
    """

    radius_range: tuple[float, float] = (4.0, 4.0)
    elevation_range_deg: tuple[float, float] = (0.0, 90.0)
    azimuth_range_deg: tuple[float, float] = (0.0, 360.0)
    lookat_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lookat_std: float = 0.0
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.radius_range[0] > self.radius_range[1]:
            raise ValueError("radius_range min > max")
        if self.elevation_range_deg[0] > self.elevation_range_deg[1]:
            raise ValueError("elevation_range min > max")
        if not (-90.0 <= self.elevation_range_deg[0] and self.elevation_range_deg[1] <= 90.0):
            raise ValueError("elevation must lie in [-90, 90]")
        if self.azimuth_range_deg[0] > self.azimuth_range_deg[1]:
            raise ValueError("azimuth_range min > max")
        if self.lookat_std < 0:
            raise ValueError("lookat_std must be nonnegative")


def _uniform(lo: float, hi: float, n: int, rng, dtype) -> torch.Tensor:
    u = torch.rand(n, generator=rng, dtype=dtype)
    return lo + (hi - lo) * u


def sample_poses(
    prior: PosePrior, n: int, rng: torch.Generator | None, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Draw ``n`` camera poses from the prior; returns a (n, 9) tensor.

    Radius, elevation and azimuth are uniform over their ranges; the look-at
    point is N(lookat_mean, lookat_std^2 I); the rotation comes from the
    look-at construction. Deterministic given the generator state.
    """
    radius = _uniform(*prior.radius_range, n, rng, dtype)
    elev = torch.deg2rad(_uniform(*prior.elevation_range_deg, n, rng, dtype))
    azim = torch.deg2rad(_uniform(*prior.azimuth_range_deg, n, rng, dtype))

    up = torch.tensor(prior.up, dtype=dtype)
    up = up / torch.linalg.norm(up)
    # Orthonormal basis (u1, u2, up); u1 anchored to world x where possible.
    helper = torch.tensor([0.0, 0.0, 1.0], dtype=dtype)
    if torch.abs(up @ helper) > 0.999:
        helper = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    u1 = torch.cross(helper, up, dim=-1)
    u1 = u1 / torch.linalg.norm(u1)
    u2 = torch.cross(up, u1, dim=-1)

    horiz = torch.cos(elev)
    position = (
        radius.unsqueeze(-1)
        * (
            horiz.unsqueeze(-1) * torch.cos(azim).unsqueeze(-1) * u1
            + horiz.unsqueeze(-1) * torch.sin(azim).unsqueeze(-1) * u2
            + torch.sin(elev).unsqueeze(-1) * up
        )
    )
    lookat = torch.tensor(prior.lookat_mean, dtype=dtype) + prior.lookat_std * torch.randn(
        n, 3, generator=rng, dtype=dtype
    )
    # At (or extremely near) the poles the viewing direction is parallel to
    # ``up``; fall back to the in-plane basis vector there so the look-at
    # construction stays well defined.
    view = lookat - position
    view = view / torch.linalg.norm(view, dim=-1, keepdim=True)
    ups = up.expand(n, 3).clone()
    degenerate = (view @ up).abs() > 1.0 - 1e-7
    if degenerate.any():
        ups[degenerate] = u2
    rot = lookat_rotation(position, lookat, ups)
    r6 = torch.cat([rot[..., :, 0], rot[..., :, 1]], dim=-1)
    return torch.cat([r6, position], dim=-1)


def sample_pose(
    prior: PosePrior, rng: torch.Generator | None, dtype: torch.dtype = torch.float32
) -> CameraPose:
    """Single-pose convenience wrapper around :func:`sample_poses`."""
    return CameraPose(sample_poses(prior, 1, rng, dtype)[0])


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    near: float
    far: float


@dataclass
class RayBundle:
    """A batch of rays sharing one near/far interval."""

    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3) unit norm
    near: float
    far: float

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.near, self.far)


def camera_rays(
    pose_params: torch.Tensor,
    intr: Intrinsics,
    pixel_coords: torch.Tensor,
    near: float,
    far: float,
) -> RayBundle:
    """Back-project continuous pixel coordinates through a pinhole camera.

    Args:
        pose_params: (9,) or (N, 9) pose parameters (per-pixel poses when 2D).
        intr: camera intrinsics.
        pixel_coords: (N, 2) continuous (x, y) pixel coordinates.
        near, far: ray interval in world units, 0 <= near < far.

    Returns:
        RayBundle with one unit-norm ray per coordinate, order preserved.
    """
    if not (0 <= near < far):
        raise ValueError("require 0 <= near < far")
    dtype = pose_params.dtype
    coords = pixel_coords.to(dtype)
    x = (coords[:, 0] - intr.cx) / intr.fx
    y = -(coords[:, 1] - intr.cy) / intr.fy
    z = -torch.ones_like(x)
    dirs_cam = torch.stack([x, y, z], dim=-1)
    rot = rot6d_to_matrix(pose_params[..., :6])
    if pose_params.dim() == 1:
        dirs_world = dirs_cam @ rot.T
        origins = pose_params[6:].expand_as(dirs_world)
    else:
        dirs_world = torch.einsum("nij,nj->ni", rot, dirs_cam)
        origins = pose_params[:, 6:]
    dirs_world = dirs_world / torch.linalg.norm(dirs_world, dim=-1, keepdim=True)
    return RayBundle(origins, dirs_world, near, far)


def generate_rays(
    pose: CameraPose,
    intr: Intrinsics,
    pixel_coords: torch.Tensor,
    near: float,
    far: float,
) -> RayBundle:
    """Rays for a single camera pose; see :func:`camera_rays`."""
    return camera_rays(pose.params, intr, pixel_coords, near, far)


def rotation_geodesic_deg(r_a: torch.Tensor, r_b: torch.Tensor) -> torch.Tensor:
    """Geodesic angle in degrees between rotation matrices (..., 3, 3)."""
    rel = r_a @ r_b.transpose(-1, -2)
    tr = rel.diagonal(dim1=-2, dim2=-1).sum(-1)
    cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0)
    return torch.rad2deg(torch.arccos(cos))
