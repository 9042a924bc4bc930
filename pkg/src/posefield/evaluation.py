"""Image-quality metrics, trajectory-aligned pose error, test-pose estimation.

Pose accuracy for unposed reconstruction is only well-defined up to a global
similarity transform, so estimated poses are registered onto the reference
trajectory (Umeyama least-squares on camera centers) before per-pose
rotation/translation errors are measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adversarial import InversionNet, inversion_forward
from .errors import DegenerateConfiguration, ImageTooSmall, ShapeMismatch
from .field import FieldConfig, RadianceField, render_rays
from .geometry import Intrinsics, camera_rays, rot6d_to_matrix, rotation_geodesic_deg
from .sampling import extract_patch, static_patch

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable 'valid' convolution along both axes.
    pad = len(kernel) // 2
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, img)
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, out)
    return out


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Images are converted to grayscale as the channel mean; dynamic range 1,
    C1 = 0.01^2, C2 = 0.03^2.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    x = np.asarray(a, np.float64)
    y = np.asarray(b, np.float64)
    if x.ndim == 3:
        x = x.mean(axis=-1)
        y = y.mean(axis=-1)
    if min(x.shape) < 11:
        raise ImageTooSmall("ssim needs images of at least 11x11 pixels")
    k = _gaussian_kernel()
    c1, c2 = 0.01**2, 0.03**2
    mu_x = _filter2(x, k)
    mu_y = _filter2(y, k)
    xx = _filter2(x * x, k) - mu_x**2
    yy = _filter2(y * y, k) - mu_y**2
    xy = _filter2(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def align_poses(estimated_centers: np.ndarray, reference_centers: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity mapping estimated centers onto reference centers.

    Umeyama's closed form; requires at least 3 non-collinear centers.
    """
    est = np.asarray(estimated_centers, np.float64)
    ref = np.asarray(reference_centers, np.float64)
    if est.shape != ref.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DegenerateConfiguration("need matching (n, 3) center arrays")
    n = est.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 camera centers")
    mu_e = est.mean(0)
    mu_r = ref.mean(0)
    de = est - mu_e
    dr = ref - mu_r
    cov = dr.T @ de / n
    u, s, vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1.0):
        raise DegenerateConfiguration("camera centers are (near-)collinear")
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    rot = u @ d @ vt
    var_e = (de**2).sum() / n
    scale = float(np.trace(np.diag(s) @ d) / var_e)
    trans = mu_r - scale * rot @ mu_e
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


@dataclass
class PoseErrorReport:
    mean_rotation_deg: float
    mean_translation: float  # world units, after alignment
    rotation_deg: np.ndarray  # per pose
    translation: np.ndarray  # per pose
    alignment: SimilarityTransform

    def to_dict(self) -> dict:
        return {
            "mean_rotation_deg": self.mean_rotation_deg,
            "mean_translation": self.mean_translation,
            "rotation_deg": self.rotation_deg.tolist(),
            "translation": self.translation.tolist(),
            "alignment": {
                "scale": self.alignment.scale,
                "rotation": self.alignment.rotation.tolist(),
                "translation": self.alignment.translation.tolist(),
            },
            "translation_units": "world units after similarity alignment",
        }


def pose_errors(estimated: np.ndarray, reference: np.ndarray) -> PoseErrorReport:
    """Rotation/translation errors after similarity alignment.

    Args:
        estimated, reference: (n, 4, 4) camera-to-world matrices.

    Rotation error is the geodesic angle of R_est' R_ref^T with the alignment
    rotation composed onto the estimate; translation error is the Euclidean
    distance of aligned camera centers, in world units.
    """
    est = np.asarray(estimated, np.float64)
    ref = np.asarray(reference, np.float64)
    transform = align_poses(est[:, :3, 3], ref[:, :3, 3])
    centers = transform.apply(est[:, :3, 3])
    rot_est = transform.rotation @ est[:, :3, :3]
    rot_err = rotation_geodesic_deg(
        torch.from_numpy(rot_est), torch.from_numpy(ref[:, :3, :3])
    ).numpy()
    trans_err = np.linalg.norm(centers - ref[:, :3, 3], axis=-1)
    return PoseErrorReport(
        mean_rotation_deg=float(rot_err.mean()),
        mean_translation=float(trans_err.mean()),
        rotation_deg=rot_err,
        translation=trans_err,
        alignment=transform,
    )


def estimate_pose(
    image: torch.Tensor,
    inv: InversionNet,
    field: RadianceField | None,
    intr: Intrinsics,
    cfg: FieldConfig | None = None,
    near: float = 2.0,
    far: float = 6.0,
    refine_iters: int = 0,
    refine_rays: int = 1024,
    seed: int = 0,
) -> torch.Tensor:
    """Pose 9-vector for an image: inversion prediction, optionally refined.

    Refinement runs backtracking-line-searched gradient descent on the
    photometric error of a fixed random subset of static-patch rays against
    the frozen field, so the loss on those rays never increases.
    """
    spec = static_patch(intr.width, intr.height)
    patch = extract_patch(image, spec)
    with torch.no_grad():
        pose = inversion_forward(inv, patch.unsqueeze(0))[0]
    if refine_iters <= 0:
        return pose
    if field is None or cfg is None:
        raise ValueError("refinement requires the trained field and its config")

    gen = torch.Generator().manual_seed(seed)
    coords = spec.coords.reshape(-1, 2)
    sel = torch.randperm(coords.shape[0], generator=gen)[:refine_rays]
    coords = coords[sel]
    target = patch.reshape(-1, patch.shape[-1])[sel]

    def loss_at(p: torch.Tensor) -> torch.Tensor:
        rays = camera_rays(p, intr, coords, near, far)
        out = render_rays(field, rays, cfg, None)
        return ((out.rgb - target) ** 2).mean()

    pose = pose.clone().requires_grad_(True)
    step = 1e-2
    current = loss_at(pose)
    for _ in range(refine_iters):
        grad = torch.autograd.grad(current, pose)[0]
        with torch.no_grad():
            while step > 1e-8:
                candidate = (pose - step * grad).detach()
                cand_loss = loss_at(candidate)
                if cand_loss <= current:
                    break
                step *= 0.5
            else:
                break
        if cand_loss > current:
            break
        pose = candidate.requires_grad_(True)
        current = loss_at(pose)
        step = min(step * 2.0, 1.0)
    return pose.detach()


def select_test_views(poses: np.ndarray, k: int) -> list[int]:
    """Greedy farthest-point selection on viewing-direction angular distance.

    Seeded by the pose farthest from the mean viewing direction; deterministic.
    """
    poses = np.asarray(poses, np.float64)
    n = poses.shape[0]
    if k > n:
        raise ValueError("k exceeds the number of poses")
    dirs = -poses[:, :3, 2]  # camera forward axis (-z column of c2w rotation)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    mean = dirs.mean(0)
    mean = mean / max(np.linalg.norm(mean), 1e-12)
    angles = np.arccos(np.clip(dirs @ mean, -1, 1))
    selected = [int(np.argmax(angles))]
    while len(selected) < k:
        sel_dirs = dirs[selected]
        min_ang = np.arccos(np.clip(dirs @ sel_dirs.T, -1, 1)).min(axis=1)
        min_ang[selected] = -1.0
        selected.append(int(np.argmax(min_ang)))
    return selected
