"""Patch discriminator, pose-regressing inversion network, and their losses.

The discriminator judges 16x16 dynamic patches; the inversion network maps
the 64x64 static patch of an image to the 9 pose parameters that (would)
have generated it. Both are plain feed-forward modules; all adversarial
coupling lives in the loss functions and the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .errors import ShapeMismatch
from .field import FieldConfig, render_patch
from .geometry import Intrinsics
from .sampling import DYNAMIC_PATCH_SIZE, STATIC_PATCH_SIZE, static_patch


class SpectralNorm(nn.Module):
    """Weight parametrization dividing by the exact top singular value.

    Power iteration is warm-started from a persistent left-singular-vector
    estimate and run to convergence (not a fixed single step), so the
    normalized weight's top singular value is 1 within ~1e-6 at every
    training step.
    """

    def __init__(self, weight: torch.Tensor, tol: float = 1e-7, max_iters: int = 200):
        super().__init__()
        self.tol = tol
        self.max_iters = max_iters
        w2d = weight.detach().reshape(weight.shape[0], -1)
        u = torch.randn(w2d.shape[0], dtype=weight.dtype, generator=torch.Generator().manual_seed(0))
        self.register_buffer("u", u / u.norm())

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        w2d = weight.reshape(weight.shape[0], -1)
        with torch.no_grad():
            u = self.u
            sigma_prev = 0.0
            for _ in range(self.max_iters):
                v = F.normalize(w2d.t() @ u, dim=0)
                u = F.normalize(w2d @ v, dim=0)
                sigma = float(u @ w2d @ v)
                if abs(sigma - sigma_prev) <= self.tol * max(abs(sigma), 1.0):
                    break
                sigma_prev = sigma
            self.u.copy_(u)
            v = F.normalize(w2d.t().detach() @ u, dim=0)
        sigma = u @ w2d @ v  # grad flows through w2d only
        return weight / sigma.clamp_min(1e-12)


def spectral_normalize(module: nn.Module) -> nn.Module:
    """Register spectral normalization on every conv/linear weight in ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            parametrize.register_parametrization(m, "weight", SpectralNorm(m.weight))
    return module


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    in_channels: int = 3


class Discriminator(nn.Module):
    """Convolutional classifier for 16x16 patches, one real logit per patch.

    Four stride-2 conv blocks shrink 16 -> 8 -> 4 -> 2 -> 1; instance
    normalization follows the middle blocks (the first block sees raw pixels
    and the last has 1x1 spatial extent, where instance statistics are
    undefined), and every weight is spectrally normalized.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig(),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.conv1 = nn.Conv2d(cfg.in_channels, b, 4, 2, 1)
        self.conv2 = nn.Conv2d(b, 2 * b, 4, 2, 1)
        self.norm2 = nn.InstanceNorm2d(2 * b, affine=True)
        self.conv3 = nn.Conv2d(2 * b, 4 * b, 4, 2, 1)
        self.norm3 = nn.InstanceNorm2d(4 * b, affine=True)
        self.conv4 = nn.Conv2d(4 * b, 8 * b, 4, 2, 1)
        self.logit = nn.Linear(8 * b, 1)
        spectral_normalize(self)
        if dtype != torch.float32:
            self.to(dtype)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """Patches (B, n, n, C) with values in [0, 1]; returns logits (B,)."""
        n = DYNAMIC_PATCH_SIZE
        if patches.dim() == 3:
            patches = patches.unsqueeze(0)
        if patches.dim() != 4 or patches.shape[1:] != (n, n, self.cfg.in_channels):
            raise ShapeMismatch(
                f"expected (B, {n}, {n}, {self.cfg.in_channels}) patches, got {tuple(patches.shape)}"
            )
        x = patches.permute(0, 3, 1, 2) * 2.0 - 1.0
        x = F.leaky_relu(self.conv1(x), 0.2)
        x = F.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        x = F.leaky_relu(self.norm3(self.conv3(x)), 0.2)
        x = F.leaky_relu(self.conv4(x), 0.2)
        return self.logit(x.flatten(1)).squeeze(-1)


def discriminator_forward(disc: Discriminator, patches: torch.Tensor) -> torch.Tensor:
    return disc(patches)


def d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the discriminating player, as a minimization.

    -mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake))), computed in the
    numerically stable softplus form (safe for |logit| up to 50 and beyond).
    """
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective -mean(log sigmoid(fake))."""
    return F.softplus(-fake_logits).mean()


@dataclass
class InversionConfig:
    patch_size: int = 8
    width: int = 256
    depth: int = 4
    heads: int = 4
    in_channels: int = 3
    translation_scale: float = 4.0  # divides translations in the 9-vector target


class InversionNet(nn.Module):
    """Patch-embedding transformer encoder regressing 9 pose parameters.

    The static-patch pixel grid is split into square tokens, linearly
    embedded with learned positional embeddings, passed through pre-norm
    transformer blocks, mean-pooled, and projected to a 9-vector
    (6D rotation + translation / translation_scale).
    """

    def __init__(self, cfg: InversionConfig = InversionConfig(),
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        n_tokens = (STATIC_PATCH_SIZE // p) ** 2
        self.embed = nn.Linear(p * p * cfg.in_channels, cfg.width)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, n_tokens, cfg.width))
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.width, nhead=cfg.heads, dim_feedforward=2 * cfg.width,
            dropout=0.0, batch_first=True, norm_first=True, activation="gelu",
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.depth,
                                             enable_nested_tensor=False)
        self.head = nn.Linear(cfg.width, 9)
        if dtype != torch.float32:
            self.to(dtype)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """Static patches (B, 64, 64, C) in [0, 1] -> normalized 9-vectors (B, 9)."""
        s = STATIC_PATCH_SIZE
        if patches.dim() == 3:
            patches = patches.unsqueeze(0)
        if patches.dim() != 4 or patches.shape[1:] != (s, s, self.cfg.in_channels):
            raise ShapeMismatch(
                f"expected (B, {s}, {s}, {self.cfg.in_channels}) patches, got {tuple(patches.shape)}"
            )
        p = self.cfg.patch_size
        b = patches.shape[0]
        x = patches * 2.0 - 1.0
        # (B, s, s, C) -> (B, tokens, p*p*C)
        x = x.reshape(b, s // p, p, s // p, p, -1).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (s // p) ** 2, -1)
        tokens = self.embed(x) + self.pos_embed
        tokens = self.encoder(tokens)
        return self.head(tokens.mean(dim=1))

    def pose_to_vec(self, pose_params: torch.Tensor) -> torch.Tensor:
        """Pose 9-vector(s) -> regression target with normalized translation."""
        r = pose_params[..., :6]
        t = pose_params[..., 6:] / self.cfg.translation_scale
        return torch.cat([r, t], dim=-1)

    def vec_to_pose(self, vec: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`pose_to_vec`."""
        r = vec[..., :6]
        t = vec[..., 6:] * self.cfg.translation_scale
        return torch.cat([r, t], dim=-1)


def inversion_forward(inv: InversionNet, patch: torch.Tensor) -> torch.Tensor:
    """Predicted pose 9-vector(s) in world units (translation denormalized)."""
    return inv.vec_to_pose(inv(patch))


def inversion_loss(
    inv: InversionNet,
    field,
    pose_params: torch.Tensor,
    intr: Intrinsics,
    cfg: FieldConfig,
    rng: torch.Generator | None,
    near: float,
    far: float,
) -> torch.Tensor:
    """Self-supervised pose-regression loss on freshly rendered static patches.

    For each sampled pose, the field renders the static-patch pixel grid
    (under no_grad: gradients reach the inversion parameters only) and the
    loss is the MSE between the predicted and true normalized 9-vectors.
    """
    spec = static_patch(intr.width, intr.height)
    with torch.no_grad():
        patches = torch.stack(
            [render_patch(field, p, intr, spec, cfg, rng, near, far).rgb
             for p in pose_params]
        )
    pred = inv(patches)
    target = inv.pose_to_vec(pose_params).detach()
    return F.mse_loss(pred, target)
