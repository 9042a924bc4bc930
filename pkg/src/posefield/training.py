"""Two-phase training: adversarial pose estimation (A), photometric
refinement (B), interleaved as A -> AB...AB -> B.

A phase-A step runs, in order: a discriminator update on real vs rendered
dynamic patches, a generator (field) update, an inversion-network update on
freshly rendered static patches, and one gradient step pulling each
per-image pose toward the inversion network's prediction. A phase-B step is
one joint gradient step on the hybrid loss (photometric + pose-consistency
regularizer) with respect to field parameters and the pose table.

Four independent optimizers keep the updates from cross-contaminating:
rms-style for field and discriminator, adam-style for the inversion network
and the pose table.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import torch
import torch.nn.functional as F

from .adversarial import (
    Discriminator,
    InversionNet,
    d_loss,
    g_loss,
    inversion_loss,
)
from .config import ScheduleConfig, TrainConfig
from .datasets import TrainingViews
from .errors import NaNAbort
from .field import FieldConfig, RadianceField, render_patch, render_rays
from .geometry import IDENTITY_ROT6D, Intrinsics, PosePrior, camera_rays, sample_poses
from .sampling import (
    default_scale_range,
    dynamic_patch,
    extract_patch,
    intrinsics_schedule,
    static_patch,
)


class TrainState:
    """Everything a run owns: modules, pose table, optimizers, counters, rng."""

    def __init__(self, views: TrainingViews, config: TrainConfig):
        self.config = config
        self.views = views
        self.intrinsics = views.intrinsics
        self.prior = config.prior
        self.dtype = config.torch_dtype()
        n, h, w, c = views.images.shape
        self.images = views.images.to(self.dtype)

        self.field_cfg = dataclasses.replace(
            config.field,
            channels=c,
            background=tuple(config.field.background[:c]) if len(config.field.background) >= c
            else (config.field.background[0],) * c,
        )
        disc_cfg = dataclasses.replace(config.discriminator, in_channels=c)
        inv_cfg = dataclasses.replace(
            config.inversion, in_channels=c,
            translation_scale=float(config.prior.radius_range[1]),
        )

        torch.manual_seed(config.seed)
        self.field = RadianceField(self.field_cfg, dtype=self.dtype)
        self.disc = Discriminator(disc_cfg, dtype=self.dtype)
        self.inv = InversionNet(inv_cfg, dtype=self.dtype)
        identity = torch.tensor([*IDENTITY_ROT6D, 0.0, 0.0, 0.0], dtype=self.dtype)
        self.pose_table = torch.nn.Parameter(identity.repeat(n, 1))

        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        self.a_steps_done = 0
        self.inv_version = 0
        self._inv_cache: tuple[int, torch.Tensor] | None = None

        self.scale_range = (
            config.sampling.dynamic_scale_min,
            config.sampling.dynamic_scale_max
            if config.sampling.dynamic_scale_max is not None
            else default_scale_range(w, h)[1],
        )
        self.ramp_iters = max(
            1, int(config.sampling.intrinsics_ramp_fraction * config.schedule.total_a_iters)
        )
        spec = static_patch(w, h)
        self.real_static = torch.stack(
            [extract_patch(img, spec) for img in self.images]
        )
        cap = config.schedule.inversion_buffer_size
        side = self.real_static.shape[1]
        self.inv_buffer_patches = torch.zeros(cap, side, side, c, dtype=self.dtype)
        self.inv_buffer_poses = torch.zeros(cap, 9, dtype=self.dtype)
        self.inv_buffer_len = 0
        self.inv_buffer_pos = 0
        self.optimizers = configure_optimizers(self)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    def inv_predictions(self) -> torch.Tensor:
        """Cached inversion-network 9-vector predictions (normalized) for all
        real images; recomputed whenever the inversion network has stepped."""
        if self._inv_cache is None or self._inv_cache[0] != self.inv_version:
            with torch.no_grad():
                pred = self.inv(self.real_static)
            self._inv_cache = (self.inv_version, pred)
        return self._inv_cache[1]


def configure_optimizers(state: TrainState) -> dict[str, torch.optim.Optimizer]:
    """Four independent adaptive optimizers: field, discriminator, inversion, poses."""
    lr = state.config.optim
    return {
        "field": torch.optim.RMSprop(state.field.parameters(), lr=lr.lr_field),
        "disc": torch.optim.RMSprop(state.disc.parameters(), lr=lr.lr_discriminator),
        "inversion": torch.optim.Adam(state.inv.parameters(), lr=lr.lr_inversion),
        "pose": torch.optim.Adam([state.pose_table], lr=lr.lr_pose),
    }


def _check_finite(substep: str, iteration: int, *param_sources) -> None:
    for src in param_sources:
        params = src.parameters() if hasattr(src, "parameters") else [src]
        for p in params:
            if not torch.isfinite(p).all():
                raise NaNAbort(substep, iteration)


def photometric_loss(
    field: RadianceField,
    pose_table: torch.Tensor,
    images: torch.Tensor,
    ray_batch: tuple[torch.Tensor, torch.Tensor],
    cfg: FieldConfig,
    intr: Intrinsics,
    near: float,
    far: float,
    rng: torch.Generator | None,
) -> torch.Tensor:
    """MSE between rendered and true pixel colors over a ray batch.

    ``ray_batch`` is (image_indices (R,), integer pixel coords (R, 2) as x, y).
    """
    img_idx, pixels = ray_batch
    pose_rows = pose_table[img_idx]
    rays = camera_rays(pose_rows, intr, pixels.to(pose_table.dtype), near, far)
    out = render_rays(field, rays, cfg, rng)
    gt = images[img_idx, pixels[:, 1], pixels[:, 0]]
    return F.mse_loss(out.rgb, gt)


def pose_regularizer(
    pose_table: torch.Tensor, inv: InversionNet, inv_pred_vec: torch.Tensor
) -> torch.Tensor:
    """(1/n) sum_i ||vec(phi_i) - E(I_i)||^2 in normalized pose coordinates."""
    diff = inv.pose_to_vec(pose_table) - inv_pred_vec.detach()
    return (diff**2).sum(-1).mean()


def hybrid_loss(
    field: RadianceField,
    pose_table: torch.Tensor,
    images: torch.Tensor,
    ray_batch: tuple[torch.Tensor, torch.Tensor],
    inv: InversionNet,
    lambda_reg: float,
    cfg: FieldConfig,
    intr: Intrinsics,
    near: float,
    far: float,
    rng: torch.Generator | None,
    inv_pred_vec: torch.Tensor | None = None,
) -> torch.Tensor:
    """Photometric loss plus lambda x mean pose-consistency penalty.

    The inversion network's predictions are constant targets: no gradient
    reaches its parameters. With lambda 0 this is exactly the photometric
    loss (the regularizer is not evaluated at all).
    """
    photo = photometric_loss(field, pose_table, images, ray_batch, cfg, intr, near, far, rng)
    if lambda_reg == 0.0:
        return photo
    if inv_pred_vec is None:
        spec = static_patch(intr.width, intr.height)
        with torch.no_grad():
            inv_pred_vec = inv(torch.stack([extract_patch(img, spec) for img in images]))
    return photo + lambda_reg * pose_regularizer(pose_table, inv, inv_pred_vec)


def _buffered_inversion_loss(
    state: TrainState,
    schedule: ScheduleConfig,
    poses: torch.Tensor,
    intr: Intrinsics,
    render_cfg: FieldConfig,
) -> torch.Tensor:
    """Inversion loss over a replay buffer of rendered (patch, pose) pairs.

    Fresh static patches for ``poses`` are rendered (gradient-free) and
    written into the ring buffer, then the network trains on a batch drawn
    uniformly from the buffer. This decouples the network's sample budget
    from the per-step render cost.
    """
    cfg = state.config
    spec = static_patch(state.intrinsics.width, state.intrinsics.height)
    cap = schedule.inversion_buffer_size
    with torch.no_grad():
        for row in poses:
            patch = render_patch(
                state.field, row, intr, spec, render_cfg, state.generator,
                cfg.near, cfg.far,
            ).rgb
            state.inv_buffer_patches[state.inv_buffer_pos] = patch
            state.inv_buffer_poses[state.inv_buffer_pos] = row
            state.inv_buffer_pos = (state.inv_buffer_pos + 1) % cap
            state.inv_buffer_len = min(state.inv_buffer_len + 1, cap)
    idx = torch.randint(state.inv_buffer_len, (schedule.inversion_train_batch,),
                        generator=state.generator)
    pred = state.inv(state.inv_buffer_patches[idx])
    target = state.inv.pose_to_vec(state.inv_buffer_poses[idx])
    return F.mse_loss(pred, target)


def _render_dynamic_batch(state: TrainState, poses: torch.Tensor, intr: Intrinsics) -> torch.Tensor:
    cfg = state.config
    patches = []
    for row in poses:
        spec = dynamic_patch(intr.width, intr.height, state.generator, state.scale_range)
        patches.append(
            render_patch(state.field, row, intr, spec, state.field_cfg,
                         state.generator, cfg.near, cfg.far).rgb
        )
    return torch.stack(patches)


def phase_a_step(
    state: TrainState,
    schedule: ScheduleConfig,
    prior: PosePrior,
    intr: Intrinsics,
) -> dict:
    """One adversarial-estimation step: D, G, E, then pose-table updates."""
    cfg = state.config
    flags = cfg.ablation
    factor = intrinsics_schedule(
        state.a_steps_done, state.ramp_iters, cfg.sampling.intrinsics_start_factor
    )
    intr_s = intr.scaled(factor)
    gen = state.generator
    it = state.iteration
    metrics: dict = {"iter": it, "phase": "A", "intr_factor": factor,
                     "d_loss": None, "g_loss": None, "e_loss": None, "pose_loss": None}
    t0 = time.perf_counter()

    if flags.use_adversarial:
        # (1) Discriminator update on real vs freshly rendered fake patches.
        poses = sample_poses(prior, schedule.gan_pose_batch, gen, state.dtype)
        with torch.no_grad():
            fake = _render_dynamic_batch(state, poses, intr_s)
        idx = torch.randint(state.n_views, (schedule.gan_pose_batch,), generator=gen)
        real = torch.stack(
            [
                extract_patch(
                    state.images[i],
                    dynamic_patch(intr.width, intr.height, gen, state.scale_range),
                )
                for i in idx
            ]
        )
        loss_d = d_loss(state.disc(real), state.disc(fake))
        state.optimizers["disc"].zero_grad()
        loss_d.backward()
        state.optimizers["disc"].step()
        _check_finite("d_update", it, state.disc)
        metrics["d_loss"] = float(loss_d.detach())

        # (2) Generator (field) update on fresh fake patches.
        poses = sample_poses(prior, schedule.gan_pose_batch, gen, state.dtype)
        for p in state.disc.parameters():
            p.requires_grad_(False)
        fake = _render_dynamic_batch(state, poses, intr_s)
        loss_g = g_loss(state.disc(fake))
        state.optimizers["field"].zero_grad()
        loss_g.backward()
        state.optimizers["field"].step()
        for p in state.disc.parameters():
            p.requires_grad_(True)
        _check_finite("g_update", it, state.field)
        metrics["g_loss"] = float(loss_g.detach())

    if flags.use_inversion:
        # (3) Inversion-network update; the field is frozen inside the loss.
        poses = sample_poses(prior, schedule.inversion_pose_batch, gen, state.dtype)
        render_cfg = state.field_cfg
        if schedule.inversion_render_samples > 0:
            half = max(1, schedule.inversion_render_samples // 2)
            render_cfg = dataclasses.replace(render_cfg, n_coarse=half, n_fine=half)
        if schedule.inversion_buffer_size > 0:
            loss_e = _buffered_inversion_loss(state, schedule, poses, intr_s, render_cfg)
        else:
            loss_e = inversion_loss(
                state.inv, state.field, poses, intr_s, render_cfg, gen, cfg.near, cfg.far
            )
        state.optimizers["inversion"].zero_grad()
        loss_e.backward()
        state.optimizers["inversion"].step()
        state.inv_version += 1
        _check_finite("e_update", it, state.inv)
        metrics["e_loss"] = float(loss_e.detach())

        # (4) Pose-table step toward the (frozen) inversion predictions.
        pred = state.inv_predictions()
        loss_p = pose_regularizer(state.pose_table, state.inv, pred)
        state.optimizers["pose"].zero_grad()
        loss_p.backward()
        state.optimizers["pose"].step()
        _check_finite("pose_update", it, state.pose_table)
        metrics["pose_loss"] = float(loss_p.detach())

    state.a_steps_done += 1
    state.iteration += 1
    metrics["wall_time"] = time.perf_counter() - t0
    return metrics


def phase_b_step(state: TrainState, schedule: ScheduleConfig) -> dict:
    """One joint refinement step on the hybrid loss (field + pose table)."""
    cfg = state.config
    flags = cfg.ablation
    gen = state.generator
    it = state.iteration
    n, h, w = state.images.shape[:3]
    metrics: dict = {"iter": it, "phase": "B", "intr_factor": 1.0,
                     "b_loss": None, "photo_loss": None}
    t0 = time.perf_counter()

    loss = None
    if flags.use_photometric:
        img_idx = torch.randint(n, (schedule.rays_per_b_step,), generator=gen)
        xs = torch.randint(w, (schedule.rays_per_b_step,), generator=gen)
        ys = torch.randint(h, (schedule.rays_per_b_step,), generator=gen)
        photo = photometric_loss(
            state.field, state.pose_table, state.images,
            (img_idx, torch.stack([xs, ys], dim=-1)),
            state.field_cfg, state.intrinsics, cfg.near, cfg.far, gen,
        )
        metrics["photo_loss"] = float(photo.detach())
        loss = photo
    if flags.use_inversion and schedule.lambda_reg > 0:
        reg = schedule.lambda_reg * pose_regularizer(
            state.pose_table, state.inv, state.inv_predictions()
        )
        loss = reg if loss is None else loss + reg

    if loss is not None:
        state.optimizers["field"].zero_grad()
        state.optimizers["pose"].zero_grad()
        loss.backward()
        if flags.use_photometric:
            state.optimizers["field"].step()
        state.optimizers["pose"].step()
        _check_finite("b_update", it, state.field, state.pose_table)
        metrics["b_loss"] = float(loss.detach())

    state.iteration += 1
    metrics["wall_time"] = time.perf_counter() - t0
    return metrics


def step_phase(schedule: ScheduleConfig, iteration: int) -> str:
    """Phase letter ('A' or 'B') of a global step index under the schedule."""
    if iteration < schedule.phase_a_iters:
        return "A"
    i = iteration - schedule.phase_a_iters
    cycle_len = schedule.iters_a_per_cycle + schedule.iters_b_per_cycle
    if schedule.interleave_cycles > 0 and i < schedule.interleave_cycles * cycle_len:
        return "A" if (i % cycle_len) < schedule.iters_a_per_cycle else "B"
    return "B"


def run_schedule(
    state: TrainState,
    schedule: ScheduleConfig,
    views: TrainingViews,
    prior: PosePrior,
    callbacks: tuple = (),
) -> TrainState:
    """Run (or resume) the full A -> AB...AB -> B schedule to completion."""
    total = schedule.total_steps
    intr = views.intrinsics
    while state.iteration < total:
        if step_phase(schedule, state.iteration) == "A":
            metrics = phase_a_step(state, schedule, prior, intr)
        else:
            metrics = phase_b_step(state, schedule)
        for cb in callbacks:
            cb(metrics, state)
    return state


class MetricLogger:
    """Append-only JSON-lines metric log, one record per training step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, metrics: dict, state: TrainState) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(metrics) + "\n")
