"""Command-line surface: scene generation, training, rendering, evaluation,
pose estimation, and mesh export."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .config import TrainConfig, toy_config
from .datasets import add_image_noise, load_dataset, make_toy_scene, mask_mode
from .errors import MissingFile
from .evaluation import estimate_pose, pose_errors, psnr, select_test_views, ssim
from .field import render_image
from .geometry import rot6d_to_matrix, sample_poses
from .meshing import extract_mesh
from .training import MetricLogger, TrainState, run_schedule


def _save_png(path: Path, array: np.ndarray) -> None:
    arr = np.clip(array, 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)


@click.group()
def main():
    """Unposed-image radiance-field toolkit."""


@main.command("make-toy-scene")
@click.option("--shape", type=click.Choice(["sphere", "two-sphere", "cube"]), default="two-sphere")
@click.option("--n-views", default=50, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def make_toy_scene_cmd(shape, n_views, image_size, seed, out):
    """Render a procedural scene (images + reference poses) to OUT."""
    scene = make_toy_scene(shape=shape, n_views=n_views, image_size=image_size, seed=seed)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ds = scene.dataset
    frames = []
    for i in range(ds.n_views):
        rgba = np.concatenate([ds.images[i], ds.alphas[i]], axis=-1)
        name = f"images/view_{i:03d}.png"
        _save_png(out / name, rgba)
        frames.append({"file_path": name, "transform_matrix": ds.reference_poses[i].tolist()})
    meta = {
        "camera_angle_x": 2 * math.atan(0.5 * ds.intrinsics.width / ds.intrinsics.fx),
        "frames": frames,
    }
    (out / "transforms_train.json").write_text(json.dumps(meta, indent=1))
    click.echo(f"wrote {ds.n_views} views to {out}")


def _load_any(data: str, fmt: str):
    return load_dataset(data, fmt=fmt)


@main.command("train")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", type=click.Choice(["nerf_synthetic_json", "image_dir"]),
              default="nerf_synthetic_json", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config; defaults to the desk-scale toy preset.")
@click.option("--preset", type=click.Choice(["toy", "full"]), default="toy", show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", default=None, type=int)
@click.option("--image-noise-std", default=0.0, show_default=True)
@click.option("--mask-mode", "use_mask", is_flag=True, help="Train on 1-channel masks.")
@click.option("--no-adversarial", is_flag=True)
@click.option("--no-inversion", is_flag=True)
@click.option("--no-photometric", is_flag=True)
@click.option("--schedule", "schedule_kind", type=click.Choice(["interleaved", "plain"]),
              default="interleaved", show_default=True,
              help="'plain' folds the interleave cycles into one A block and one B block.")
@click.option("--resume", type=click.Path(exists=True), default=None)
def train_cmd(data, fmt, config_path, preset, out, seed, image_noise_std, use_mask,
              no_adversarial, no_inversion, no_photometric, schedule_kind, resume):
    """Train poses + radiance field on unposed images."""
    if config_path:
        config = TrainConfig.load(config_path)
    else:
        config = toy_config() if preset == "toy" else TrainConfig()
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    config = dataclasses.replace(
        config,
        ablation=dataclasses.replace(
            config.ablation,
            use_adversarial=not no_adversarial,
            use_inversion=not no_inversion,
            use_photometric=not no_photometric,
        ),
    )
    if schedule_kind == "plain":
        s = config.schedule
        config = dataclasses.replace(
            config,
            schedule=dataclasses.replace(
                s,
                phase_a_iters=s.phase_a_iters + s.interleave_cycles * s.iters_a_per_cycle,
                phase_b_iters=s.phase_b_iters + s.interleave_cycles * s.iters_b_per_cycle,
                interleave_cycles=0,
            ),
        )

    dataset = _load_any(data, fmt)
    if image_noise_std > 0:
        dataset = add_image_noise(dataset, image_noise_std, seed=config.seed)
    if use_mask:
        dataset = mask_mode(dataset)
    views = dataset.training_views(config.torch_dtype())

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    if resume:
        state = ckpt.load_checkpoint(resume, views, config)
    else:
        state = TrainState(views, config)
    logger = MetricLogger(out / "metrics.jsonl")
    run_schedule(state, config.schedule, views, config.prior, callbacks=(logger,))
    ckpt.save_checkpoint(state, out / "checkpoint.bin")
    click.echo(f"finished {state.iteration} steps; checkpoint at {out / 'checkpoint.bin'}")


def _load_state(checkpoint_path: str, data: str | None, fmt: str,
                use_mask: bool = False, noise_std: float = 0.0):
    header = ckpt.read_header(checkpoint_path)
    config = TrainConfig.from_dict(header["config"])
    if data is None:
        raise MissingFile("--data is required to rebuild the training views")
    dataset = load_dataset(data, fmt=fmt)
    if noise_std > 0:
        dataset = add_image_noise(dataset, noise_std, seed=config.seed)
    if use_mask:
        dataset = mask_mode(dataset)
    views = dataset.training_views(config.torch_dtype())
    return ckpt.load_checkpoint(checkpoint_path, views, config), dataset, config


@main.command("render")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", default="nerf_synthetic_json")
@click.option("--mask-mode", "use_mask", is_flag=True)
@click.option("--n-views", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def render_cmd(checkpoint_path, data, fmt, use_mask, n_views, seed, out):
    """Render novel views (RGB + depth PNGs) along a prior-sampled orbit."""
    state, _, config = _load_state(checkpoint_path, data, fmt, use_mask)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(seed)
    poses = sample_poses(config.prior, n_views, gen, state.dtype)
    for i, pose in enumerate(poses):
        result = render_image(state.field, pose, state.intrinsics, state.field_cfg,
                              config.near, config.far)
        _save_png(out / f"rgb_{i:03d}.png", result.rgb.numpy())
        depth = result.depth.numpy()
        span = max(depth.max() - depth.min(), 1e-8)
        _save_png(out / f"depth_{i:03d}.png", (depth - depth.min()) / span)
    click.echo(f"rendered {n_views} views to {out}")


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", default="nerf_synthetic_json")
@click.option("--mask-mode", "use_mask", is_flag=True)
@click.option("--n-test-views", default=8, show_default=True)
@click.option("--refine-iters", default=20, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def eval_cmd(checkpoint_path, data, fmt, use_mask, n_test_views, refine_iters, out):
    """Image-quality metrics on held-out-style views plus the pose-error report."""
    state, dataset, config = _load_state(checkpoint_path, data, fmt, use_mask)
    report: dict = {"per_view": {}}
    if dataset.reference_poses is not None:
        idx = select_test_views(dataset.reference_poses, min(n_test_views, dataset.n_views))
        per_view = {}
        for i in idx:
            image = torch.from_numpy(dataset.images[i]).to(state.dtype)
            pose = estimate_pose(image, state.inv, state.field, state.intrinsics,
                                 state.field_cfg, config.near, config.far,
                                 refine_iters=refine_iters)
            result = render_image(state.field, pose, state.intrinsics, state.field_cfg,
                                  config.near, config.far)
            rendered = result.rgb.numpy()
            per_view[str(i)] = {
                "psnr": psnr(rendered, dataset.images[i]),
                "ssim": ssim(rendered, dataset.images[i]),
            }
        report["per_view"] = per_view
        report["means"] = {
            "psnr": float(np.mean([v["psnr"] for v in per_view.values()])),
            "ssim": float(np.mean([v["ssim"] for v in per_view.values()])),
        }
        est = np.stack([
            _pose_matrix(state.pose_table[i].detach()) for i in range(dataset.n_views)
        ])
        report["pose_error_report"] = pose_errors(est, dataset.reference_poses).to_dict()
    Path(out).write_text(json.dumps(report, indent=1))
    click.echo(f"report written to {out}")


def _pose_matrix(params: torch.Tensor) -> np.ndarray:
    mat = np.eye(4)
    mat[:3, :3] = rot6d_to_matrix(params[:6]).numpy()
    mat[:3, 3] = params[6:].numpy()
    return mat


@main.command("estimate-pose")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", default="nerf_synthetic_json")
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--refine-iters", default=0, show_default=True)
def estimate_pose_cmd(checkpoint_path, data, fmt, image_path, refine_iters):
    """Predict the camera pose of a single image with the inversion network."""
    state, _, config = _load_state(checkpoint_path, data, fmt)
    arr = np.asarray(Image.open(image_path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    arr = arr[..., : state.images.shape[-1]]
    image = torch.from_numpy(arr).to(state.dtype)
    pose = estimate_pose(image, state.inv, state.field, state.intrinsics,
                         state.field_cfg, config.near, config.far, refine_iters=refine_iters)
    click.echo(json.dumps({
        "pose_params": pose.tolist(),
        "camera_to_world": _pose_matrix(pose).tolist(),
    }, indent=1))


@main.command("extract-mesh")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--format", "fmt", default="nerf_synthetic_json")
@click.option("--mask-mode", "use_mask", is_flag=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--threshold", default=10.0, show_default=True,
              help="Density iso-level (post-softplus units); default is arbitrary.")
@click.option("--bounds", default=1.8, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def extract_mesh_cmd(checkpoint_path, data, fmt, use_mask, resolution, threshold, bounds, out):
    """Marching-cubes OBJ export of the learned density iso-surface."""
    state, _, _ = _load_state(checkpoint_path, data, fmt, use_mask)
    mesh = extract_mesh(state.field, resolution, threshold, (-bounds, bounds))
    mesh.save_obj(out)
    click.echo(f"mesh with {len(mesh.vertices)} vertices written to {out}")


if __name__ == "__main__":
    main()
