"""Run configuration: one nested document fully determines a training run.

Every tunable default (pose prior, field architecture, schedule, optimizer
learning rates, patch sampling, annealing) appears explicitly here, so a
saved YAML config plus a seed reproduces a run exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import torch
import yaml

from .adversarial import DiscriminatorConfig, InversionConfig
from .field import FieldConfig
from .geometry import PosePrior


@dataclass
class ScheduleConfig:
    """Interleaved two-phase schedule: A, then (A B) cycles, then B."""

    phase_a_iters: int = 10000
    interleave_cycles: int = 4
    iters_a_per_cycle: int = 1000
    iters_b_per_cycle: int = 1000
    phase_b_iters: int = 10000
    lambda_reg: float = 0.1
    gan_pose_batch: int = 8
    inversion_pose_batch: int = 2
    rays_per_b_step: int = 1024
    # Inversion-network training economy: with a nonzero buffer size, each
    # A step renders `inversion_pose_batch` fresh static patches into a
    # replay buffer and trains the network on `inversion_train_batch`
    # samples drawn from it, instead of only on the fresh renders. A nonzero
    # `inversion_render_samples` renders those patches with that many
    # depth samples (half coarse, half importance) instead of the field's
    # full budget; pose supervision tolerates the cheaper renders.
    inversion_buffer_size: int = 0
    inversion_train_batch: int = 8
    inversion_render_samples: int = 0

    def __post_init__(self):
        counts = (self.phase_a_iters, self.interleave_cycles, self.iters_a_per_cycle,
                  self.iters_b_per_cycle, self.phase_b_iters)
        if any(c < 0 for c in counts) or self.lambda_reg < 0:
            raise ValueError("schedule counts and lambda must be nonnegative")

    @property
    def total_steps(self) -> int:
        return (self.phase_a_iters
                + self.interleave_cycles * (self.iters_a_per_cycle + self.iters_b_per_cycle)
                + self.phase_b_iters)

    @property
    def total_a_iters(self) -> int:
        return self.phase_a_iters + self.interleave_cycles * self.iters_a_per_cycle


@dataclass
class SamplingOptions:
    dynamic_scale_min: float = 1.0
    dynamic_scale_max: float | None = None  # None -> 0.9 * min(W, H) / 16
    intrinsics_start_factor: float = 0.25
    intrinsics_ramp_fraction: float = 0.5   # of the total phase-A iterations


@dataclass
class OptimizerConfig:
    lr_field: float = 5e-4       # rms-style
    lr_discriminator: float = 1e-4  # rms-style
    lr_inversion: float = 1e-4   # adam-style
    lr_pose: float = 5e-3        # adam-style


@dataclass
class AblationFlags:
    use_adversarial: bool = True
    use_inversion: bool = True
    use_photometric: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    dtype: str = "float32"
    near: float = 2.0
    far: float = 6.0
    prior: PosePrior = dc_field(default_factory=PosePrior)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    discriminator: DiscriminatorConfig = dc_field(default_factory=DiscriminatorConfig)
    inversion: InversionConfig = dc_field(default_factory=InversionConfig)
    schedule: ScheduleConfig = dc_field(default_factory=ScheduleConfig)
    sampling: SamplingOptions = dc_field(default_factory=SamplingOptions)
    optim: OptimizerConfig = dc_field(default_factory=OptimizerConfig)
    ablation: AblationFlags = dc_field(default_factory=AblationFlags)

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        def build(cls, d):
            kwargs = {}
            for f in dataclasses.fields(cls):
                if f.name not in d:
                    continue
                v = d[f.name]
                if dataclasses.is_dataclass(f.type) or f.name in _SECTIONS:
                    kwargs[f.name] = build(_SECTIONS[f.name], v)
                elif isinstance(v, list):
                    kwargs[f.name] = tuple(v)
                else:
                    kwargs[f.name] = v
            return cls(**kwargs)

        return build(TrainConfig, data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @staticmethod
    def load(path: str | Path) -> "TrainConfig":
        return TrainConfig.from_dict(yaml.safe_load(Path(path).read_text()))


_SECTIONS = {
    "prior": PosePrior,
    "field": FieldConfig,
    "discriminator": DiscriminatorConfig,
    "inversion": InversionConfig,
    "schedule": ScheduleConfig,
    "sampling": SamplingOptions,
    "optim": OptimizerConfig,
    "ablation": AblationFlags,
}


def toy_config(seed: int = 0) -> TrainConfig:
    """Desk-scale defaults for the procedural toy scenes (64x64 images)."""
    return TrainConfig(
        seed=seed,
        near=2.0,
        far=6.5,
        field=FieldConfig(pos_levels=6, dir_levels=0, width=64, depth=4,
                          skip_layers=(2,), n_coarse=32, n_fine=32),
        discriminator=DiscriminatorConfig(base_channels=32),
        inversion=InversionConfig(width=128, depth=2, heads=4),
        schedule=ScheduleConfig(phase_a_iters=1200, interleave_cycles=3,
                                iters_a_per_cycle=150, iters_b_per_cycle=250,
                                phase_b_iters=1200, gan_pose_batch=8,
                                inversion_pose_batch=2,
                                inversion_buffer_size=384,
                                inversion_train_batch=8,
                                inversion_render_samples=32),
    )
