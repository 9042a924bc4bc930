"""Two-phase training loop: losses, optimizer isolation, schedule, determinism."""

import copy
import dataclasses
import hashlib

import pytest
import torch

from posefield.config import (
    AblationFlags,
    FieldConfig,
    OptimizerConfig,
    ScheduleConfig,
    TrainConfig,
)
from posefield.adversarial import InversionConfig
from posefield.adversarial import DiscriminatorConfig
from posefield.datasets import make_toy_scene
from posefield.errors import NaNAbort
from posefield.field import RadianceField
from posefield.geometry import PosePrior
from posefield.training import (
    MetricLogger,
    TrainState,
    configure_optimizers,
    hybrid_loss,
    phase_a_step,
    phase_b_step,
    photometric_loss,
    pose_regularizer,
    run_schedule,
    step_phase,
)


def tiny_config(seed=0, **schedule_kwargs):
    sched = dict(phase_a_iters=2, interleave_cycles=1, iters_a_per_cycle=1,
                 iters_b_per_cycle=1, phase_b_iters=2, gan_pose_batch=2,
                 inversion_pose_batch=1, rays_per_b_step=32)
    sched.update(schedule_kwargs)
    return TrainConfig(
        seed=seed,
        near=2.0,
        far=6.5,
        field=FieldConfig(pos_levels=2, dir_levels=0, width=8, depth=2, skip_layers=(),
                          n_coarse=4, n_fine=4),
        discriminator=DiscriminatorConfig(base_channels=4),
        inversion=InversionConfig(width=16, depth=1, heads=2),
        schedule=ScheduleConfig(**sched),
    )


def tiny_state(seed=0, n_views=3, **schedule_kwargs):
    scene = make_toy_scene(shape="sphere", n_views=n_views, image_size=64, seed=seed)
    views = scene.dataset.training_views()
    return TrainState(views, tiny_config(seed=seed, **schedule_kwargs))


def checksum(module_or_tensor):
    if torch.is_tensor(module_or_tensor):
        blobs = [module_or_tensor.detach()]
    else:
        blobs = [p.detach() for p in module_or_tensor.parameters()]
    h = hashlib.sha256()
    for b in blobs:
        h.update(b.numpy().tobytes())
    return h.hexdigest()


class TestPhotometricLoss:
    def test_zero_on_perfect_images(self):
        state = tiny_state()
        cfg = state.config
        idx = torch.zeros(16, dtype=torch.long)
        g = torch.Generator().manual_seed(0)
        pixels = torch.stack([torch.randint(64, (16,), generator=g),
                              torch.randint(64, (16,), generator=g)], dim=-1)
        with torch.no_grad():
            from posefield.geometry import camera_rays
            from posefield.field import render_rays

            rays = camera_rays(state.pose_table[idx], state.intrinsics,
                               pixels.float(), cfg.near, cfg.far)
            rendered = render_rays(state.field, rays, state.field_cfg, None).rgb
        images = state.images.clone()
        images[idx, pixels[:, 1], pixels[:, 0]] = rendered
        loss = photometric_loss(state.field, state.pose_table, images, (idx, pixels),
                                state.field_cfg, state.intrinsics, cfg.near, cfg.far, None)
        assert float(loss.detach()) < 1e-10

    def test_permutation_invariant(self):
        state = tiny_state()
        cfg = state.config
        g = torch.Generator().manual_seed(1)
        idx = torch.randint(state.n_views, (16,), generator=g)
        pixels = torch.stack([torch.randint(64, (16,), generator=g),
                              torch.randint(64, (16,), generator=g)], dim=-1)
        perm = torch.randperm(16, generator=g)
        a = photometric_loss(state.field, state.pose_table, state.images, (idx, pixels),
                             state.field_cfg, state.intrinsics, cfg.near, cfg.far, None)
        b = photometric_loss(state.field, state.pose_table, state.images,
                             (idx[perm], pixels[perm]),
                             state.field_cfg, state.intrinsics, cfg.near, cfg.far, None)
        assert abs(float(a) - float(b)) < 1e-6


class TestHybridLoss:
    def _batch(self, state, n=16, seed=2):
        g = torch.Generator().manual_seed(seed)
        idx = torch.randint(state.n_views, (n,), generator=g)
        pixels = torch.stack([torch.randint(64, (n,), generator=g),
                              torch.randint(64, (n,), generator=g)], dim=-1)
        return idx, pixels

    def test_lambda_zero_equals_photometric(self):
        state = tiny_state()
        cfg = state.config
        batch = self._batch(state)
        photo = photometric_loss(state.field, state.pose_table, state.images, batch,
                                 state.field_cfg, state.intrinsics, cfg.near, cfg.far, None)
        hybrid = hybrid_loss(state.field, state.pose_table, state.images, batch,
                             state.inv, 0.0, state.field_cfg, state.intrinsics,
                             cfg.near, cfg.far, None)
        assert float(photo) == float(hybrid)

    def test_regularizer_zero_when_table_matches_predictions(self):
        state = tiny_state()
        pred = state.inv_predictions()
        table = state.inv.vec_to_pose(pred)
        assert float(pose_regularizer(table, state.inv, pred)) < 1e-12

    def test_lambda_linearity(self):
        state = tiny_state()
        cfg = state.config
        batch = self._batch(state)
        pred = state.inv_predictions()

        def at(lam):
            return float(hybrid_loss(state.field, state.pose_table, state.images, batch,
                                     state.inv, lam, state.field_cfg, state.intrinsics,
                                     cfg.near, cfg.far, None, inv_pred_vec=pred))

        base = at(0.0)
        reg1 = at(1.0) - base
        reg2 = at(2.0) - base
        assert abs(reg2 - 2 * reg1) < 1e-6 * max(abs(reg1), 1.0)

    def test_analytic_regularizer_gradient(self):
        # d/d(phi) of the regularizer is (2/n) J^T (vec(phi) - pred) where J
        # is the pose-to-vec Jacobian (identity on rotation, 1/scale on
        # translation components).
        torch.manual_seed(0)
        from posefield.adversarial import InversionNet

        inv = InversionNet(InversionConfig(width=16, depth=1, heads=2,
                                           translation_scale=4.0), dtype=torch.float64)
        g = torch.Generator().manual_seed(3)
        table = torch.randn(5, 9, generator=g, dtype=torch.float64, requires_grad=True)
        pred = torch.randn(5, 9, generator=g, dtype=torch.float64)
        loss = pose_regularizer(table, inv, pred)
        (grad,) = torch.autograd.grad(loss, table)
        jac = torch.ones(9, dtype=torch.float64)
        jac[6:] = 1.0 / 4.0
        want = 2.0 / 5.0 * (inv.pose_to_vec(table.detach()) - pred) * jac
        assert float((grad - want).abs().max()) < 1e-9

    def test_no_gradient_to_inversion_network(self):
        state = tiny_state()
        cfg = state.config
        batch = self._batch(state)
        loss = hybrid_loss(state.field, state.pose_table, state.images, batch,
                           state.inv, 0.5, state.field_cfg, state.intrinsics,
                           cfg.near, cfg.far, None)
        loss.backward()
        assert all(p.grad is None or p.grad.abs().sum() == 0 for p in state.inv.parameters())
        assert state.pose_table.grad is not None


class TestPhaseSteps:
    def test_metrics_record_four_sub_losses(self):
        state = tiny_state()
        m = phase_a_step(state, state.config.schedule, state.prior, state.intrinsics)
        for key in ("d_loss", "g_loss", "e_loss", "pose_loss"):
            assert isinstance(m[key], float)
        assert m["phase"] == "A"

    def test_b_step_metrics(self):
        state = tiny_state()
        m = phase_b_step(state, state.config.schedule)
        assert isinstance(m["b_loss"], float) and isinstance(m["photo_loss"], float)
        assert m["phase"] == "B"

    def test_zero_learning_rates_freeze_everything(self):
        scene = make_toy_scene(shape="sphere", n_views=2, image_size=64, seed=0)
        cfg = tiny_config()
        cfg = dataclasses.replace(cfg, optim=OptimizerConfig(0.0, 0.0, 0.0, 0.0))
        state = TrainState(scene.dataset.training_views(), cfg)
        sums = {name: checksum(x) for name, x in
                (("field", state.field), ("disc", state.disc), ("inv", state.inv),
                 ("pose", state.pose_table))}
        phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        phase_b_step(state, cfg.schedule)
        assert sums == {name: checksum(x) for name, x in
                        (("field", state.field), ("disc", state.disc), ("inv", state.inv),
                         ("pose", state.pose_table))}

    def test_a_step_without_inversion_touches_only_gan_players(self):
        scene = make_toy_scene(shape="sphere", n_views=2, image_size=64, seed=0)
        cfg = dataclasses.replace(tiny_config(),
                                  ablation=AblationFlags(use_inversion=False))
        state = TrainState(scene.dataset.training_views(), cfg)
        inv_sum, pose_sum = checksum(state.inv), checksum(state.pose_table)
        field_sum, disc_sum = checksum(state.field), checksum(state.disc)
        phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        assert checksum(state.inv) == inv_sum
        assert checksum(state.pose_table) == pose_sum
        assert checksum(state.field) != field_sum
        assert checksum(state.disc) != disc_sum

    def test_a_step_without_adversarial_touches_only_inversion_players(self):
        scene = make_toy_scene(shape="sphere", n_views=2, image_size=64, seed=0)
        cfg = dataclasses.replace(tiny_config(),
                                  ablation=AblationFlags(use_adversarial=False))
        state = TrainState(scene.dataset.training_views(), cfg)
        field_sum, disc_sum = checksum(state.field), checksum(state.disc)
        inv_sum, pose_sum = checksum(state.inv), checksum(state.pose_table)
        phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        assert checksum(state.field) == field_sum
        assert checksum(state.disc) == disc_sum
        assert checksum(state.inv) != inv_sum
        assert checksum(state.pose_table) != pose_sum

    def test_b_step_never_touches_disc_or_inv(self):
        state = tiny_state()
        disc_sum, inv_sum = checksum(state.disc), checksum(state.inv)
        field_sum = checksum(state.field)
        phase_b_step(state, state.config.schedule)
        assert checksum(state.disc) == disc_sum
        assert checksum(state.inv) == inv_sum
        assert checksum(state.field) != field_sum

    def test_nan_abort_names_substep(self):
        state = tiny_state()
        with torch.no_grad():
            state.disc.logit.bias.fill_(float("nan"))
        with pytest.raises(NaNAbort) as exc:
            phase_a_step(state, state.config.schedule, state.prior, state.intrinsics)
        assert exc.value.substep == "d_update"


class TestSchedule:
    def test_phase_pattern(self):
        sched = ScheduleConfig(phase_a_iters=3, interleave_cycles=2, iters_a_per_cycle=2,
                               iters_b_per_cycle=1, phase_b_iters=2)
        pattern = "".join(step_phase(sched, i) for i in range(sched.total_steps))
        assert pattern == "AAA" + "AAB" + "AAB" + "BB"

    def test_no_cycles_gives_plain_a_then_b(self):
        sched = ScheduleConfig(phase_a_iters=4, interleave_cycles=0, phase_b_iters=3)
        pattern = "".join(step_phase(sched, i) for i in range(sched.total_steps))
        assert pattern == "AAAA" + "BBB"

    def test_run_schedule_step_count_and_phases(self):
        state = tiny_state()
        log = []
        run_schedule(state, state.config.schedule, state.views, state.prior,
                     callbacks=[lambda m, s: log.append(m["phase"])])
        sched = state.config.schedule
        assert len(log) == sched.total_steps == 6
        assert "".join(log) == "AA" + "AB" + "BB"
        assert state.iteration == sched.total_steps

    def test_resume_mid_schedule(self):
        state = tiny_state()
        # Consume two steps manually, then let run_schedule finish the rest.
        phase_a_step(state, state.config.schedule, state.prior, state.intrinsics)
        phase_a_step(state, state.config.schedule, state.prior, state.intrinsics)
        count = []
        run_schedule(state, state.config.schedule, state.views, state.prior,
                     callbacks=[lambda m, s: count.append(m["iter"])])
        assert count == [2, 3, 4, 5]


class TestOptimizers:
    def test_defaults_match_contract(self):
        state = tiny_state()
        opts = configure_optimizers(state)
        assert isinstance(opts["field"], torch.optim.RMSprop)
        assert isinstance(opts["disc"], torch.optim.RMSprop)
        assert isinstance(opts["inversion"], torch.optim.Adam)
        assert isinstance(opts["pose"], torch.optim.Adam)
        assert opts["field"].param_groups[0]["lr"] == 5e-4
        assert opts["disc"].param_groups[0]["lr"] == 1e-4
        assert opts["inversion"].param_groups[0]["lr"] == 1e-4
        assert opts["pose"].param_groups[0]["lr"] == 5e-3

    def test_pose_optimizer_covers_all_pose_parameters(self):
        state = tiny_state(n_views=5)
        group = state.optimizers["pose"].param_groups[0]["params"]
        assert sum(p.numel() for p in group) == 9 * 5


class TestDeterminism:
    def _run(self, seed):
        scene = make_toy_scene(shape="sphere", n_views=2, image_size=64, seed=0)
        cfg = dataclasses.replace(tiny_config(seed=seed), dtype="float64")
        state = TrainState(scene.dataset.training_views(torch.float64), cfg)
        log = []
        run_schedule(state, cfg.schedule, state.views, cfg.prior,
                     callbacks=[lambda m, s: log.append(
                         {k: v for k, v in m.items() if k != "wall_time"})])
        return log

    def test_same_seed_bit_identical_logs(self):
        assert self._run(7) == self._run(7)

    def test_different_seed_differs(self):
        assert self._run(7) != self._run(8)


class TestMetricLogger:
    def test_appends_json_lines(self, tmp_path):
        import json

        logger = MetricLogger(tmp_path / "metrics.jsonl")
        logger({"iter": 0, "phase": "A"}, None)
        logger({"iter": 1, "phase": "B"}, None)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l)["iter"] for l in lines] == [0, 1]


class TestInversionReplayBuffer:
    def _buffered_state(self, seed=0, cap=5, fresh=2):
        state = tiny_state(seed=seed, inversion_pose_batch=fresh,
                           inversion_buffer_size=cap, inversion_train_batch=4,
                           inversion_render_samples=4)
        return state

    def test_buffer_fills_and_wraps(self):
        state = self._buffered_state(cap=5, fresh=2)
        cfg = state.config
        for _ in range(2):
            phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        assert state.inv_buffer_len == 4
        assert state.inv_buffer_pos == 4
        for _ in range(2):
            phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        assert state.inv_buffer_len == 5
        assert state.inv_buffer_pos == 3  # 8 writes mod capacity 5

    def test_buffer_holds_rendered_patches_with_their_poses(self):
        state = self._buffered_state(cap=8, fresh=2)
        cfg = state.config
        phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        assert not torch.equal(state.inv_buffer_patches[0],
                               torch.zeros_like(state.inv_buffer_patches[0]))
        assert float(state.inv_buffer_poses[:2].abs().sum()) > 0
        assert torch.equal(state.inv_buffer_poses[2],
                           torch.zeros_like(state.inv_buffer_poses[2]))

    def test_buffered_run_deterministic(self):
        def run(seed):
            state = self._buffered_state(seed=seed)
            cfg = state.config
            out = []
            for _ in range(3):
                m = phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
                out.append(m["e_loss"])
            return out

        assert run(3) == run(3)
        assert run(3) != run(4)

    def test_checkpoint_round_trip_includes_buffer(self, tmp_path):
        from posefield.checkpoint import load_checkpoint, save_checkpoint

        state = self._buffered_state(cap=6, fresh=2)
        cfg = state.config
        for _ in range(2):
            phase_a_step(state, cfg.schedule, cfg.prior, state.intrinsics)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(state, p1)
        restored = load_checkpoint(p1, state.views)
        assert restored.inv_buffer_len == state.inv_buffer_len
        assert restored.inv_buffer_pos == state.inv_buffer_pos
        assert torch.equal(restored.inv_buffer_patches, state.inv_buffer_patches)
        assert torch.equal(restored.inv_buffer_poses, state.inv_buffer_poses)
        save_checkpoint(restored, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_continuous_with_buffer(self, tmp_path):
        from posefield.checkpoint import load_checkpoint, save_checkpoint

        def fresh():
            scene = make_toy_scene(shape="sphere", n_views=3, image_size=64, seed=0)
            cfg = dataclasses.replace(
                tiny_config(seed=2, inversion_pose_batch=1, inversion_buffer_size=4,
                            inversion_train_batch=2, inversion_render_samples=4),
                dtype="float64")
            return TrainState(scene.dataset.training_views(torch.float64), cfg)

        cont = fresh()
        cfg = cont.config
        for _ in range(4):
            phase_a_step(cont, cfg.schedule, cfg.prior, cont.intrinsics)

        part = fresh()
        for _ in range(2):
            phase_a_step(part, cfg.schedule, cfg.prior, part.intrinsics)
        save_checkpoint(part, tmp_path / "ck.bin")
        resumed = load_checkpoint(tmp_path / "ck.bin", part.views)
        for _ in range(2):
            phase_a_step(resumed, cfg.schedule, cfg.prior, resumed.intrinsics)

        assert torch.equal(resumed.pose_table, cont.pose_table)
        for a, b in zip(resumed.inv.parameters(), cont.inv.parameters()):
            assert torch.equal(a, b)
        assert torch.equal(resumed.inv_buffer_patches, cont.inv_buffer_patches)
