"""Trainer invariants: schedule, optimizers, step determinism, checkpoints."""

import json

import numpy as np
import pytest

from maskclust import network, nn, objective, trainer
from maskclust.masking import MaskSpec
from maskclust.rng import substream


def tiny_setup(seed=0, total_steps=6, **train_kw):
    net_cfg = network.NetworkConfig(
        patch_size=8, enc_depth=1, enc_dim=16, enc_heads=2, pred_depth=1,
        n_reg=2, stochastic_depth=0.1,
    )
    defaults = dict(
        batch_size=4, n_pred=2, mask=MaskSpec("inverse_block_roll", 0.65), mi_window=4
    )
    defaults.update(train_kw)
    cfg = trainer.TrainConfig(**defaults)
    sched = trainer.Schedule(total_steps=total_steps, peak_lr=1e-3)
    state = trainer.init_state(net_cfg, cfg, seed=seed, n_prototypes=8)
    return state, net_cfg, cfg, sched


def batch_fn(step, seed=123, b=4):
    return substream(seed, "data", step).standard_normal((b, 16, 16, 3))


class TestSchedule:
    def test_zero_at_start(self):
        s = trainer.Schedule(total_steps=1000, peak_lr=1e-3)
        assert trainer.lr_at(0, s) == 0.0

    def test_peak_at_warmup_end(self):
        s = trainer.Schedule(total_steps=1000, peak_lr=1e-3)
        np.testing.assert_allclose(trainer.lr_at(100, s), 1e-3, rtol=0, atol=0)

    def test_truncated_final_value(self):
        # cosine stops at 80% of the half-period: 0.5e-3 * (1 + cos(0.8 pi))
        s = trainer.Schedule(total_steps=1000, peak_lr=1e-3)
        np.testing.assert_allclose(
            trainer.lr_at(1000, s), 0.5e-3 * (1.0 + np.cos(0.8 * np.pi)), rtol=1e-12
        )
        np.testing.assert_allclose(trainer.lr_at(1000, s), 9.5492e-5, rtol=1e-4)

    def test_linear_warmup_shape(self):
        s = trainer.Schedule(total_steps=1000, peak_lr=2e-3)
        np.testing.assert_allclose(trainer.lr_at(50, s), 1e-3, rtol=1e-12)

    def test_continuity_at_junction(self):
        s = trainer.Schedule(total_steps=1000, peak_lr=1e-3)
        below = trainer.lr_at(100 - 1e-6, s)
        above = trainer.lr_at(100 + 1e-6, s)
        assert abs(below - above) < 1e-9

    def test_monotone_decay_after_warmup(self):
        s = trainer.Schedule(total_steps=1000, peak_lr=1e-3)
        vals = [trainer.lr_at(t, s) for t in range(100, 1001, 25)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_floor_respected(self):
        s = trainer.Schedule(total_steps=100, peak_lr=1e-3, final_lr_floor=2e-4)
        assert trainer.lr_at(100, s) >= 2e-4

    def test_out_of_range(self):
        s = trainer.Schedule(total_steps=100, peak_lr=1e-3)
        with pytest.raises(ValueError):
            trainer.lr_at(101, s)
        with pytest.raises(ValueError):
            trainer.lr_at(-1, s)

    def test_validation(self):
        with pytest.raises(ValueError):
            trainer.Schedule(total_steps=0, peak_lr=1e-3)
        with pytest.raises(ValueError):
            trainer.Schedule(total_steps=10, peak_lr=1e-3, warmup_fraction=1.0)


class TestAdamW:
    def test_decoupled_decay_only(self):
        p = nn.Param(np.array([2.0]))
        opt = trainer.AdamW([{"params": [("p", p)]}], weight_decay=0.1)
        p.grad[...] = 0.0
        opt.step(lr=0.5)
        # zero gradient: pure decay p -= lr * wd * p
        np.testing.assert_allclose(p.value, [2.0 * (1 - 0.05)])

    def test_first_step_size(self):
        p = nn.Param(np.array([0.0]))
        opt = trainer.AdamW([{"params": [("p", p)]}], weight_decay=0.0, eps=0.0)
        p.grad[...] = 3.7
        opt.step(lr=1e-2)
        # bias-corrected first step moves by exactly lr regardless of grad scale
        np.testing.assert_allclose(p.value, [-1e-2])

    def test_quadratic_convergence(self):
        p = nn.Param(np.array([5.0, -3.0]))
        opt = trainer.AdamW([{"params": [("p", p)]}], weight_decay=0.0)
        for _ in range(2000):
            p.grad[...] = p.value
            opt.step(lr=0.05)
        # constant-lr Adam hovers near the optimum rather than converging exactly
        assert np.all(np.abs(p.value) < 5e-3)

    def test_group_scales(self):
        a, c = nn.Param(np.array([1.0])), nn.Param(np.array([1.0]))
        opt = trainer.AdamW(
            [
                {"params": [("a", a)], "lr_scale": 1.0},
                {"params": [("c", c)], "lr_scale": 0.2},
            ],
            weight_decay=0.0,
            eps=0.0,
        )
        a.grad[...] = 1.0
        c.grad[...] = 1.0
        opt.step(lr=0.1)
        np.testing.assert_allclose(a.value, [0.9])
        np.testing.assert_allclose(c.value, [0.98])

    def test_duplicate_param_rejected(self):
        p = nn.Param(np.array([1.0]))
        with pytest.raises(ValueError):
            trainer.AdamW([{"params": [("p", p)]}, {"params": [("p", p)]}])

    def test_state_roundtrip(self):
        p = nn.Param(np.array([1.0, 2.0]))
        opt = trainer.AdamW([{"params": [("p", p)]}])
        p.grad[...] = 0.3
        opt.step(1e-3)
        saved = {k: v.copy() for k, v in opt.state_arrays().items()}
        opt2 = trainer.AdamW([{"params": [("p", nn.Param(np.array([1.0, 2.0])))]}])
        opt2.load_state_arrays(saved)
        assert opt2.t == 1
        np.testing.assert_array_equal(opt2.m["p"], opt.m["p"])
        np.testing.assert_array_equal(opt2.v["p"], opt.v["p"])


class TestParamGroups:
    def test_split_covers_everything_once(self):
        state, _, cfg, _ = tiny_setup()
        groups = trainer.network_param_groups(state.named_network_params(), cfg)
        names = [n for g in groups for n, _ in g["params"]]
        assert len(names) == len(set(names))
        assert set(names) == {n for n, _ in state.named_network_params()}
        embed = [n for n, _ in groups[1]["params"]]
        assert embed == ["encoder.patch_embed.w"]
        assert all(n.endswith(".gain") for n, _ in groups[2]["params"])
        assert groups[1]["lr_scale"] == cfg.patch_embed_lr_ratio
        assert groups[2]["wd_scale"] == cfg.norm_wd_ratio


class TestTrainStep:
    def test_metrics_fields_and_momentum_rule(self):
        state, _, cfg, sched = tiny_setup()
        m = trainer.train_step(state, batch_fn(0), cfg, sched)
        assert set(m) == {
            "step", "mim_loss", "cluster_loss", "lr", "momentum",
            "target_entropy", "position_mi",
        }
        assert m["step"] == 1
        assert m["momentum"] == 1.0 - m["lr"]
        assert np.isfinite(m["mim_loss"]) and np.isfinite(m["cluster_loss"])

    def test_bit_reproducible(self):
        runs = []
        for _ in range(2):
            state, _, cfg, sched = tiny_setup(seed=7)
            runs.append([trainer.train_step(state, batch_fn(t), cfg, sched) for t in range(3)])
        assert runs[0] == runs[1]

    def test_teacher_moves_only_by_ema(self):
        state, _, cfg, sched = tiny_setup()
        t0 = nn.gather_params(state.teacher).copy()
        s_before = nn.gather_params(state.encoder).copy()
        m = trainer.train_step(state, batch_fn(0), cfg, sched)
        s_after = nn.gather_params(state.encoder)
        expect = m["momentum"] * t0 + (1 - m["momentum"]) * s_after
        np.testing.assert_allclose(nn.gather_params(state.teacher), expect, atol=1e-12)
        assert not np.array_equal(s_before, s_after)

    def test_prototypes_move_only_from_clustering(self):
        # zero out the clustering gradient path by crafting a' == a is hard;
        # instead verify the audit holds and prototypes change across a step
        state, _, cfg, sched = tiny_setup()
        c0 = state.head.centroids.value.copy()
        trainer.train_step(state, batch_fn(0), cfg, sched)
        assert not np.array_equal(c0, state.head.centroids.value)

    def test_standard_sk_mode_runs(self):
        state, _, cfg, sched = tiny_setup(sk_mode="standard")
        m = trainer.train_step(state, batch_fn(0), cfg, sched)
        assert np.isfinite(m["position_mi"])

    def test_nan_aborts_with_diagnostics(self):
        state, _, cfg, sched = tiny_setup()
        state.student_head.w.value[...] = np.nan
        with pytest.raises(trainer.TrainingDivergedError) as exc:
            trainer.train_step(state, batch_fn(0), cfg, sched)
        d = exc.value.diagnostics
        assert d["step"] == 1 and "max_abs_logit" in d

    def test_refuses_past_schedule_end(self):
        state, _, cfg, sched = tiny_setup(total_steps=1)
        trainer.train_step(state, batch_fn(0), cfg, sched)
        with pytest.raises(ValueError):
            trainer.train_step(state, batch_fn(1), cfg, sched)


class TestConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            trainer.TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            trainer.TrainConfig(crop_scale=(0.0, 1.0))
        with pytest.raises(ValueError):
            trainer.TrainConfig(sk_mode="sideways")
        with pytest.raises(ValueError):
            trainer.TrainConfig(norm_wd_ratio=-1.0)


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, tmp_path):
        state, net_cfg, cfg, sched = tiny_setup()
        trainer.train_step(state, batch_fn(0), cfg, sched)
        p1 = tmp_path / "a.npz"
        p2 = tmp_path / "b.npz"
        trainer.save_checkpoint(p1, state, net_cfg, cfg, sched)
        loaded, n2, c2, s2 = trainer.load_checkpoint(p1)
        trainer.save_checkpoint(p2, loaded, n2, c2, s2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_state_matches(self, tmp_path):
        state, net_cfg, cfg, sched = tiny_setup()
        trainer.train_step(state, batch_fn(0), cfg, sched)
        path = tmp_path / "ckpt.npz"
        trainer.save_checkpoint(path, state, net_cfg, cfg, sched)
        loaded, _, loaded_cfg, loaded_sched = trainer.load_checkpoint(path)
        assert loaded.step == state.step
        assert loaded_cfg == cfg and loaded_sched == sched
        for (n1, p1), (_, p2) in zip(state.named_all_params(), loaded.named_all_params()):
            np.testing.assert_array_equal(p1.value, p2.value, err_msg=n1)
        assert loaded.opt_net.t == state.opt_net.t
        np.testing.assert_array_equal(loaded.mi_counts, state.mi_counts)

    def test_resume_is_bit_exact(self):
        full_metrics = []
        state, _, cfg, sched = tiny_setup(seed=3, total_steps=6)
        for t in range(6):
            full_metrics.append(trainer.train_step(state, batch_fn(t), cfg, sched))
        final_full = nn.gather_params(state.encoder).copy()

        split, net_cfg, cfg2, sched2 = tiny_setup(seed=3, total_steps=6)
        part = [trainer.train_step(split, batch_fn(t), cfg2, sched2) for t in range(3)]
        import tempfile, os
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "mid.npz")
            trainer.save_checkpoint(path, split, net_cfg, cfg2, sched2)
            resumed, _, cfg3, sched3 = trainer.load_checkpoint(path)
        for t in range(3, 6):
            part.append(trainer.train_step(resumed, batch_fn(t), cfg3, sched3))
        assert part == full_metrics
        np.testing.assert_array_equal(nn.gather_params(resumed.encoder), final_full)


class TestPretrainLoop:
    def test_runs_to_completion_with_logs(self, tmp_path):
        state, net_cfg, cfg, sched = tiny_setup(total_steps=4)
        trainer.pretrain(
            state, batch_fn, cfg, sched, tmp_path, net_cfg, checkpoint_every=2
        )
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert json.loads(lines[-1])["step"] == 4
        assert (tmp_path / "checkpoint_000002.npz").exists()
        assert (tmp_path / "checkpoint_final.npz").exists()

    def test_resume_continues_log(self, tmp_path):
        state, net_cfg, cfg, sched = tiny_setup(total_steps=4)
        trainer.pretrain(state, batch_fn, cfg, sched, tmp_path, net_cfg, checkpoint_every=2)
        resumed, n2, c2, s2 = trainer.load_checkpoint(tmp_path / "checkpoint_000002.npz")
        out2 = tmp_path / "resumed"
        trainer.pretrain(resumed, batch_fn, c2, s2, out2, n2)
        lines_a = (tmp_path / "metrics.jsonl").read_text().splitlines()
        lines_b = (out2 / "metrics.jsonl").read_text().splitlines()
        assert lines_b == lines_a[2:]

    def test_empty_batch_rejected(self, tmp_path):
        state, net_cfg, cfg, sched = tiny_setup(total_steps=2)
        with pytest.raises(ValueError, match="nonempty"):
            trainer.pretrain(
                state, lambda t: np.zeros((0, 16, 16, 3)), cfg, sched, tmp_path, net_cfg
            )
