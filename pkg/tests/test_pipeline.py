import copy

import numpy as np
import pytest
import torch

import stgrid_recon.pipeline as pl
from stgrid_recon.grid import MaskSequence, SparsePatternSpec, apply_mask, downsample, generate_masks
from stgrid_recon.nets import Condition
from stgrid_recon.pipeline import (
    CheckpointBundle,
    TrainingDiverged,
    complete_coarse,
    joint_train,
    load_checkpoint,
    new_bundle,
    pretrain_stage_c,
    pretrain_stage_f,
    reconstruct,
    save_checkpoint,
    window_indices,
    _fit_norm,
)
from stgrid_recon.synth import synth_series

from .conftest import tiny_train_config


def states_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def moving_average_drops(curve, w=20):
    c = np.asarray(curve)
    return np.isfinite(c).all() and c[-w:].mean() < c[:w].mean()


def test_window_indices_clamp():
    assert window_indices(1, 4).tolist() == [0, 0, 0, 1]
    assert window_indices(9, 3).tolist() == [7, 8, 9]


class TestPretrain:
    def test_stage_c_loss_decreases(self, tiny_split, tiny_pattern):
        b = pretrain_stage_c(tiny_split[0], tiny_pattern, tiny_train_config(pretrain_steps_c=200))
        assert len(b.loss_curve) == 200
        assert moving_average_drops(b.loss_curve)

    def test_stage_f_loss_decreases(self, tiny_split):
        b = pretrain_stage_f(tiny_split[0], tiny_train_config(pretrain_steps_f=200))
        assert moving_average_drops(b.loss_curve)

    def test_deterministic(self, tiny_split, tiny_pattern):
        cfg = tiny_train_config()
        a = pretrain_stage_c(tiny_split[0], tiny_pattern, cfg)
        b = pretrain_stage_c(tiny_split[0], tiny_pattern, cfg)
        assert a.loss_curve == b.loss_curve
        assert states_equal(a.net, b.net)
        fa, fb = pretrain_stage_f(tiny_split[0], cfg), pretrain_stage_f(tiny_split[0], cfg)
        assert fa.loss_curve[-1] == fb.loss_curve[-1]

    def test_no_stpointformer_flag(self, tiny_split, tiny_pattern):
        b = pretrain_stage_c(tiny_split[0], tiny_pattern, tiny_train_config(no_stpointformer=True, pretrain_steps_c=2))
        assert not any(k.startswith("inter.") for k in b.net.state_dict())

    def test_no_tpatternnet_ignores_history(self, tiny_split):
        cfg = tiny_train_config(no_tpatternnet=True, pretrain_steps_f=2)
        b = pretrain_stage_f(tiny_split[0], cfg)
        assert b.net.inter is None
        nc = b.net_config
        up = torch.randn(2, 1, *nc.out_shape)
        hist = torch.randn(2, nc.history, nc.rows, nc.cols)
        feats = torch.rand(2, nc.history, nc.feature_dim)
        s, tau = torch.randn(2, 1, *nc.out_shape), torch.tensor([1, 3])
        a = b.net(s, tau, Condition(up, hist, feats))
        hist2 = hist.clone()
        hist2[:, :-1] = torch.randn_like(hist2[:, :-1])
        assert torch.equal(a, b.net(s, tau, Condition(up, hist2, torch.rand_like(feats))))

    def test_constant_series_flagged(self, tiny_pattern):
        s = synth_series(rows=4, cols=4, steps=16, seed=0)
        const = s.with_values(np.full_like(s.values, 5.0))
        b = pretrain_stage_c(const, tiny_pattern, tiny_train_config(pretrain_steps_c=3))
        assert b.flags.get("degenerate_data") is True
        assert all(np.isfinite(b.loss_curve))


class TestJoint:
    def _pre(self, split, pattern, **kw):
        cfg = tiny_train_config(**kw)
        norm = _fit_norm(split[0], None)
        return cfg, pretrain_stage_c(split[0], pattern, cfg, norm), pretrain_stage_f(split[0], cfg, norm)

    def test_no_joint_is_identity(self, tiny_split, tiny_pattern):
        cfg, bc, bf = self._pre(tiny_split, tiny_pattern, no_joint=True)
        before_c, before_f = copy.deepcopy(bc.net), copy.deepcopy(bf.net)
        ck = joint_train(bc, bf, tiny_split[0], tiny_pattern, cfg)
        assert states_equal(ck.stage_c.net, before_c) and states_equal(ck.stage_f.net, before_f)
        assert ck.log["joint"] == []

    def test_gradient_reaches_stage_c_through_f(self, tiny_split, tiny_pattern):
        cfg, bc, bf = self._pre(tiny_split, tiny_pattern, lambda_c=0.0)
        ck = joint_train(bc, bf, tiny_split[0], tiny_pattern, cfg)
        # with L_C switched off, any stage-C gradient must come from L_F
        assert max(ck.log["grad_norm_c"]) > 0

    def test_joint_loss_decreases(self, tiny_split, tiny_pattern):
        cfg = tiny_train_config(no_pre=True)
        norm = _fit_norm(tiny_split[0], None)
        bc = new_bundle("C", tiny_split[0], cfg, norm, 51)
        bf = new_bundle("F", tiny_split[0], cfg, norm, 51)
        ck = joint_train(bc, bf, tiny_split[0], tiny_pattern, cfg, steps=150, lr=cfg.lr)
        assert moving_average_drops(ck.log["joint"])

    def test_divergence_returns_last_good(self, tiny_split, tiny_pattern, monkeypatch):
        cfg, bc, bf = self._pre(tiny_split, tiny_pattern, joint_steps=60)
        real = pl.epsilon_loss
        calls = {"n": 0}

        def flaky(*a, **kw):
            calls["n"] += 1
            out = real(*a, **kw)
            return out * float("nan") if calls["n"] > 110 else out

        monkeypatch.setattr(pl, "epsilon_loss", flaky)
        with pytest.raises(TrainingDiverged) as info:
            joint_train(bc, bf, tiny_split[0], tiny_pattern, cfg)
        good = info.value.checkpoint
        assert good.log["diverged_at"] == 55
        for p in good.stage_c.net.parameters():
            assert torch.isfinite(p).all()


class TestInference:
    def test_complete_coarse_consistency(self, tiny_checkpoint, tiny_split, tiny_pattern):
        truth = downsample(tiny_split[2])
        mask = generate_masks(tiny_pattern, truth.values.shape)
        obs = apply_mask(truth, mask)
        out = complete_coarse(tiny_checkpoint.stage_c, obs, mask, seed=1)
        flags = mask.flags.astype(bool)
        assert np.array_equal(out.values[flags], obs.values[flags])
        again = complete_coarse(tiny_checkpoint.stage_c, obs, mask, seed=1)
        assert np.array_equal(out.values, again.values)

    def test_complete_coarse_all_observed(self, tiny_checkpoint, tiny_split):
        truth = downsample(tiny_split[2])
        out = complete_coarse(tiny_checkpoint.stage_c, truth, MaskSequence(np.ones(truth.values.shape)), seed=0)
        assert np.array_equal(out.values, truth.values)

    def test_complete_coarse_resolution_mismatch(self, tiny_checkpoint):
        s = downsample(synth_series(rows=2, cols=2, steps=4, seed=0))
        with pytest.raises(ValueError):
            complete_coarse(tiny_checkpoint.stage_c, s, MaskSequence(np.ones(s.values.shape)))

    def test_reconstruct_shape_and_determinism(self):
        fine = synth_series(rows=8, cols=8, magnification=2, steps=10, seed=2)
        cfg = tiny_train_config()
        norm = _fit_norm(fine, None)
        ck = CheckpointBundle(new_bundle("C", fine, cfg, norm, 51), new_bundle("F", fine, cfg, norm, 51), cfg)
        coarse = downsample(fine)
        mask = generate_masks(SparsePatternSpec("random", 0.4, 0), coarse.values.shape)
        obs = apply_mask(coarse, mask)
        out = reconstruct(ck, obs, mask, seed=3)
        assert out.values.shape == (10, 16, 16)
        assert np.isfinite(out.values).all()
        assert np.array_equal(out.values, reconstruct(ck, obs, mask, seed=3).values)
        assert not np.array_equal(out.values, reconstruct(ck, obs, mask, seed=4).values)

    def test_fine_model_plugin(self, tiny_checkpoint, tiny_split, tiny_pattern):
        truth = downsample(tiny_split[2])
        mask = generate_masks(tiny_pattern, truth.values.shape)
        obs = apply_mask(truth, mask)
        nearest = lambda c, n: np.repeat(np.repeat(c, n, axis=1), n, axis=2)
        out = reconstruct(tiny_checkpoint, obs, mask, seed=0, fine_model=nearest)
        assert out.values.shape == tiny_split[2].values.shape
        with pytest.raises(pl.PluginError):
            reconstruct(tiny_checkpoint, obs, mask, seed=0, fine_model=lambda c, n: c)


def test_checkpoint_roundtrip_bitwise(tmp_path, tiny_checkpoint, tiny_split, tiny_pattern):
    truth = downsample(tiny_split[2])
    mask = generate_masks(tiny_pattern, truth.values.shape)
    obs = apply_mask(truth, mask)
    before = reconstruct(tiny_checkpoint, obs, mask, seed=9)
    save_checkpoint(tmp_path / "m.ckpt", tiny_checkpoint)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == tiny_checkpoint.config and loaded.pattern == tiny_checkpoint.pattern
    assert np.array_equal(reconstruct(loaded, obs, mask, seed=9).values, before.values)
    # archives are byte-stable
    save_checkpoint(tmp_path / "n.ckpt", loaded)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        tiny_train_config(batch_size=0)
    with pytest.raises(ValueError):
        tiny_train_config(lr=0.0)
