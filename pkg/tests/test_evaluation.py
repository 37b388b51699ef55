import math
from dataclasses import replace

import numpy as np
import pytest

from stgrid_recon.evaluation import (
    ABLATIONS,
    bilinear_upsample,
    export_error_map,
    export_heatmap,
    historical_mean_baseline,
    mae_rmse,
    nearest_fill,
    read_grid_csv,
    run_scenario,
    variant_config,
)
from stgrid_recon.grid import SparsePatternSpec
from stgrid_recon.pipeline import CheckpointBundle, TrainConfig, new_bundle, _fit_norm

from .conftest import tiny_train_config


def naive_mae_rmse(pred, truth):
    t, h, w = truth.shape
    abs_sum = sq_sum = 0.0
    for k in range(t):
        for i in range(h):
            for j in range(w):
                d = float(pred[k, i, j]) - float(truth[k, i, j])
                abs_sum += abs(d)
                sq_sum += d * d
    n = t * h * w
    return abs_sum / n, math.sqrt(sq_sum / n)


class TestMetrics:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4, 4))
        assert mae_rmse(x, x) == (0.0, 0.0)

    def test_hand_example(self):
        mae, rmse = mae_rmse(np.array([1.0, 2.0]).reshape(2, 1, 1), np.array([2.0, 4.0]).reshape(2, 1, 1))
        assert abs(mae - 1.5) < 1e-12 and abs(rmse - math.sqrt(2.5)) < 1e-12

    def test_naive_oracle_and_jensen(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            shape = tuple(rng.integers(1, 6, size=3))
            p, t = rng.normal(size=shape), rng.normal(size=shape) * 3
            mae, rmse = mae_rmse(p, t)
            nm, nr = naive_mae_rmse(p, t)
            assert abs(mae - nm) < 1e-9 and abs(rmse - nr) < 1e-9
            assert mae <= rmse + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae_rmse(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


class TestBaselines:
    def test_nearest_fill(self):
        v = np.array([[[1.0, 0.0, 0.0, 4.0]]])
        f = np.array([[[1, 0, 0, 1]]])
        out = nearest_fill(v, f)
        assert out[0, 0].tolist() == [1.0, 1.0, 4.0, 4.0]

    def test_nearest_fill_keeps_observed(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(3, 5, 5))
        f = rng.integers(0, 2, size=v.shape)
        f[:, 0, 0] = 1
        out = nearest_fill(v * f, f)
        np.testing.assert_array_equal(out[f == 1], (v * f)[f == 1].astype(np.float32))

    def test_bilinear_constant(self):
        out = bilinear_upsample(np.full((2, 3, 3), 7.0), 2)
        assert out.shape == (2, 6, 6)
        np.testing.assert_allclose(out, 7.0)

    def test_historical_mean(self):
        from stgrid_recon.synth import synth_series

        s = synth_series(rows=2, cols=2, steps=10, seed=0)
        out = historical_mean_baseline(s, 3)
        np.testing.assert_allclose(out[2], s.values.mean(axis=0), rtol=1e-6)


class TestScenario:
    def test_deterministic_report(self, tiny_checkpoint, tiny_split, tiny_pattern):
        a = run_scenario(tiny_checkpoint, tiny_split[2], tiny_pattern, seed=4)
        b = run_scenario(tiny_checkpoint, tiny_split[2], tiny_pattern, seed=4)
        assert a == b
        assert a.mae <= a.rmse
        assert len(a.per_step) == tiny_split[2].num_steps
        assert a.scenario == "random-0.4"
        assert set(a.to_json()) >= {"scenario", "mae", "rmse", "per_step", "seed", "config_hash", "runtime_s"}

    def test_large_scale_odd_grid(self, tiny_checkpoint):
        from stgrid_recon.synth import synth_series

        odd = synth_series(rows=3, cols=4, steps=8, seed=0)
        with pytest.raises(ValueError, match="even"):
            run_scenario(tiny_checkpoint, odd, SparsePatternSpec("large_scale", 0.0, 0))


class TestAblationConfigs:
    def test_flags_change_one_field(self):
        cfg = TrainConfig()
        for variant in ABLATIONS[:4]:
            diff = {k for k, v in variant_config(variant, cfg).to_dict().items() if cfg.to_dict()[k] != v}
            assert len(diff) == 1

    def test_nojoint_hash_differs_only_in_flag(self):
        full = CheckpointBundle(None, None, TrainConfig(), SparsePatternSpec())
        nj = CheckpointBundle(None, None, variant_config("noJoint", TrainConfig()), SparsePatternSpec())
        pf, pn = full.provenance(), nj.provenance()
        assert full.config_hash() != nj.config_hash()
        changed = {k for k in pf["train"] if pf["train"][k] != pn["train"][k]}
        assert changed == {"no_joint"}
        assert {k: v for k, v in pf.items() if k != "train"} == {k: v for k, v in pn.items() if k != "train"}

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            variant_config("noEverything", TrainConfig())

    def test_no_stpointformer_has_fewer_parameters(self, tiny_split):
        fine = tiny_split[0]
        norm = _fit_norm(fine, None)
        cfg = tiny_train_config()
        full = new_bundle("C", fine, cfg, norm, 51)
        abl = new_bundle("C", fine, replace(cfg, no_stpointformer=True), norm, 51)
        assert abl.num_parameters() < full.num_parameters()
        assert not abl.has_inter_encoder() and full.has_inter_encoder()


class TestExport:
    def test_csv_bit_exact(self, tmp_path):
        g = np.random.default_rng(3).normal(size=(2, 4, 5)).astype(np.float32)
        png, csv_path = export_heatmap(g, 1, tmp_path / "h")
        assert png.exists() and png.suffix == ".png"
        back = read_grid_csv(csv_path)
        assert np.array_equal(back.astype(np.float32), g[1])
        assert np.array_equal(back, g[1].astype(np.float64))
        assert csv_path.read_text().splitlines()[0] == "row,col,value"

    def test_constant_map_single_colour(self, tmp_path):
        import matplotlib.image as mpimg

        png, _ = export_heatmap(np.full((1, 4, 4), 3.0), 0, tmp_path / "c")
        img = mpimg.imread(png)
        assert (img == img[0, 0]).all()

    def test_error_map_of_identity_is_zero(self, tmp_path):
        g = np.random.default_rng(4).normal(size=(1, 3, 3))
        _, csv_path = export_error_map(g, g, 0, tmp_path / "e")
        assert (read_grid_csv(csv_path) == 0).all()

    def test_step_out_of_range(self, tmp_path):
        with pytest.raises(IndexError):
            export_heatmap(np.zeros((2, 2, 2)), 2, tmp_path / "x")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            export_heatmap(np.zeros((1, 2, 2)), 0, blocker / "sub" / "h")
