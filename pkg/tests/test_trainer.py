import json
import math
import os

import numpy as np
import pytest
import scipy.stats

from pentopt import fem, trainer
from pentopt.autodiff import TrainingError
from pentopt.trainer import (BatchRecord, TrainingConfig, TrainingHistory,
                             exponential_moving_average, patience_update,
                             random_sample, train)


def tiny_config(**overrides):
    base = dict(
        d_inp=4, levels=1, channels=8, trunk_widths=(32, 128),
        batch_sizes=(4,), max_level=1, max_batches_per_level=3,
        seed=5,
    )
    base.update(overrides)
    return TrainingConfig(**base)


class TestTrainingConfig:
    def test_learning_rate_schedule(self):
        cfg = TrainingConfig()
        assert cfg.learning_rate(1) == pytest.approx(0.01)
        assert cfg.learning_rate(2) == pytest.approx(0.0025)
        assert cfg.learning_rate(3) == pytest.approx(0.000625)
        assert cfg.learning_rate(4) == pytest.approx(0.00015625)
        rates = [cfg.learning_rate(lam) for lam in range(1, 5)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_m_tar_grid(self):
        grid = TrainingConfig().m_tar_grid()
        assert grid.size == 61
        assert grid[0] == pytest.approx(0.2)
        assert grid[-1] == pytest.approx(0.8)
        assert np.allclose(np.diff(grid), 0.01)

    def test_default_architecture(self):
        arch = TrainingConfig().architecture()
        assert arch.trunk_widths == (512, 1024, 2048, 4096)
        assert arch.input_width == 325

    def test_max_level_bounded_by_architecture(self):
        with pytest.raises(ValueError, match="max_level"):
            TrainingConfig(levels=2, max_level=3, batch_sizes=(8, 8, 8))

    def test_batch_sizes_must_cover_levels(self):
        with pytest.raises(ValueError, match="batch sizes"):
            TrainingConfig(batch_sizes=(128, 64), max_level=4)

    def test_unknown_key_named(self):
        with pytest.raises(ValueError, match="learning_rate_x"):
            TrainingConfig.from_dict({"learning_rate_x": 1.0})

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 9, "zeta_max": 50}))
        cfg = TrainingConfig.from_file(str(path))
        assert cfg.seed == 9 and cfg.zeta_max == 50

    def test_from_toml_file(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("seed = 9\nzeta_max = 50\nbatch_sizes = [8, 8, 8, 8]\n")
        cfg = TrainingConfig.from_file(str(path))
        assert cfg.seed == 9 and cfg.batch_sizes == (8, 8, 8, 8)

    def test_dict_roundtrip(self):
        cfg = tiny_config()
        assert TrainingConfig.from_dict(cfg.to_dict()) == cfg


class TestRandomSample:
    def test_structure(self, rng):
        s = random_sample(rng, 8)
        bc = s.bc
        assert bc.rkx[:, 0].all() and bc.rky[:, 0].all()
        assert not bc.rkx[:, 1:].any()
        forces = np.hypot(bc.rsx, bc.rsy)
        assert np.count_nonzero(forces) == 1
        assert forces.max() == pytest.approx(100.0)
        # force never lands on the clamped left column
        assert not forces[:, 0].any()

    def test_m_tar_on_grid(self, rng):
        grid = TrainingConfig().m_tar_grid()
        for _ in range(50):
            s = random_sample(rng, 8)
            assert np.min(np.abs(grid - s.m_tar)) < 1e-12

    def test_node_choice_uniform(self):
        # chi-square goodness of fit over the 72 candidate nodes
        rng = np.random.default_rng(42)
        counts = np.zeros((9, 9))
        n = 20000
        for _ in range(n):
            s = random_sample(rng, 8)
            r, c = np.argwhere(np.hypot(s.bc.rsx, s.bc.rsy) > 0)[0]
            counts[r, c] += 1
        assert counts[:, 0].sum() == 0
        observed = counts[:, 1:].ravel()
        expected = n / 72.0
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        assert chi2 < scipy.stats.chi2.ppf(0.999, df=71)

    def test_direction_uniform(self):
        rng = np.random.default_rng(43)
        angles = []
        for _ in range(2000):
            s = random_sample(rng, 8)
            r, c = np.argwhere(np.hypot(s.bc.rsx, s.bc.rsy) > 0)[0]
            angles.append(math.atan2(s.bc.rsy[r, c], s.bc.rsx[r, c]))
        stat = scipy.stats.kstest(
            np.asarray(angles), scipy.stats.uniform(-math.pi, 2 * math.pi).cdf)
        assert stat.pvalue > 1e-3

    def test_custom_magnitude(self, rng):
        s = random_sample(rng, 8, force_mag=7.0)
        assert np.hypot(s.bc.rsx, s.bc.rsy).max() == pytest.approx(7.0)


class TestPatience:
    def test_first_batch_always_ticks(self):
        j_best, zeta = patience_update(5.0, None, 0, first_batch=True)
        assert (j_best, zeta) == (5.0, 1)
        # even an excellent first value ticks the counter
        j_best, zeta = patience_update(0.001, None, 7, first_batch=True)
        assert (j_best, zeta) == (0.001, 8)

    def test_strict_improvement_resets(self):
        j_best, zeta = patience_update(4.0, 5.0, 3, first_batch=False)
        assert (j_best, zeta) == (4.0, 0)

    def test_equal_value_counts_as_stagnation(self):
        j_best, zeta = patience_update(5.0, 5.0, 3, first_batch=False)
        assert (j_best, zeta) == (5.0, 4)

    def test_worse_value_increments(self):
        j_best, zeta = patience_update(6.0, 5.0, 0, first_batch=False)
        assert (j_best, zeta) == (5.0, 1)

    def test_scripted_sequence(self):
        js = [10.0, 8.0, 9.0, 9.0, 7.9, 8.0, 8.0]
        j_best, zeta = None, 0
        zetas = []
        for i, j in enumerate(js):
            j_best, zeta = patience_update(j, j_best, zeta, first_batch=(i == 0))
            zetas.append(zeta)
        assert zetas == [1, 0, 1, 2, 0, 1, 2]
        assert j_best == 7.9

    def test_missing_best_rejected(self):
        with pytest.raises(ValueError):
            patience_update(1.0, None, 0, first_batch=False)


class TestEma:
    def test_constant_sequence(self):
        out = exponential_moving_average([3.0] * 10)
        assert np.allclose(out, 3.0)

    def test_smoothing_one_tracks_input(self):
        vals = [1.0, 5.0, 2.0]
        assert exponential_moving_average(vals, smoothing=1.0).tolist() == vals

    def test_decreasing_trend_preserved(self):
        vals = np.linspace(10.0, 1.0, 50)
        out = exponential_moving_average(vals)
        assert out[-1] < out[0]
        assert out.shape == vals.shape


class TestHistory:
    def _record(self, b, level=1, j=1.0):
        return BatchRecord(b=b, level=level, J=j, c_mean=0.5, m_mean=0.01,
                           f_mean=0.02, p_mean=0.03, lr=0.01, seconds=0.1)

    def test_csv_roundtrip_exact(self, tmp_path):
        hist = TrainingHistory()
        rng = np.random.default_rng(0)
        for b in range(1, 6):
            hist.append(BatchRecord(
                b=b, level=1 if b < 4 else 2, J=float(rng.random()),
                c_mean=float(rng.random()), m_mean=float(rng.random()),
                f_mean=float(rng.random()), p_mean=float(rng.random()),
                lr=0.01, seconds=float(rng.random())))
        path = str(tmp_path / "history.csv")
        hist.to_csv(path)
        loaded = TrainingHistory.from_csv(path)
        assert loaded.records == hist.records
        assert loaded.level_transitions == [4]

    def test_objectives_filter_by_level(self):
        hist = TrainingHistory()
        hist.append(self._record(1, level=1, j=2.0))
        hist.append(self._record(2, level=2, j=1.0))
        assert hist.objectives().tolist() == [2.0, 1.0]
        assert hist.objectives(level=2).tolist() == [1.0]


class TestTrainLoop:
    def test_short_run_produces_model_and_history(self, tmp_path):
        out = str(tmp_path / "run")
        result = train(tiny_config(), out_dir=out)
        assert len(result.history.records) == 3
        assert all(r.level == 1 for r in result.history.records)
        assert all(np.isfinite(r.J) and r.J > 0 for r in result.history.records)
        assert os.path.exists(os.path.join(out, "model", "manifest.json"))
        assert os.path.exists(os.path.join(out, "history.csv"))

    def test_objective_is_float64_params_float32(self):
        result = train(tiny_config(max_batches_per_level=1))
        for p in result.predictor.parameters():
            assert p.data.dtype == np.float32

    def test_deterministic_across_runs(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        train(tiny_config(), out_dir=out1)
        train(tiny_config(), out_dir=out2)
        with open(os.path.join(out1, "model", "weights.bin"), "rb") as fh:
            blob1 = fh.read()
        with open(os.path.join(out2, "model", "weights.bin"), "rb") as fh:
            blob2 = fh.read()
        assert blob1 == blob2

    def test_seed_changes_result(self, tmp_path):
        r1 = train(tiny_config(seed=1))
        r2 = train(tiny_config(seed=2))
        w1 = r1.predictor.parameters()[0].data
        w2 = r2.predictor.parameters()[0].data
        assert not np.array_equal(w1, w2)

    def test_resume_reproduces_straight_run(self, tmp_path):
        straight = str(tmp_path / "straight")
        split = str(tmp_path / "split")
        train(tiny_config(max_batches_per_level=6), out_dir=straight)
        train(tiny_config(max_batches_per_level=3), out_dir=split)
        train(tiny_config(max_batches_per_level=6), out_dir=split,
              resume_from=os.path.join(split, "checkpoint"))
        with open(os.path.join(straight, "model", "weights.bin"), "rb") as fh:
            blob1 = fh.read()
        with open(os.path.join(split, "model", "weights.bin"), "rb") as fh:
            blob2 = fh.read()
        assert blob1 == blob2
        # the resumed history covers all six batches
        hist = TrainingHistory.from_csv(os.path.join(split, "history.csv"))
        assert [r.b for r in hist.records] == [1, 2, 3, 4, 5, 6]

    def test_checkpoint_missing_optimizer_state_rejected(self, tmp_path):
        out = str(tmp_path / "run")
        train(tiny_config(), out_dir=out)
        ckpt = os.path.join(out, "checkpoint")
        os.remove(os.path.join(ckpt, "adam.npz"))
        with pytest.raises(TrainingError, match="optimizer"):
            train(tiny_config(max_batches_per_level=6), resume_from=ckpt)

    def test_corrupt_checkpoint_state_rejected(self, tmp_path):
        out = str(tmp_path / "run")
        train(tiny_config(), out_dir=out)
        ckpt = os.path.join(out, "checkpoint")
        with open(os.path.join(ckpt, "state.json"), "w") as fh:
            fh.write("{broken")
        with pytest.raises(TrainingError, match="checkpoint"):
            train(tiny_config(), resume_from=ckpt)

    def test_persistent_fem_failure_aborts(self, monkeypatch, tmp_path):
        def boom(*args, **kwargs):
            raise fem.SolverError("forced failure")

        monkeypatch.setattr(fem, "solve_compliance", boom)
        out = str(tmp_path / "run")
        with pytest.raises(TrainingError, match="FEM"):
            train(tiny_config(), out_dir=out)
        # the abort leaves a checkpoint behind for diagnosis
        assert os.path.exists(os.path.join(out, "checkpoint", "state.json"))

    def test_nonfinite_objective_aborts(self, monkeypatch):
        real = fem.solve_compliance

        def inf_solve(*args, **kwargs):
            res = real(*args, **kwargs)
            res.c = float("inf")
            return res

        monkeypatch.setattr(fem, "solve_compliance", inf_solve)
        with pytest.raises(TrainingError, match="non-finite"):
            train(tiny_config())

    def test_on_batch_callback_sees_every_batch(self):
        seen = []
        train(tiny_config(), on_batch=lambda rec, zeta: seen.append((rec.b, zeta)))
        assert [b for b, _ in seen] == [1, 2, 3]
        assert seen[0][1] == 1  # first batch always ticks the counter

    def test_checkpoint_every(self, tmp_path):
        out = str(tmp_path / "run")
        train(tiny_config(checkpoint_every=2), out_dir=out)
        assert os.path.exists(os.path.join(out, "checkpoint", "state.json"))

    def test_patience_convergence_without_batch_cap(self):
        # tiny patience: the run must terminate by itself
        result = train(tiny_config(zeta_max=2, max_batches_per_level=None))
        assert result.converged
        assert len(result.history.records) >= 3


class TestLevelCurriculum:
    def test_levels_advance_and_lr_drops(self, tmp_path):
        cfg = tiny_config(levels=2, max_level=2, batch_sizes=(4, 2),
                          max_batches_per_level=2)
        result = train(cfg)
        levels = [r.level for r in result.history.records]
        assert levels == [1, 1, 2, 2]
        lrs = {r.level: r.lr for r in result.history.records}
        assert lrs[2] == pytest.approx(lrs[1] / 4.0)
        assert result.history.level_transitions == [3]

    def test_final_model_predicts_at_top_level(self):
        cfg = tiny_config(levels=2, max_level=2, batch_sizes=(4, 2),
                          max_batches_per_level=1)
        result = train(cfg)
        rng = np.random.default_rng(0)
        fld = result.predictor.predict(random_sample(rng, 4), 2)
        assert fld.d == 8
