"""Optimizer and schedule traces, the fit loop, and the grid search."""

import numpy as np
import pytest

from kneeattn import graph
from kneeattn.attention import AttentionConfig
from kneeattn.models import ModelSpec, build_model
from kneeattn.synthdata import DatasetManifest, build_dataset
from kneeattn.training import (
    Adam,
    DEFAULT_GRID,
    EarlyStopper,
    PlateauSchedule,
    TrainConfig,
    adam_step,
    early_stop,
    evaluate,
    fit,
    grid_cells,
    grid_search_weights,
    lr_on_plateau,
    predict,
)


def adam_oracle(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain-python replay of the bias-corrected update rule."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (v_hat**0.5 + eps)
        trace.append(theta)
    return trace


class TestAdam:
    def test_three_hand_traced_scalar_steps(self):
        grads = [1.0, -0.5, 0.25]
        expect = adam_oracle(0.5, grads, lr=1e-3)
        theta = np.array([0.5])
        m = np.zeros(1)
        v = np.zeros(1)
        for t, g in enumerate(grads, start=1):
            theta, m, v = adam_step(theta, np.array([g]), m, v, t, lr=1e-3)
            assert abs(theta[0] - expect[t - 1]) < 1e-12

    def test_first_step_magnitude(self):
        # g=1, lr=1e-3: bias correction makes the first step -lr/(1+eps)
        theta, _, _ = adam_step(np.array([0.0]), np.array([1.0]), np.zeros(1), np.zeros(1), 1, lr=1e-3)
        assert theta[0] == pytest.approx(-1e-3, rel=1e-7)

    def test_zero_gradient_keeps_param(self):
        p = graph.Parameter(np.array([1.0, -2.0]), "p")
        opt = Adam([p], TrainConfig())
        before = p.value.copy()
        opt.step(lr=1e-3)  # p.grad is None -> treated as zero
        np.testing.assert_array_equal(p.value, before)
        assert opt.t == 1

    def test_identical_steps_never_grow(self):
        # with bias correction a constant gradient gives a constant step
        theta = np.array([0.0])
        m = np.zeros(1)
        v = np.zeros(1)
        theta, m, v = adam_step(theta, np.array([1.0]), m, v, 1, lr=1e-3)
        d1 = abs(theta[0])
        theta2, _, _ = adam_step(theta, np.array([1.0]), m, v, 2, lr=1e-3)
        d2 = abs(theta2[0] - theta[0])
        assert d2 <= d1 * (1 + 1e-9)
        assert d2 == pytest.approx(d1, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(graph.ShapeError):
            adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, lr=1e-3)


class TestPlateau:
    def test_improving_history_keeps_lr(self):
        assert lr_on_plateau([1.0, 0.9, 0.8], lr0=1e-5, patience=2) == 1e-5

    def test_two_bad_epochs_scale_by_factor(self):
        lr = lr_on_plateau([1.0, 1.1, 1.05], lr0=1e-5, factor=0.1, patience=2)
        assert lr == pytest.approx(1e-6, rel=1e-12)

    def test_improvement_resets_counter(self):
        sched = PlateauSchedule(1e-5, factor=0.1, patience=2)
        for v in [1.0, 1.1, 0.95, 1.0]:  # bad, improve(reset), bad
            sched.observe(v)
        assert sched.lr == 1e-5
        sched.observe(0.99)  # second consecutive bad epoch
        assert sched.lr == pytest.approx(1e-6, rel=1e-12)

    def test_reduction_resets_counter(self):
        sched = PlateauSchedule(1e-5, factor=0.1, patience=2)
        for v in [1.0, 1.1, 1.05, 1.04]:
            sched.observe(v)
        assert sched.lr == pytest.approx(1e-6, rel=1e-12)  # only one reduction so far
        sched.observe(1.03)
        assert sched.lr == pytest.approx(1e-7, rel=1e-12)  # second reduction after 2 more

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            lr_on_plateau([], 1e-5)


class TestEarlyStop:
    def test_hand_traced_history(self):
        stopped, best = early_stop([1.0, 0.9, 0.95, 0.92, 0.91], patience=3)
        assert stopped and best == 2

    def test_monotone_decreasing_never_stops(self):
        stopped, best = early_stop([1.0, 0.9, 0.8, 0.7, 0.6], patience=3)
        assert not stopped and best == 5

    def test_strictness_on_equal_losses(self):
        stopped, best = early_stop([1.0, 1.0], patience=1)
        assert stopped and best == 1

    def test_stateful_matches_functional(self):
        history = [0.8, 0.85, 0.79, 0.8, 0.81, 0.82]
        stopper = EarlyStopper(patience=3)
        stopped = False
        for v in history:
            if stopper.observe(v):
                stopped = True
                break
        f_stopped, f_best = early_stop(history, patience=3)
        assert stopped == f_stopped and stopper.best_epoch == f_best


def tiny_spec(**kw):
    defaults = dict(
        backbone="antony-clsf",
        input_hw=(32, 32),
        width_mult=0.125,
        branches=("att0", "att1"),
        fusion="multi-loss",
        loss_weights=(1.0, 0.8),
        attention=AttentionConfig(conv_widths=(4,)),
        seed=1,
    )
    defaults.update(kw)
    return ModelSpec(**defaults)


def tiny_dataset(seed=0, per_grade=4, hw=(32, 32)):
    manifest = DatasetManifest(
        seed=seed, counts_per_grade=(per_grade,) * 5, image_hw=hw, augment_flips=False
    )
    return build_dataset(manifest)


class TestFit:
    def test_runs_and_logs_every_branch(self, tmp_path):
        samples = tiny_dataset()
        model = build_model(tiny_spec())
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=3, seed=2, early_stop_patience=3)
        metrics = fit(model, samples, config, out_dir=str(tmp_path))
        assert len(metrics.rows) == 3
        for row in metrics.rows:
            for name in ("att0", "att1"):
                assert f"val_acc_{name}" in row and f"train_loss_{name}" in row
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "best.ckpt").exists()

    def test_identical_seed_identical_trace(self):
        samples = tiny_dataset(seed=3)
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=3, seed=5)
        t1 = [r["train_loss"] for r in fit(build_model(tiny_spec()), samples, config).rows]
        t2 = [r["train_loss"] for r in fit(build_model(tiny_spec()), samples, config).rows]
        assert t1 == t2

    def test_zero_weight_freezes_branch_parameters(self):
        samples = tiny_dataset(seed=4)
        model = build_model(tiny_spec(loss_weights=(1.0, 0.0)))
        before = {p.name: p.value.copy() for p in model.branches["att1"].parameters}
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=2, seed=6)
        fit(model, samples, config)
        for p in model.branches["att1"].parameters:
            np.testing.assert_array_equal(p.value, before[p.name])

    def test_checkpoint_restore_reproduces_best_val_loss_exactly(self):
        samples = tiny_dataset(seed=7)
        model = build_model(tiny_spec(seed=8))
        config = TrainConfig(batch_size=8, lr0=3e-3, max_epochs=5, seed=9)
        metrics = fit(model, samples, config)
        val = [s for s in samples if s.split == "val"]
        after = evaluate(model, val, weights=(1.0, 0.8), batch_size=config.batch_size)
        assert after["loss"] == metrics.best_val_loss  # bit-exact restore

    def test_empty_split_rejected(self):
        samples = [s for s in tiny_dataset() if s.split != "val"]
        with pytest.raises(ValueError, match="val split"):
            fit(build_model(tiny_spec()), samples, TrainConfig(max_epochs=1))

    def test_single_branch_and_early_fusion_modes(self):
        samples = tiny_dataset(seed=10)
        single = build_model(tiny_spec(branches=("att0",), fusion="none", loss_weights=None))
        m1 = fit(single, samples, TrainConfig(batch_size=8, lr0=1e-3, max_epochs=2, seed=11))
        assert "val_acc_att0" in m1.rows[0]
        fused = build_model(tiny_spec(fusion="early-fusion", loss_weights=None))
        m2 = fit(fused, samples, TrainConfig(batch_size=8, lr0=1e-3, max_epochs=2, seed=12))
        assert "val_acc_fused" in m2.rows[0]

    def test_train_acc_stop_short_circuits(self):
        samples = tiny_dataset(seed=13)
        model = build_model(tiny_spec())
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=50, seed=14, train_acc_stop=0.0)
        metrics = fit(model, samples, config)
        assert len(metrics.rows) == 1  # any accuracy satisfies the 0.0 target


class TestPredict:
    def test_shapes_and_mask_extent(self):
        samples = tiny_dataset(seed=15)
        model = build_model(tiny_spec())
        out = predict(model, samples[:6], batch_size=4)
        hwc0 = model.shapes[model.taps["att0"]]
        assert out["att0"]["masks"].shape == (6, hwc0[0], hwc0[1])
        assert out["att0"]["probs"].shape == (6, 5)
        np.testing.assert_allclose(out["att1"]["probs"].sum(axis=1), 1.0, atol=1e-12)


class TestGridSearch:
    def test_default_grid_has_36_cells_including_chosen_point(self):
        cells = grid_cells()
        assert len(cells) == 36
        assert (1.0, 0.8) in cells
        assert DEFAULT_GRID == (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            grid_cells(w0_grid=())

    def test_single_cell_returns_that_cell(self):
        samples = tiny_dataset(seed=16)
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=2, seed=17)
        result = grid_search_weights(tiny_spec(), samples, config, w0_grid=(0.7,), w1_grid=(0.6,), budget_epochs=1)
        assert result.best_weights == (0.7, 0.6)
        assert len(result.rows) == 1

    def test_small_grid_deterministic_and_best_in_table(self, tmp_path):
        samples = tiny_dataset(seed=18)
        config = TrainConfig(batch_size=8, lr0=1e-3, max_epochs=2, seed=19)
        kw = dict(w0_grid=(0.5, 1.0), w1_grid=(0.8, 1.0), budget_epochs=1)
        r1 = grid_search_weights(tiny_spec(), samples, config, **kw)
        r2 = grid_search_weights(tiny_spec(), samples, config, **kw)
        assert r1.best_weights == r2.best_weights
        assert [row["val_loss"] for row in r1.rows] == [row["val_loss"] for row in r2.rows]
        assert any((row["w0"], row["w1"]) == r1.best_weights for row in r1.rows)
        r1.to_csv(tmp_path / "grid.csv")
        assert (tmp_path / "grid.csv").read_text().count("\n") == 5  # header + 4 cells

    def test_non_multiloss_rejected(self):
        samples = tiny_dataset(seed=20)
        with pytest.raises(ValueError, match="multi-loss"):
            grid_search_weights(
                tiny_spec(fusion="early-fusion", loss_weights=None), samples, TrainConfig(max_epochs=1)
            )
