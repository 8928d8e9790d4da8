"""Adam updates and the training loop contracts."""

import numpy as np
import pytest

from iresnet_lab.autodiff import SubnetGrads, TapeGradients, zero_grads
from iresnet_lab.data import make_pairs, synth_dataset
from iresnet_lab.network import FixedPointConfig, new_model
from iresnet_lab.operators import GaussianBlurOp
from iresnet_lab.training import AdamState, TrainConfig, adam_step, train

from helpers import flat_params, tiny_model


def _clone_params(model):
    return [p.copy() for p in flat_params(model)]


class TestAdamStep:
    def test_zero_gradients_leave_params(self):
        model = tiny_model(seed=0)
        state = AdamState.for_model(model, lr=1e-2)
        before = _clone_params(model)
        adam_step(model, zero_grads(model), state)
        assert state.step == 1
        for b, a in zip(before, flat_params(model)):
            np.testing.assert_array_equal(b, a)

    def test_first_step_is_signed_lr(self):
        model = tiny_model(seed=1)
        state = AdamState.for_model(model, lr=1e-3)
        grads = zero_grads(model)
        for g in grads.subnets:
            g.conv_a[...] = 0.7
            g.shrink_raw[...] = -1.3
            g.conv_b[...] = 2.1
        before = _clone_params(model)
        adam_step(model, grads, state)
        # at t=1 the bias-corrected update is lr * g / (|g| + eps) ~ lr * sign(g)
        for b, a, g in zip(before, flat_params(model), (0.7, -1.3, 2.1) * 2):
            np.testing.assert_allclose(b - a, 1e-3 * np.sign(g), rtol=1e-6)

    def test_deterministic(self):
        results = []
        for _ in range(2):
            model = tiny_model(seed=2)
            state = AdamState.for_model(model, lr=5e-3)
            rng = np.random.default_rng(3)
            for _ in range(4):
                grads = zero_grads(model)
                for g in grads.subnets:
                    g.conv_a[...] = rng.standard_normal(g.conv_a.shape)
                adam_step(model, grads, state)
            results.append(_clone_params(model))
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        model = tiny_model(seed=4)
        state = AdamState.for_model(model)
        grads = zero_grads(model)
        grads.subnets[0] = SubnetGrads(
            np.zeros((1, 1, 1, 1)), np.zeros(1), np.zeros((1, 1, 1, 1))
        )
        with pytest.raises(ValueError):
            adam_step(model, grads, state)


@pytest.fixture(scope="module")
def small_run():
    ds = synth_dataset(24, 16, seed=5, splits=(16, 4, 4))
    op = GaussianBlurOp(kernel_size=5, sigma=1.0)
    tp = make_pairs(op, ds.train_images, 0.05, seed=6)
    vp = make_pairs(op, ds.val_images, 0.05, seed=7)
    return tp, vp


class TestTrainLoop:
    def test_zero_epochs_no_change(self, small_run):
        tp, vp = small_run
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=8)
        before = _clone_params(model)
        cfg = TrainConfig(epochs=0, batch_size=8, seed=9)
        model, _, metrics = train(model, tp, vp, cfg)
        assert metrics == []
        for b, a in zip(before, flat_params(model)):
            np.testing.assert_array_equal(b, a)

    def test_metrics_rows_and_finiteness(self, small_run):
        tp, vp = small_run
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=10)
        cfg = TrainConfig(
            epochs=3, batch_size=8, lr=1e-3, seed=11,
            fp=FixedPointConfig(tol=1e-6, max_iter=300),
        )
        _, _, metrics = train(model, tp, vp, cfg)
        assert [m["epoch"] for m in metrics] == [1, 2, 3]
        for m in metrics:
            assert np.isfinite(m["train_loss"])
            assert np.isfinite(m["val_psnr"]) and np.isfinite(m["val_ssim"])

    def test_bit_deterministic(self, small_run):
        tp, vp = small_run
        outs = []
        for _ in range(2):
            model = new_model(2, 2, 4, 16, 16, 0.9, seed=12)
            cfg = TrainConfig(
                epochs=2, batch_size=8, lr=1e-3, seed=13,
                fp=FixedPointConfig(tol=1e-6, max_iter=300),
            )
            model, _, metrics = train(model, tp, vp, cfg)
            outs.append((_clone_params(model), metrics))
        for a, b in zip(outs[0][0], outs[1][0]):
            np.testing.assert_array_equal(a, b)
        assert outs[0][1] == outs[1][1]

    def test_fifty_adam_steps_reduce_fixed_batch_loss(self):
        from iresnet_lab.autodiff import approx_loss_and_grads
        from helpers import tiny_model

        model = tiny_model(seed=40)
        rng = np.random.default_rng(41)
        batch = [(rng.random((6, 6)), rng.random((6, 6))) for _ in range(4)]
        state = AdamState.for_model(model, lr=3e-3)
        first, _ = approx_loss_and_grads(model, batch)
        loss = first
        for _ in range(50):
            model.power_round()
            loss, grads = approx_loss_and_grads(model, batch)
            adam_step(model, grads, state)
        assert loss < first

    def test_approximation_objective_learns(self, small_run):
        tp, vp = small_run
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=14)
        cfg = TrainConfig(
            objective="approximation", epochs=6, batch_size=8, lr=3e-3, seed=15,
        )
        _, _, metrics = train(model, tp, vp, cfg)
        assert metrics[-1]["train_loss"] < 0.5 * metrics[0]["train_loss"]

    def test_checkpoint_hook_cadence(self, small_run):
        tp, vp = small_run
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=16)
        seen = []
        cfg = TrainConfig(
            epochs=4, batch_size=8, seed=17, checkpoint_every=2,
            fp=FixedPointConfig(tol=1e-6, max_iter=300),
        )
        train(model, tp, vp, cfg, checkpoint_hook=lambda e, m, a: seen.append(e))
        assert seen == [2, 4]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(objective="nope")
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
