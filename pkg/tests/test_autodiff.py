"""Differentiation engine: vjp/jvp consistency, implicit gradients, objectives."""

import numpy as np
import pytest

from iresnet_lab.autodiff import (
    NetTape,
    approx_loss_and_grads,
    invert_backward,
    jvp_residual,
    recon_loss_and_grads,
    vjp_residual,
)
from iresnet_lab.network import (
    FixedPointConfig,
    lift,
    net_forward,
    new_model,
    residual_apply,
    subnet_invert,
    unlift,
)

from helpers import fd_gradients, flat_grads, tiny_model

FP_TIGHT = FixedPointConfig(tol=1e-12, max_iter=2000)


class TestVjpResidual:
    def test_zero_cotangent(self):
        model = tiny_model()
        x = np.random.default_rng(0).standard_normal((2, 6, 6))
        dx, g = vjp_residual(model.subnets[0], x, np.zeros_like(x))
        assert not dx.any() and not g.conv_a.any() and not g.conv_b.any()
        assert not g.shrink_raw.any()

    def test_scalar_conv_chain_rule(self):
        # f(x) = w (x/2) through a half-identity first stage (kept below the
        # projection target so both scales stay at 1) and a 1x1 w
        model = new_model(1, 1, 1, 6, 6, 0.9, seed=1)
        sub = model.subnets[0]
        sub.conv_a = np.zeros_like(sub.conv_a)
        sub.conv_a[0, 0, 2, 2] = 0.5
        sub.shrink_raw = np.zeros(1)
        sub.conv_b = np.full((1, 1, 1, 1), 0.37)
        for _ in range(5):
            sub.power_round()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 6, 6))
        c = rng.standard_normal((1, 6, 6))
        _, g = vjp_residual(sub, x, c)
        assert g.conv_b[0, 0, 0, 0] == pytest.approx(np.sum(0.5 * x * c), rel=1e-12)

    def test_full_residual_against_finite_differences(self):
        model = tiny_model(seed=3)
        sub = model.subnets[0]
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 6, 6))
        c = rng.standard_normal((2, 6, 6))

        def loss():
            return float(np.sum(residual_apply(sub, x) * c))

        _, g = vjp_residual(sub, x, c)
        fd = fd_gradients(loss, model)[:3]
        for got, want in zip((g.conv_a, g.shrink_raw, g.conv_b), fd):
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-9)


class TestJvpResidual:
    def test_zero_tangent(self):
        model = tiny_model(seed=5)
        x = np.random.default_rng(6).standard_normal((2, 6, 6))
        assert not jvp_residual(model.subnets[0], x, np.zeros_like(x)).any()

    def test_linear_subnet_jvp_is_apply(self):
        model = tiny_model(seed=7)
        sub = model.subnets[0]
        sub.shrink_raw = np.zeros_like(sub.shrink_raw)  # tau = 0: f is linear
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 6, 6))
        t = rng.standard_normal((2, 6, 6))
        np.testing.assert_allclose(
            jvp_residual(sub, x, t), residual_apply(sub, t), atol=1e-12
        )

    def test_adjoint_consistency(self):
        model = tiny_model(seed=9)
        rng = np.random.default_rng(10)
        for sub in model.subnets:
            x = rng.standard_normal((2, 6, 6))
            h = rng.standard_normal((2, 6, 6))
            c = rng.standard_normal((2, 6, 6))
            lhs = np.sum(jvp_residual(sub, x, h) * c)
            rhs = np.sum(h * vjp_residual(sub, x, c)[0])
            assert lhs == pytest.approx(rhs, abs=1e-10)


class TestInvertBackward:
    def test_zero_residual_passthrough(self):
        model = tiny_model(seed=11)
        sub = model.subnets[0]
        sub.conv_b = np.zeros_like(sub.conv_b)
        rng = np.random.default_rng(12)
        z = rng.standard_normal((2, 6, 6))
        v = rng.standard_normal((2, 6, 6))
        x_star = subnet_invert(sub, z, FP_TIGHT)
        u, g = invert_backward(sub, x_star, v, FP_TIGHT)
        np.testing.assert_array_equal(u, v)
        assert not g.conv_a.any()

    def test_scalar_linear_cotangent_doubles(self):
        # f(x) = 0.5 x: dx*/dz = 1/(1 - 0.5) = 2
        model = new_model(1, 1, 1, 6, 6, 0.6, seed=13, kernel_size=1)
        sub = model.subnets[0]
        sub.conv_a = np.full((1, 1, 1, 1), np.sqrt(0.5))
        sub.conv_b = np.full((1, 1, 1, 1), np.sqrt(0.5))
        sub.shrink_raw = np.zeros(1)
        for _ in range(3):
            sub.power_round()
        rng = np.random.default_rng(14)
        z = rng.standard_normal((1, 6, 6))
        v = rng.standard_normal((1, 6, 6))
        x_star = subnet_invert(sub, z, FP_TIGHT)
        u, _ = invert_backward(sub, x_star, v, FP_TIGHT)
        np.testing.assert_allclose(u, 2.0 * v, atol=1e-9)

    def test_inverse_loss_gradient_matches_fd(self):
        model = tiny_model(seed=15)
        sub = model.subnets[1]
        rng = np.random.default_rng(16)
        z = rng.standard_normal((2, 6, 6))
        target = rng.standard_normal((2, 6, 6))

        def loss():
            x = subnet_invert(sub, z, FP_TIGHT)
            return float(np.sum((x - target) ** 2))

        x_star = subnet_invert(sub, z, FP_TIGHT)
        _, g = invert_backward(sub, x_star, 2.0 * (x_star - target), FP_TIGHT)
        fd = fd_gradients(loss, model)[3:6]
        for got, want in zip((g.conv_a, g.shrink_raw, g.conv_b), fd):
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-8)


class TestObjectives:
    def test_identity_model_zero_loss(self):
        model = tiny_model(seed=17)
        for sub in model.subnets:
            sub.conv_b = np.zeros_like(sub.conv_b)
        x = np.random.default_rng(18).random((6, 6))
        batch = [(x, x.copy())]
        for fn in (approx_loss_and_grads, recon_loss_and_grads):
            loss, grads = fn(model, batch, FP_TIGHT)
            assert loss == 0.0
            assert not flat_grads(grads)[0].any()

    def test_empty_batch_rejected(self):
        model = tiny_model(seed=19)
        for fn in (approx_loss_and_grads, recon_loss_and_grads):
            with pytest.raises(ValueError):
                fn(model, [], FP_TIGHT)

    def test_approx_loss_value_is_mse(self):
        model = tiny_model(seed=20)
        rng = np.random.default_rng(21)
        batch = [(rng.random((6, 6)), rng.random((6, 6))) for _ in range(3)]
        loss, _ = approx_loss_and_grads(model, batch, FP_TIGHT)
        outs = [unlift(net_forward(model, lift(x, 2))) for x, _ in batch]
        direct = np.mean([np.mean((o - z) ** 2) for o, (_, z) in zip(outs, batch)])
        assert loss == pytest.approx(direct, rel=1e-12)

    @pytest.mark.parametrize("objective", ["approx", "recon"])
    def test_gradients_match_finite_differences(self, objective):
        model = tiny_model(seed=22)
        rng = np.random.default_rng(23)
        batch = [(rng.random((6, 6)), rng.random((6, 6))) for _ in range(2)]
        fn = approx_loss_and_grads if objective == "approx" else recon_loss_and_grads
        _, grads = fn(model, batch, FP_TIGHT)
        fd = fd_gradients(lambda: fn(model, batch, FP_TIGHT)[0], model)
        for got, want in zip(flat_grads(grads), fd):
            denom = np.maximum(np.abs(want), 1e-8)
            assert np.max(np.abs(got - want) / denom) <= 1e-4

    def test_implicit_equals_unrolled_backprop(self):
        """Implicit gradients vs. explicit differentiation of the unrolled
        iteration x_{k+1} = z + f(x_k), run to numerical convergence."""
        model = tiny_model(seed=24, n=1)
        sub = model.subnets[0]
        rng = np.random.default_rng(25)
        z = rng.standard_normal((2, 6, 6))
        c = rng.standard_normal((2, 6, 6))

        x_star = subnet_invert(sub, z, FP_TIGHT)
        u_implicit, g_implicit = invert_backward(sub, x_star, c, FP_TIGHT)

        # unroll: x_k tracked forward, cotangent swept backward through the
        # exact per-iteration residual linearizations
        xs = [z.copy()]
        for _ in range(400):
            xs.append(z + residual_apply(sub, xs[-1]))
        cot = c.copy()
        gz = np.zeros_like(z)
        acc = None
        for x_prev in reversed(xs[:-1]):
            gz += cot
            dx, g = vjp_residual(sub, x_prev, cot)
            if acc is None:
                acc = g
            else:
                acc.conv_a += g.conv_a
                acc.shrink_raw += g.shrink_raw
                acc.conv_b += g.conv_b
            cot = dx
        for got, want in zip(
            (g_implicit.conv_a, g_implicit.shrink_raw, g_implicit.conv_b),
            (acc.conv_a, acc.shrink_raw, acc.conv_b),
        ):
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-10)
        np.testing.assert_allclose(u_implicit, gz, rtol=1e-6, atol=1e-10)


class TestNetTape:
    def test_out_matches_net_forward(self):
        model = tiny_model(seed=26)
        x = np.random.default_rng(27).standard_normal((2, 6, 6))
        tape = NetTape(model, x)
        np.testing.assert_allclose(tape.out, net_forward(model, x), atol=1e-14)

    def test_jvp_vjp_adjoint_through_chain(self):
        model = tiny_model(seed=28)
        rng = np.random.default_rng(29)
        x = rng.standard_normal((2, 6, 6))
        tape = NetTape(model, x)
        h = rng.standard_normal((2, 6, 6))
        c = rng.standard_normal((2, 6, 6))
        assert np.sum(tape.jvp(h) * c) == pytest.approx(
            np.sum(h * tape.vjp(c)), abs=1e-10
        )

    def test_jvp_matches_directional_fd(self):
        model = tiny_model(seed=30)
        rng = np.random.default_rng(31)
        x = rng.standard_normal((2, 6, 6))
        h = rng.standard_normal((2, 6, 6))
        tape = NetTape(model, x)
        eps = 1e-6
        fd = (net_forward(model, x + eps * h) - net_forward(model, x - eps * h)) / (2 * eps)
        np.testing.assert_allclose(tape.jvp(h), fd, atol=1e-7)
