"""Regularization studies: inversion error, approximation quality, probes."""

import numpy as np
import pytest

from iresnet_lab.analysis import (
    ConvergencePairing,
    DirectionProbeConfig,
    approx_quality,
    direction_ascent,
    inversion_error_study,
    local_approx_check,
)
from iresnet_lab.grid import ssim
from iresnet_lab.network import FixedPointConfig, new_model
from iresnet_lab.operators import GaussianBlurOp
from iresnet_lab.data import synth_dataset


class _IdentityOp:
    def apply(self, u):
        return np.asarray(u, dtype=np.float64).copy()

    def input_vjp(self, x0, cot):
        return np.asarray(cot, dtype=np.float64).copy()


def _identity_model(n=3, channels=2, size=16, lip=0.9, seed=0):
    model = new_model(n, channels, 4, size, size, lip, seed=seed)
    for sub in model.subnets:
        sub.conv_b = np.zeros_like(sub.conv_b)
    return model


@pytest.fixture(scope="module")
def testset():
    return list(synth_dataset(4, 16, seed=1).images)


class TestConvergencePairing:
    def test_monotone_coupling_enforced(self):
        with pytest.raises(ValueError, match="decrease"):
            ConvergencePairing([(0.01, 0.95, None), (0.05, 0.999, None)])
        with pytest.raises(ValueError, match="distinct"):
            ConvergencePairing([(0.01, 0.95, None), (0.05, 0.95, None)])

    def test_entries_sorted_by_l(self):
        p = ConvergencePairing([(0.01, 0.999, "a"), (0.05, 0.95, "b"), (0.025, 0.99, "c")])
        assert [e[1] for e in p.entries] == [0.95, 0.99, 0.999]


class TestInversionErrorStudy:
    def test_identity_pair_gives_zero(self, testset):
        pairing = ConvergencePairing(
            [(0.05, 0.9, _identity_model(lip=0.9, seed=2))]
        )
        rows = inversion_error_study(pairing, _IdentityOp(), testset)
        assert rows[0]["mean_error"] == 0.0
        assert rows[0]["n"] == len(testset)

    def test_errors_finite_nonnegative_and_sorted(self, testset):
        models = [
            (0.05, 0.9, new_model(2, 2, 4, 16, 16, 0.9, seed=3)),
            (0.01, 0.99, new_model(2, 2, 4, 16, 16, 0.99, seed=4)),
        ]
        rows = inversion_error_study(
            ConvergencePairing(models), GaussianBlurOp(kernel_size=5, sigma=1.0), testset
        )
        assert [r["L"] for r in rows] == [0.9, 0.99]
        for r in rows:
            assert np.isfinite(r["mean_error"]) and r["mean_error"] >= 0

    def test_untrained_near_identity_triangle_bound(self, testset):
        """A zero-residual model inverts to the data itself, so its error is
        exactly the operator's distortion (plus solver slack)."""
        op = GaussianBlurOp(kernel_size=5, sigma=1.0)
        model = _identity_model(n=4, lip=0.95, seed=5)
        fp = FixedPointConfig(tol=1e-8)
        rows = inversion_error_study(
            ConvergencePairing([(0.05, 0.95, model)]), op, testset, fp
        )
        bound = max(np.linalg.norm(op.apply(x) - x) for x in testset)
        assert rows[0]["mean_error"] <= bound + 4 * 10 * fp.tol


class TestLocalApproxCheck:
    def test_identity_identity_all_zero(self, testset):
        rows = local_approx_check(_identity_model(seed=6), _IdentityOp(), testset)
        assert all(r["error"] == 0.0 for r in rows)

    def test_ratios_positive_finite(self, testset):
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=7)
        rows = local_approx_check(model, GaussianBlurOp(kernel_size=5, sigma=1.0), testset)
        for r in rows:
            assert np.isfinite(r["ratio"]) and r["ratio"] >= 0
            assert r["ratio"] == pytest.approx(r["error"] / r["one_minus_L"])


class TestApproxQuality:
    def test_identity_identity_sentinel(self, testset):
        ps, ss = approx_quality(_identity_model(seed=8), _IdentityOp(), testset)
        assert ps == 200.0
        assert ss == 1.0

    def test_ssim_symmetric(self, testset):
        a, b = testset[0], testset[1]
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


class TestDirectionAscent:
    def test_blur_directional_derivative_is_linear(self, testset):
        """For the linear blur the FD derivative equals blur(h) exactly and is
        independent of the base point."""
        op = GaussianBlurOp(kernel_size=5, sigma=1.0)
        model = _identity_model(seed=9)
        cfg = DirectionProbeConfig(steps=0, rate=0.1, seed=10)
        _, trace0 = direction_ascent(model, op, testset[0], cfg)
        _, trace1 = direction_ascent(model, op, testset[1], cfg)
        h = np.random.default_rng(10).standard_normal(testset[0].shape)
        h /= np.linalg.norm(h)
        assert trace0[0]["norm_F"] == pytest.approx(
            np.linalg.norm(op.apply(h)), abs=1e-6
        )
        assert trace0[0]["norm_F"] == pytest.approx(trace1[0]["norm_F"], abs=1e-9)

    def test_trace_non_decreasing_and_lower_bound(self, testset):
        model = new_model(3, 2, 4, 16, 16, 0.95, seed=11)
        op = GaussianBlurOp(kernel_size=5, sigma=1.0)
        cfg = DirectionProbeConfig(steps=40, rate=0.2, seed=12)
        h, trace = direction_ascent(model, op, testset[0], cfg)
        objs = [t["objective"] for t in trace]
        assert all(b >= a - 1e-12 for a, b in zip(objs, objs[1:]))
        assert np.linalg.norm(h) == pytest.approx(1.0, abs=1e-12)
        for t in trace:
            assert t["norm_phi"] >= (1.0 - model.lip_param) - 1e-6

    def test_norm_phi_bounds_for_random_directions(self, testset):
        from iresnet_lab.autodiff import NetTape
        from iresnet_lab.network import lift

        model = new_model(3, 2, 4, 16, 16, 0.95, seed=13)
        tape = NetTape(model, lift(testset[0], 2))
        upper = np.prod([1.0 + s.budget for s in model.subnets])
        rng = np.random.default_rng(14)
        for _ in range(50):
            h = rng.standard_normal(testset[0].shape)
            h /= np.linalg.norm(h)
            n = np.linalg.norm(tape.jvp(lift(h, 2))) / np.sqrt(2)
            assert (1.0 - model.lip_param) - 1e-6 <= n <= upper + 1e-6

    def test_masked_probe_stays_in_mask(self, testset):
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=15)
        op = GaussianBlurOp(kernel_size=5, sigma=1.0)
        mask = np.zeros(testset[0].shape)
        mask[4:12, 4:12] = 1.0
        cfg = DirectionProbeConfig(steps=15, rate=0.2, mask=mask, seed=16)
        h, _ = direction_ascent(model, op, testset[0], cfg)
        assert not h[mask == 0].any()
        assert np.linalg.norm(h) == pytest.approx(1.0)

    def test_all_zero_mask_rejected(self, testset):
        model = new_model(2, 2, 4, 16, 16, 0.9, seed=17)
        cfg = DirectionProbeConfig(mask=np.zeros(testset[0].shape), seed=18)
        with pytest.raises(ValueError, match="mask"):
            direction_ascent(model, _IdentityOp(), testset[0], cfg)
