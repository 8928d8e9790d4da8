"""Empirical verification of the regularization properties of trained models.

The studies quantify, over a test set, how the learned operator relates to
the true one: the inversion error ``|inv(phi)(F x) - x|`` as the Lipschitz
parameter grows toward one, the forward-approximation error against the
``1 - L`` budget, PSNR/SSIM approximation quality, and gradient-ascent
probes for directions in which the network deviates most from the operator
(i.e., where it has learned to regularize).

Directional derivatives of the network are taken on the multichannel
operator at the lifted direction and reported with the ``1/sqrt(M)``
normalization that makes lifting an isometry; with that convention the
architecture guarantees ``|d_h phi| >= 1 - L`` for every unit direction.
Directional derivatives of the true operator use central finite
differences, so one code path covers the linear and the nonlinear case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NetTape
from .grid import psnr, ssim
from .network import FixedPointConfig, lift, net_forward, net_invert, unlift


@dataclass
class ConvergencePairing:
    """Noise levels paired with models of increasing Lipschitz parameter.

    Entries are ``(delta, lip_param, model)``; the coupling must be monotone
    (larger L for smaller delta), mirroring a parameter choice rule L(delta).
    """

    entries: list

    def __post_init__(self):
        by_l = sorted(self.entries, key=lambda e: e[1])
        ls = [e[1] for e in by_l]
        ds = [e[0] for e in by_l]
        if any(l2 <= l1 for l1, l2 in zip(ls, ls[1:])):
            raise ValueError("Lipschitz parameters must be distinct")
        if any(d2 >= d1 for d1, d2 in zip(ds, ds[1:])):
            raise ValueError("delta must decrease strictly as L increases")
        self.entries = by_l


def inversion_error_study(pairing, op, testset, fp=None):
    """Mean inversion error on noiseless data per (delta, L) pair.

    For each entry, averages ``|unlift(inv(phi)(lift(F(x)))) - x|`` over the
    test set; rows come back sorted by L.
    """
    fp = fp or FixedPointConfig()
    rows = []
    for delta, lip, model in pairing.entries:
        errs = []
        for x in testset:
            z = op.apply(x)
            rec = unlift(net_invert(model, lift(z, model.channels), fp))
            errs.append(float(np.linalg.norm(rec - x)))
        errs = np.asarray(errs)
        rows.append(
            {
                "delta": delta,
                "L": lip,
                "mean_error": float(errs.mean()),
                "std_error": float(errs.std()),
                "n": len(errs),
            }
        )
    return rows


def local_approx_check(model, op, testset, delta=None):
    """Per-sample forward-approximation error against the ``1 - L`` budget."""
    one_minus_l = 1.0 - model.lip_param
    rows = []
    for i, x in enumerate(testset):
        fx = op.apply(x)
        px = unlift(net_forward(model, lift(x, model.channels)))
        err = float(np.linalg.norm(fx - px))
        rows.append(
            {
                "sample": i,
                "delta": delta if delta is not None else "",
                "L": model.lip_param,
                "error": err,
                "one_minus_L": one_minus_l,
                "ratio": err / one_minus_l,
            }
        )
    return rows


def approx_quality(model, op, testset):
    """(mean PSNR, mean SSIM) between the learned and the true forward pass."""
    ps, ss = [], []
    for x in testset:
        fx = op.apply(x)
        px = unlift(net_forward(model, lift(x, model.channels)))
        ps.append(psnr(px, fx))
        ss.append(ssim(px, fx))
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class DirectionProbeConfig:
    steps: int = 200
    rate: float = 0.1
    mask: np.ndarray | None = None
    seed: int = 0
    fd_step: float = 1e-3
    min_rate: float = 1e-12

    def __post_init__(self):
        if self.rate <= 0 or self.steps < 0 or self.fd_step <= 0:
            raise ValueError("require rate > 0, steps >= 0, fd_step > 0")


def direction_ascent(model, op, x0, cfg=None):
    """Projected gradient ascent for directions of maximal learned regularization.

    Maximizes ``|d_h phi(x0)|^2 - |d_h F(x0)|^2`` over unit directions h
    (optionally restricted to a binary mask).  Returns the final direction
    and the accepted-step trace, whose objective column is non-decreasing by
    construction (rejected steps halve the rate instead).
    """
    cfg = cfg or DirectionProbeConfig()
    x0 = np.asarray(x0, dtype=np.float64)
    m = model.channels
    mask = None
    if cfg.mask is not None:
        mask = np.asarray(cfg.mask, dtype=np.float64)
        if mask.shape != x0.shape:
            raise ValueError(f"mask shape {mask.shape} != image shape {x0.shape}")
        if not np.any(mask):
            raise ValueError("mask is all zero")
    tape = NetTape(model, lift(x0, m))
    eps = cfg.fd_step
    sqrt_m = np.sqrt(m)

    def project(h):
        if mask is not None:
            h = h * mask
        n = np.linalg.norm(h)
        if n == 0.0:
            return None
        return h / n

    def probe(h):
        jn = tape.jvp(lift(h, m))
        d = (op.apply(x0 + eps * h) - op.apply(x0 - eps * h)) / (2.0 * eps)
        norm_phi = float(np.linalg.norm(jn)) / sqrt_m
        norm_f = float(np.linalg.norm(d))
        obj = norm_phi**2 - norm_f**2
        if not np.isfinite(obj):
            raise FloatingPointError("direction-probe objective is not finite")
        return obj, norm_phi, norm_f, jn, d

    h = project(np.random.default_rng(cfg.seed).standard_normal(x0.shape))
    if h is None:
        raise ValueError("initial direction vanished under the mask")
    obj, norm_phi, norm_f, jn, d = probe(h)
    trace = [{"step": 0, "objective": obj, "norm_phi": norm_phi, "norm_F": norm_f}]
    rate = cfg.rate
    for _ in range(cfg.steps):
        grad = 2.0 * unlift(tape.vjp(jn)) - 2.0 * op.input_vjp(x0, d)
        if mask is not None:
            grad = grad * mask
        cand = project(h + rate * grad)
        accepted = False
        if cand is not None:
            cand_vals = probe(cand)
            if cand_vals[0] >= obj:
                h = cand
                obj, norm_phi, norm_f, jn, d = cand_vals
                trace.append(
                    {
                        "step": len(trace),
                        "objective": obj,
                        "norm_phi": norm_phi,
                        "norm_F": norm_f,
                    }
                )
                accepted = True
        if not accepted:
            rate *= 0.5
            if rate < cfg.min_rate:
                break
    return h, trace
