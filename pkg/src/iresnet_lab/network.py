"""Budgeted invertible residual network with spectral-norm weight projection.

A model is a chain of subnetworks ``x -> x - f(x)`` acting on (M, H, W)
stacks, where each residual ``f`` is a 5x5 convolution, a per-channel
soft-shrinkage with learnable threshold, and a 1x1 convolution.  Every
subnetwork carries a Lipschitz budget ``L_i < 1``; the two convolutions are
rescaled so their estimated operator norms stay within ``sqrt(L_i)`` each
(soft shrinkage is 1-Lipschitz), which makes ``x - f(x)`` invertible by
fixed-point iteration and bounds the inverse network's Lipschitz constant
by ``1 / prod(1 - L_i)``.

Operator norms are estimated by power iteration on the materialization-free
convolution operator for the model's fixed spatial shape.  The persistent
direction vectors live on the subnetwork; ``power_round`` advances them one
iteration, while ``projection`` is a pure function of parameters and the
current directions.  Training therefore runs one power round per step and
differentiates through the projection scale with the directions held fixed.

Forward/invert on a model snapshot are pure; only ``power_round`` mutates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import conv_batched, conv_input_grad

FP_RATE_FLOOR = 1e-3  # floor on L_i in the stopping rule; keeps the a-posteriori bound <= tol


class FixedPointError(RuntimeError):
    """A fixed-point solve (forward inversion or adjoint) ran out of iterations."""


@dataclass
class FixedPointConfig:
    tol: float = 1e-8
    max_iter: int = 200

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("require tol > 0 and max_iter >= 1")


def allocate_budget(lip_param, n):
    """Uniform per-subnetwork budgets L_i with prod(1 - L_i) = 1 - L."""
    if not 0.0 <= lip_param < 1.0:
        raise ValueError(f"Lipschitz parameter must lie in [0, 1), got {lip_param}")
    if n < 1:
        raise ValueError("need at least one subnetwork")
    li = 1.0 - (1.0 - lip_param) ** (1.0 / n)
    return [li] * n


def soft_shrink(x, tau):
    """sign(x) * max(|x| - tau, 0); 1-Lipschitz for every tau >= 0."""
    x = np.asarray(x, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def spectral_norm(kernel, input_shape, iters, state=None):
    """Power-iteration estimate of a convolution's operator norm.

    ``input_shape`` is the spatial (H, W) the operator acts on; ``state`` is
    the persistent input-direction vector of shape (in_channels, H, W) (a
    normalized all-ones start is used when absent).  Runs ``iters`` rounds of
    ``v <- normalize(K^T K v)`` and returns ``(|K v|, v)``.  The estimate
    never exceeds the true norm and increases toward it for generic starts.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w = input_shape
    if h < 1 or w < 1:
        raise ValueError(f"input shape must be positive, got {input_shape}")
    if iters < 1:
        raise ValueError("iters must be positive")
    ci = kernel.shape[1]
    if state is None:
        state = np.ones((ci, h, w))
        state /= np.linalg.norm(state)
    v = np.asarray(state, dtype=np.float64)
    for _ in range(iters):
        kv = conv_batched(v[None], kernel)
        y = conv_input_grad(kv, kernel)[0]
        n = np.linalg.norm(y)
        if n == 0.0:
            return 0.0, v
        v = y / n
    est = float(np.linalg.norm(conv_batched(v[None], kernel)))
    return est, v


@dataclass
class Subnetwork:
    """Residual block ``f(x) = conv_b(soft_shrink(conv_a(x)))`` with budget L_i.

    ``shrink_raw`` is unconstrained; the effective threshold is its absolute
    value.  ``v_a``/``v_b`` are the persistent power-iteration directions for
    the two convolutions.
    """

    conv_a: np.ndarray  # (hidden, M, k, k)
    shrink_raw: np.ndarray  # (hidden,)
    conv_b: np.ndarray  # (M, hidden, 1, 1)
    budget: float
    v_a: np.ndarray
    v_b: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.budget < 1.0:
            raise ValueError(f"budget must lie in [0, 1), got {self.budget}")
        if self.conv_a.shape[0] != self.conv_b.shape[1]:
            raise ValueError("hidden-channel mismatch between conv_a and conv_b")
        if self.conv_a.shape[1] != self.conv_b.shape[0]:
            raise ValueError("conv_b must map back to the input channel count")

    @property
    def channels(self):
        return self.conv_a.shape[1]

    @property
    def hidden(self):
        return self.conv_a.shape[0]

    def power_round(self):
        """One power-iteration round for both convolutions (mutates the directions)."""
        for kernel, attr in ((self.conv_a, "v_a"), (self.conv_b, "v_b")):
            v = getattr(self, attr)
            kv = conv_batched(v[None], kernel)
            y = conv_input_grad(kv, kernel)[0]
            n = np.linalg.norm(y)
            if n > 0.0:
                setattr(self, attr, y / n)

    def projection(self):
        """Projected-weight snapshot for the current parameters and directions."""
        target = np.sqrt(self.budget)
        fa = _project_factor(self.conv_a, self.v_a, target)
        fb = _project_factor(self.conv_b, self.v_b, target)
        return ProjectedSubnet(
            a=fa, b=fb, tau=np.abs(self.shrink_raw), budget=self.budget
        )


@dataclass(frozen=True)
class ProjectedFactor:
    """One convolution after the norm projection, with what the VJP needs."""

    effective: np.ndarray
    raw: np.ndarray
    scale: float
    sigma: float
    u: np.ndarray | None  # normalize(K v); None when the scale is capped at 1
    v: np.ndarray


def _project_factor(kernel, v, target):
    kv = conv_batched(v[None], kernel)[0]
    sigma = float(np.linalg.norm(kv))
    if sigma <= target or sigma == 0.0:
        return ProjectedFactor(kernel, kernel, 1.0, sigma, None, v)
    scale = target / sigma
    return ProjectedFactor(kernel * scale, kernel, scale, sigma, kv / sigma, v)


@dataclass(frozen=True)
class ProjectedSubnet:
    a: ProjectedFactor
    b: ProjectedFactor
    tau: np.ndarray
    budget: float


def project_effective_weights(sub, update_state=True):
    """Return the effective (norm-projected) kernels of a subnetwork.

    Runs one power round first unless ``update_state`` is False; with the
    directions frozen the mapping from raw to effective weights is pure and
    differentiable, which the training gradients rely on.
    """
    if update_state:
        sub.power_round()
    proj = sub.projection()
    return proj.a.effective, proj.b.effective


def _shrink_batched(a, tau):
    t = tau[None, :, None, None]
    return np.sign(a) * np.maximum(np.abs(a) - t, 0.0)


def residual_forward_batched(proj, x):
    """f(x) for a (B, M, H, W) batch under a projection snapshot."""
    a = conv_batched(x, proj.a.effective)
    hsh = _shrink_batched(a, proj.tau)
    return conv_batched(hsh, proj.b.effective), a


def residual_apply(sub, x):
    """f(x) = conv_b(soft_shrink(conv_a(x))) with projected effective weights."""
    x = _check_stack(sub, x)
    y, _ = residual_forward_batched(sub.projection(), x[None])
    return y[0]


def subnet_forward(sub, x):
    """phi(x) = x - f(x); monotone and (1 + L_i)-Lipschitz."""
    x = _check_stack(sub, x)
    y, _ = residual_forward_batched(sub.projection(), x[None])
    return x - y[0]


def _check_stack(sub, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != sub.channels:
        raise ValueError(
            f"expected a ({sub.channels}, H, W) stack, got shape {x.shape}"
        )
    return x


def _fp_threshold(budget, tol):
    return tol * (1.0 - budget) / max(budget, FP_RATE_FLOOR)


def invert_batched(proj, z, cfg):
    """Fixed-point solve of x - f(x) = z for a (B, M, H, W) batch.

    Iterates ``x <- z + f(x)`` from ``x = z`` until every sample's increment
    norm falls below ``tol * (1 - L_i) / max(L_i, 1e-3)``; the contraction
    a-posteriori bound then guarantees per-sample error at most ``tol``.
    """
    thresh = _fp_threshold(proj.budget, cfg.tol)
    x = z.copy()
    inc = None
    for _ in range(cfg.max_iter):
        fx, _ = residual_forward_batched(proj, x)
        x_new = z + fx
        inc = np.sqrt(np.sum((x_new - x) ** 2, axis=(1, 2, 3)))
        x = x_new
        if np.all(inc <= thresh):
            return x
    worst = int(np.argmax(inc))
    raise FixedPointError(
        f"fixed-point inversion did not converge within {cfg.max_iter} iterations "
        f"(sample {worst}, last increment {inc[worst]:.3e}, threshold {thresh:.3e})"
    )


def subnet_invert(sub, z, cfg=None):
    """Invert phi = Id - f at z; the result x satisfies |x - f(x) - z| <= (1+L_i) tol."""
    cfg = cfg or FixedPointConfig()
    z = _check_stack(sub, z)
    return invert_batched(sub.projection(), z[None], cfg)[0]


@dataclass
class IResNet:
    """Chain of budgeted subnetworks; ``subnets[0]`` is applied first."""

    subnets: list
    channels: int
    height: int
    width: int
    lip_param: float

    def __post_init__(self):
        if not self.subnets:
            raise ValueError("model needs at least one subnetwork")
        for sub in self.subnets:
            if sub.channels != self.channels:
                raise ValueError("all subnetworks must share the channel count")
        residual = np.prod([1.0 - s.budget for s in self.subnets])
        if abs(residual - (1.0 - self.lip_param)) > 1e-12:
            raise ValueError(
                "budget inconsistency: prod(1 - L_i) = "
                f"{residual!r} but 1 - L = {1.0 - self.lip_param!r}"
            )

    @property
    def n_subnets(self):
        return len(self.subnets)

    @property
    def hidden(self):
        return self.subnets[0].hidden

    @property
    def kernel_size(self):
        return self.subnets[0].conv_a.shape[2]

    def projections(self):
        return [sub.projection() for sub in self.subnets]

    def power_round(self):
        for sub in self.subnets:
            sub.power_round()


def net_forward(model, x):
    """Apply all subnetworks in stored order (index 0 first)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    if xb.shape[1] != model.channels:
        raise ValueError(f"expected {model.channels} channels, got {xb.shape[1]}")
    for proj in model.projections():
        fx, _ = residual_forward_batched(proj, xb)
        xb = xb - fx
    return xb[0] if squeeze else xb


def net_invert(model, z, cfg=None):
    """Invert the chain (last subnetwork first); errors propagate from the solves."""
    cfg = cfg or FixedPointConfig()
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 3
    zb = z[None] if squeeze else z
    if zb.shape[1] != model.channels:
        raise ValueError(f"expected {model.channels} channels, got {zb.shape[1]}")
    for proj in reversed(model.projections()):
        zb = invert_batched(proj, zb, cfg)
    return zb[0] if squeeze else zb


def lift(x, m):
    """Replicate an (H, W) image into m identical channels."""
    x = np.asarray(x, dtype=np.float64)
    return np.repeat(x[None], m, axis=0)


def unlift(y):
    """Collapse a (M, H, W) stack back to (H, W) by the channel mean."""
    y = np.asarray(y, dtype=np.float64)
    return y.mean(axis=0)


def lift_batch(x, m):
    return np.repeat(np.asarray(x, dtype=np.float64)[:, None], m, axis=1)


def unlift_batch(y):
    return np.asarray(y, dtype=np.float64).mean(axis=1)


def new_model(
    n_subnets,
    channels,
    hidden,
    height,
    width,
    lip_param,
    seed,
    kernel_size=5,
    init_scale=1.0,
    init_power_rounds=80,
):
    """Randomly initialized model with projected weights and warmed-up norms.

    The raw convolutions are Gaussian with He-style scale (times
    ``init_scale``); the power directions are seeded random unit vectors and
    are iterated ``init_power_rounds`` times so the initial norm estimates,
    and hence the Lipschitz caps, are tight.
    """
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd")
    budgets = allocate_budget(lip_param, n_subnets)
    rng = np.random.default_rng(seed)
    subnets = []
    for li in budgets:
        conv_a = rng.normal(
            0.0, np.sqrt(2.0 / (channels * kernel_size**2)), (hidden, channels, kernel_size, kernel_size)
        ) * init_scale
        conv_b = rng.normal(0.0, np.sqrt(1.0 / hidden), (channels, hidden, 1, 1)) * init_scale
        shrink_raw = 0.02 * rng.standard_normal(hidden)
        v_a = rng.standard_normal((channels, height, width))
        v_a /= np.linalg.norm(v_a)
        v_b = rng.standard_normal((hidden, height, width))
        v_b /= np.linalg.norm(v_b)
        sub = Subnetwork(conv_a, shrink_raw, conv_b, li, v_a, v_b)
        for _ in range(init_power_rounds):
            sub.power_round()
        subnets.append(sub)
    return IResNet(subnets, channels, height, width, lip_param)
