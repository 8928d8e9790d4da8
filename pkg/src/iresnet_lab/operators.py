"""True forward operators: Gaussian blur, Perona-Malik diffusion, implicit heat step.

All operators map (H, W) images to (H, W) images, are deterministic, and are
immutable after construction, so instances can be shared across worker
threads.  ``PeronaMalikOp`` and ``ImplicitHeatStep`` use the Neumann
differential operators from :mod:`iresnet_lab.grid`; the blur uses zero
padding so that its materialized matrix has operator norm at most one.

Both nonlinear operators also expose ``input_vjp``: the exact adjoint of
their Jacobian at a point, obtained by reverse-mode differentiation through
the Heun steps (or, for the linear blur, the adjoint convolution).  The
saliency and directional-derivative studies build on these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import PadMode, conv2d, div_neumann, grad_neumann, laplacian_neumann


class ConvergenceError(RuntimeError):
    """An iterative solve exhausted its iteration budget."""


def gaussian_kernel(size, sigma):
    """Normalized isotropic Gaussian kernel as a (1, 1, size, size) array."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = size // 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    ii, jj = np.meshgrid(offs, offs, indexing="ij")
    k = np.exp(-(ii**2 + jj**2) / (2.0 * sigma**2))
    k /= k.sum()
    return k.reshape(1, 1, size, size)


@dataclass(frozen=True)
class GaussianBlurOp:
    """Linear blurring: same-size convolution with a normalized Gaussian."""

    kernel_size: int = 11
    sigma: float = 5.0 / 3.0
    kernel: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", gaussian_kernel(self.kernel_size, self.sigma))

    def apply(self, u):
        u = np.asarray(u, dtype=np.float64)
        return conv2d(u, self.kernel, PadMode.ZERO)[0]

    def input_vjp(self, x0, cot):
        # Linear and (being a symmetric kernel with zero padding) self-adjoint:
        # the adjoint is correlation with the flipped kernel.
        adj = self.kernel[:, :, ::-1, ::-1]
        return conv2d(np.asarray(cot, dtype=np.float64), np.ascontiguousarray(adj), PadMode.ZERO)[0]


def pm_g(s, lam):
    """Perona-Malik diffusivity 1 / (1 + (s / lambda)^2) for edge magnitude s."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    s = np.asarray(s, dtype=np.float64)
    return 1.0 / (1.0 + (s / lam) ** 2)


def pm_rhs(u, lam):
    """div( g(|grad u|) grad u ) with Neumann boundary handling.

    Implemented in terms of the squared gradient magnitude, so the expression
    is smooth everywhere (the diffusivity depends on |grad u| only through
    its square).  The pixel sum of the output is exactly zero.
    """
    gx, gy = grad_neumann(u)
    g = 1.0 / (1.0 + (gx**2 + gy**2) / (lam * lam))
    return div_neumann(g * gx, g * gy)


def _pm_rhs_vjp(u, cot, lam):
    """Adjoint of the linearized ``pm_rhs`` at u applied to ``cot``."""
    gx, gy = grad_neumann(u)
    s2 = gx**2 + gy**2
    g = 1.0 / (1.0 + s2 / (lam * lam))
    dg = -(g**2) / (lam * lam)  # d g / d s2
    # div^T = -grad
    cx, cy = grad_neumann(cot)
    qx, qy = -cx, -cy
    t = qx * gx + qy * gy
    dgx = g * qx + 2.0 * gx * t * dg
    dgy = g * qy + 2.0 * gy * t * dg
    # grad^T = -div
    return -div_neumann(dgx, dgy)


@dataclass(frozen=True)
class PeronaMalikOp:
    """Perona-Malik diffusion integrated with Heun's method (Neumann boundary)."""

    lam: float = 0.1
    step_size: float = 0.15
    steps: int = 5

    def __post_init__(self):
        if self.lam <= 0 or self.step_size <= 0 or self.steps < 1:
            raise ValueError("require lam > 0, step_size > 0, steps >= 1")

    def apply(self, u0):
        u, _ = self._apply_with_tape(u0)
        return u

    def _apply_with_tape(self, u0):
        u = np.asarray(u0, dtype=np.float64).copy()
        h = self.step_size
        tape = []
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(self.steps):
                k1 = pm_rhs(u, self.lam)
                w = u + h * k1
                k2 = pm_rhs(w, self.lam)
                tape.append((u, w))
                u = u + 0.5 * h * (k1 + k2)
                if not np.all(np.isfinite(u)):
                    raise FloatingPointError(
                        f"diffusion produced non-finite values (step size {h} unstable)"
                    )
        return u, tape

    def input_vjp(self, x0, cot):
        """Jacobian-transpose product at x0, reverse-mode through all Heun steps."""
        _, tape = self._apply_with_tape(x0)
        h = self.step_size
        c = np.asarray(cot, dtype=np.float64).copy()
        for u, w in reversed(tape):
            dw = _pm_rhs_vjp(w, 0.5 * h * c, self.lam)
            dk1 = 0.5 * h * c + h * dw
            c = c + dw + _pm_rhs_vjp(u, dk1, self.lam)
        return c


@dataclass(frozen=True)
class ImplicitHeatStep:
    """One implicit-Euler heat step: solve (I - h Laplacian) v = u.

    The system is symmetric positive definite, so a conjugate-gradient solve
    on the matrix-free operator converges; the result is the firmly
    nonexpansive smoothing step used to motivate the residual architecture.
    """

    h: float
    solver_tol: float = 1e-10
    solver_max_iter: int = 2000

    def __post_init__(self):
        if self.h <= 0 or self.solver_tol <= 0 or self.solver_max_iter < 1:
            raise ValueError("require h > 0, solver_tol > 0, solver_max_iter >= 1")

    def apply(self, u):
        u = np.asarray(u, dtype=np.float64)

        def matvec(v):
            return v - self.h * laplacian_neumann(v)

        b = u
        x = u.copy()  # u is a good start: the step is a perturbation of identity
        r = b - matvec(x)
        bnorm = float(np.linalg.norm(b))
        if bnorm == 0.0:
            return np.zeros_like(u)
        p = r.copy()
        rs = float(np.sum(r * r))
        for _ in range(self.solver_max_iter):
            if np.sqrt(rs) <= self.solver_tol * bnorm:
                return x
            ap = matvec(p)
            alpha = rs / float(np.sum(p * ap))
            x = x + alpha * p
            r = r - alpha * ap
            rs_new = float(np.sum(r * r))
            p = r + (rs_new / rs) * p
            rs = rs_new
        if np.sqrt(rs) <= self.solver_tol * bnorm:
            return x
        raise ConvergenceError(
            f"CG did not reach tol {self.solver_tol:g} within "
            f"{self.solver_max_iter} iterations (residual {np.sqrt(rs) / bnorm:.3e})"
        )
