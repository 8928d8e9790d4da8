"""Adam optimizer and the two training loops (approximation / reconstruction).

Training is bit-deterministic given (seed, config, dataset): mini-batch
shuffles use per-epoch derived RNG streams, gradient accumulation over a
batch is a fixed-order sum inside the batched loss, and exactly one power
round per subnetwork precedes every gradient step so the norm estimates
track the moving weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import SubnetGrads, approx_loss_and_grads, recon_loss_and_grads
from .grid import psnr, ssim
from .network import FixedPointConfig, lift, net_forward, net_invert, unlift

OBJECTIVES = ("reconstruction", "approximation")


@dataclass
class TrainConfig:
    objective: str = "reconstruction"
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    fp: FixedPointConfig = field(default_factory=FixedPointConfig)
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("require epochs >= 0, batch_size >= 1, lr > 0")


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators mirroring the parameter layout."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model, lr=1e-3):
        zeros = lambda: [
            SubnetGrads(
                np.zeros_like(s.conv_a),
                np.zeros_like(s.shrink_raw),
                np.zeros_like(s.conv_b),
            )
            for s in model.subnets
        ]
        return cls(m=zeros(), v=zeros(), lr=lr)


_PARAM_FIELDS = ("conv_a", "shrink_raw", "conv_b")


def adam_step(model, grads, state):
    """One bias-corrected Adam update; mutates the model parameters and state."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for sub, g, m, v in zip(model.subnets, grads.subnets, state.m, state.v):
        for name in _PARAM_FIELDS:
            gi = getattr(g, name)
            p = getattr(sub, name)
            if gi.shape != p.shape:
                raise ValueError(f"gradient shape {gi.shape} != parameter shape {p.shape}")
            mi = getattr(m, name)
            vi = getattr(v, name)
            mi[...] = state.beta1 * mi + (1.0 - state.beta1) * gi
            vi[...] = state.beta2 * vi + (1.0 - state.beta2) * gi * gi
            setattr(sub, name, p - state.lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps))
    return model, state


def _val_metrics(model, pairs, objective, fp):
    scores = []
    for x, z in pairs.pairs:
        if objective == "reconstruction":
            out = unlift(net_invert(model, lift(z, model.channels), fp))
            ref = x
        else:
            out = unlift(net_forward(model, lift(x, model.channels)))
            ref = z
        scores.append((psnr(out, ref), ssim(out, ref)))
    arr = np.asarray(scores)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def train(model, train_pairs, val_pairs, cfg, adam=None, checkpoint_hook=None):
    """Run seeded epochs of shuffled mini-batches with per-epoch validation.

    ``train_pairs``/``val_pairs`` are :class:`iresnet_lab.data.PairedBatch`
    instances.  Returns ``(model, adam_state, metrics)`` where ``metrics`` is
    one dict per epoch with keys epoch/train_loss/val_psnr/val_ssim.  When
    ``checkpoint_hook`` is given it is called as ``hook(epoch, model, adam)``
    every ``cfg.checkpoint_every`` epochs.
    """
    loss_fn = recon_loss_and_grads if cfg.objective == "reconstruction" else approx_loss_and_grads
    adam = adam or AdamState.for_model(model, lr=cfg.lr)
    adam.lr = cfg.lr
    pairs = list(train_pairs.pairs)
    metrics = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            model.power_round()
            loss, grads = loss_fn(model, batch, cfg.fp)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            adam_step(model, grads, adam)
            losses.append((loss, len(batch)))
        total = sum(n for _, n in losses)
        train_loss = sum(l * n for l, n in losses) / total
        val_psnr, val_ssim = _val_metrics(model, val_pairs, cfg.objective, cfg.fp)
        metrics.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_psnr": val_psnr,
                "val_ssim": val_ssim,
            }
        )
        if checkpoint_hook and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            checkpoint_hook(epoch, model, adam)
    return model, adam, metrics
