"""Invertible residual networks for deblurring/diffusion inverse problems.

The package trains Lipschitz-budgeted invertible residual networks to mimic
blurring or anisotropic-diffusion forward operators and uses their exact
fixed-point inverses as provably stable reconstruction schemes.  It ships
the forward operators, a bespoke differentiation engine for the constrained
architecture (including implicit-function-theorem gradients through the
inversion), training loops, and an analysis suite for inversion-error,
approximation-quality, directional-derivative and saliency-clustering
studies.

Array conventions: grayscale images are float64 arrays of shape (H, W),
multichannel stacks are (C, H, W), convolution kernels are
(out_channels, in_channels, kh, kw).
"""

from .grid import (
    PadMode,
    conv2d,
    div_neumann,
    grad_neumann,
    laplacian_neumann,
    psnr,
    ssim,
)
from .operators import (
    GaussianBlurOp,
    ImplicitHeatStep,
    PeronaMalikOp,
    gaussian_kernel,
    pm_g,
    pm_rhs,
)
from .network import (
    FixedPointConfig,
    FixedPointError,
    IResNet,
    Subnetwork,
    allocate_budget,
    lift,
    net_forward,
    net_invert,
    new_model,
    project_effective_weights,
    residual_apply,
    soft_shrink,
    spectral_norm,
    subnet_forward,
    subnet_invert,
    unlift,
)
from .autodiff import (
    NetTape,
    TapeGradients,
    approx_loss_and_grads,
    invert_backward,
    jvp_residual,
    recon_loss_and_grads,
    vjp_residual,
)
from .training import AdamState, TrainConfig, adam_step, train
from .data import (
    Checkpoint,
    Dataset,
    PairedBatch,
    import_raw,
    load_checkpoint,
    make_pairs,
    save_checkpoint,
    synth_dataset,
)
from .analysis import (
    ConvergencePairing,
    DirectionProbeConfig,
    approx_quality,
    direction_ascent,
    inversion_error_study,
    local_approx_check,
)
from .saliency import (
    ClusterReport,
    SaliencyPatch,
    canny_edges,
    choose_k,
    cluster_summary,
    jacobian_patch,
    manual_clusters,
    normalize_signed,
    sample_pixels,
    spectral_cluster,
)

__version__ = "0.1.0"
