"""Jacobian saliency patches, spectral clustering, and edge-based clustering.

A saliency patch is one row of the Jacobian of an image-to-image map,
cropped to the 9x9 window centered on the output pixel: the local effective
blurring kernel the map applies there.  Rows of the network come from
reverse-mode products against a one-pixel cotangent; rows of the blur are
the (symmetric) kernel itself; rows of the diffusion operator come from
reverse-mode through its Heun steps.

Pixels closer than 4 px to a border are excluded everywhere so crops are
always fully in bounds.  Clustering is spectral (RBF affinity with
median-distance bandwidth, symmetric normalized Laplacian, seeded k-means
with 10 restarts) and the cluster count is chosen by the elbow curve, the
gap statistic, and its unlogged gap* variant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .autodiff import NetTape
from .grid import PadMode, conv2d
from .network import IResNet, lift
from .operators import GaussianBlurOp, gaussian_kernel

PATCH_SIZE = 9
BORDER = PATCH_SIZE // 2  # keeps every crop fully inside the image


@dataclass(frozen=True)
class SaliencyPatch:
    pixel: tuple  # (row, col)
    patch: np.ndarray  # (9, 9)
    source: str  # "network" | "operator"
    normalized: bool = False


@dataclass
class ClusterReport:
    assignments: np.ndarray  # cluster id per patch
    pixels: list  # (row, col) per patch
    k: int
    mean_patches: list
    edge_percent: list
    edge_cluster: int  # id of the cluster best aligned with edges
    method: str  # "spectral" | "manual"


def _check_pixel(shape, pixel):
    r, c = pixel
    h, w = shape
    if not (BORDER <= r < h - BORDER and BORDER <= c < w - BORDER):
        raise ValueError(
            f"pixel {pixel} is closer than {BORDER} px to a border of {shape}"
        )


def _crop(row_image, pixel):
    r, c = pixel
    return row_image[r - BORDER : r + BORDER + 1, c - BORDER : c + BORDER + 1].copy()


def jacobian_patch(target, x0, pixel):
    """Jacobian row of the output pixel w.r.t. all inputs, cropped to 9x9.

    ``target`` is an :class:`IResNet` (reverse-mode through the subnetwork
    chain, composed with lift/unlift), a :class:`GaussianBlurOp` (exact
    kernel row), or any operator exposing ``input_vjp``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    _check_pixel(x0.shape, pixel)
    if isinstance(target, IResNet):
        m = target.channels
        cot = np.zeros(x0.shape)
        cot[pixel] = 1.0
        tape = NetTape(target, lift(x0, m))
        w = tape.vjp(lift(cot / m, m))
        return SaliencyPatch(tuple(pixel), _crop(w.sum(axis=0), pixel), "network")
    if isinstance(target, GaussianBlurOp):
        kernel = target.kernel[0, 0]
        half = kernel.shape[0] // 2
        patch = np.zeros((PATCH_SIZE, PATCH_SIZE))
        for du in range(-BORDER, BORDER + 1):
            for dv in range(-BORDER, BORDER + 1):
                if abs(du) <= half and abs(dv) <= half:
                    patch[BORDER + du, BORDER + dv] = kernel[half + du, half + dv]
        return SaliencyPatch(tuple(pixel), patch, "operator")
    cot = np.zeros(x0.shape)
    cot[pixel] = 1.0
    row = target.input_vjp(x0, cot)
    return SaliencyPatch(tuple(pixel), _crop(row, pixel), "operator")


def normalize_signed(patch):
    """Divide by the maximum absolute value, preserving signs; idempotent."""
    if isinstance(patch, SaliencyPatch):
        return replace(patch, patch=normalize_signed(patch.patch), normalized=True)
    patch = np.asarray(patch, dtype=np.float64)
    peak = np.max(np.abs(patch))
    if peak == 0.0:
        return patch.copy()
    return patch / peak


def sample_pixels(shape, count, seed):
    """Seeded uniform sample (without replacement) of interior pixels."""
    h, w = shape
    rows = np.arange(BORDER, h - BORDER)
    cols = np.arange(BORDER, w - BORDER)
    eligible = [(int(r), int(c)) for r in rows for c in cols]
    if count > len(eligible):
        raise ValueError(f"requested {count} pixels but only {len(eligible)} are eligible")
    idx = np.random.default_rng(seed).choice(len(eligible), size=count, replace=False)
    return [eligible[i] for i in sorted(idx)]


# --------------------------------------------------------------------------
# clustering


def _flatten_patches(patches):
    arrs = [p.patch if isinstance(p, SaliencyPatch) else np.asarray(p) for p in patches]
    return np.stack([a.reshape(-1) for a in arrs]).astype(np.float64)


def _kmeans(x, k, rng, restarts=10, iters=100):
    """Seeded k-means++ with restarts; returns (labels, inertia)."""
    n = len(x)
    best = None
    for _ in range(restarts):
        centers = _kmeans_pp_init(x, k, rng)
        labels = None
        for _ in range(iters):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                sel = labels == j
                if np.any(sel):
                    centers[j] = x[sel].mean(axis=0)
                else:  # re-seed an empty cluster on the farthest point
                    centers[j] = x[np.argmax(d2.min(axis=1))]
        inertia = float(((x - centers[labels]) ** 2).sum())
        if best is None or inertia < best[1]:
            best = (labels.copy(), inertia)
    return best


def _kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            [((x - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total == 0.0:
            centers.append(x[int(rng.integers(n))])
            continue
        probs = d2 / total
        centers.append(x[int(rng.choice(n, p=probs))])
    return np.stack(centers)


def spectral_cluster(patches, k, seed=0):
    """Spectral clustering of flattened patches; deterministic given the seed.

    RBF affinity with bandwidth equal to the median pairwise distance, the
    symmetric normalized Laplacian, the k lowest eigenvectors row-normalized,
    then seeded k-means with 10 restarts.
    """
    x = _flatten_patches(patches)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == 1:
        return np.zeros(n, dtype=int)
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    off = d2[~np.eye(n, dtype=bool)]
    bw = float(np.sqrt(np.median(off)))
    if bw == 0.0:
        bw = 1.0  # identical patches; affinity degenerates to all-ones
    w = np.exp(-d2 / (2.0 * bw**2))
    deg = w.sum(axis=1)
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - (dinv[:, None] * w * dinv[None, :])
    _, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    emb = emb / norms
    labels, _ = _kmeans(emb, k, np.random.default_rng(seed))
    return labels


def _dispersion(x, k, rng):
    if k == 1:
        return float(((x - x.mean(axis=0)) ** 2).sum())
    _, inertia = _kmeans(x, k, rng)
    return inertia


@dataclass
class ClusterCountCurves:
    w: list  # within-cluster dispersion, k = 1..kmax (the elbow curve)
    gap: list
    gap_star: list
    sd: list  # reference-dispersion spread entering the selection rule
    recommended_k: int


def choose_k(patches, kmax, seed=0, n_ref=10):
    """Elbow, gap, and gap* curves with the standard gap selection rule.

    The reference sets are uniform over the data's bounding box; gap* uses
    the unlogged dispersions.  Recommended k is the smallest k with
    ``Gap(k) >= Gap(k+1) - sd(k+1)`` (falling back to kmax), or 1 for
    degenerate data.
    """
    if kmax < 2:
        raise ValueError("kmax must be at least 2")
    x = _flatten_patches(patches)
    rng = np.random.default_rng(seed)
    w = [_dispersion(x, k, rng) for k in range(1, kmax + 1)]
    if w[0] == 0.0:  # all patches identical
        return ClusterCountCurves(w, [0.0] * kmax, [0.0] * kmax, [0.0] * kmax, 1)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    ref_w = np.empty((n_ref, kmax))
    for b in range(n_ref):
        ref = rng.uniform(lo, hi, size=x.shape)
        for k in range(1, kmax + 1):
            ref_w[b, k - 1] = _dispersion(ref, k, rng)
    logs = np.log(np.maximum(ref_w, 1e-300))
    gap = [float(logs[:, k - 1].mean() - np.log(max(w[k - 1], 1e-300))) for k in range(1, kmax + 1)]
    gap_star = [float(ref_w[:, k - 1].mean() - w[k - 1]) for k in range(1, kmax + 1)]
    sd = [float(logs[:, k - 1].std() * np.sqrt(1.0 + 1.0 / n_ref)) for k in range(1, kmax + 1)]
    rec = kmax
    for k in range(1, kmax):
        if gap[k - 1] >= gap[k] - sd[k]:
            rec = k
            break
    return ClusterCountCurves(w, gap, gap_star, sd, rec)


# --------------------------------------------------------------------------
# edges and manual clustering

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def canny_edges(image, sigma=1.0):
    """Canny edges split into (weak, strong) boolean masks.

    Hysteresis thresholds sit at 10% (low) and 20% (high) of the maximum
    gradient magnitude; strong pixels are edge pixels whose magnitude
    exceeds the 20% line, weak pixels are the remaining edge pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    size = 2 * int(np.ceil(3.0 * sigma)) + 1
    smooth = conv2d(image, gaussian_kernel(size, sigma), PadMode.REPLICATE)[0]
    gx = conv2d(smooth, _SOBEL_X.reshape(1, 1, 3, 3), PadMode.REPLICATE)[0]
    gy = conv2d(smooth, _SOBEL_X.T.reshape(1, 1, 3, 3), PadMode.REPLICATE)[0]
    mag = np.hypot(gx, gy)
    peak = mag.max()
    empty = np.zeros(image.shape, dtype=bool)
    # rounding noise in the smoothing of a flat image is not an edge
    if peak <= 1e-10 * max(1.0, float(np.abs(image).max())):
        return empty.copy(), empty.copy()
    keep = _non_maximum_suppression(mag, gx, gy)
    low, high = 0.10 * peak, 0.20 * peak
    candidates = keep & (mag >= low)
    labels, n_labels = ndimage.label(candidates, structure=np.ones((3, 3), dtype=int))
    if n_labels == 0:
        return empty.copy(), empty.copy()
    seeded = np.unique(labels[candidates & (mag > high)])
    edges = np.isin(labels, seeded[seeded > 0])
    strong = edges & (mag > high)
    weak = edges & ~strong
    return weak, strong


def _non_maximum_suppression(mag, gx, gy):
    """Keep local maxima along the (4-sector quantized) gradient direction.

    Exact ties across an edge keep only the first pixel (strict comparison
    against the negative-direction neighbor), so clean symmetric steps thin
    to one-pixel lines.
    """
    h, w = mag.shape
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    pad = np.pad(mag, 1, mode="constant")
    # row index grows downward, so a 45-degree gradient (gy, gx > 0) points
    # along the main diagonal (+1, +1)
    sector_offsets = {
        0: (0, 1),  # horizontal gradient -> compare left/right
        1: (1, 1),  # 45 degrees
        2: (1, 0),  # vertical gradient -> compare up/down
        3: (1, -1),  # 135 degrees
    }
    sector = np.zeros(mag.shape, dtype=int)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in sector_offsets.items():
        sel = sector == s
        fwd = pad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        bwd = pad[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        keep |= sel & (mag > bwd) & (mag >= fwd)
    return keep & (mag > 0)


def manual_clusters(image, samples=250):
    """Edge and smooth pixel sets for cluster comparison across models.

    Edge pixels come from the Canny detector; smooth pixels are those
    outside the 3x3-dilated edge mask (at least two pixels from any edge).
    Both sets drop the 4 px border band and are subsampled to ``samples``
    pixels by even striding in scanline order.
    """
    image = np.asarray(image, dtype=np.float64)
    weak, strong = canny_edges(image)
    edges = weak | strong
    interior = np.zeros(image.shape, dtype=bool)
    interior[BORDER:-BORDER, BORDER:-BORDER] = True
    dilated = ndimage.binary_dilation(edges, structure=np.ones((3, 3), dtype=bool))
    edge_eligible = edges & interior
    smooth_eligible = ~dilated & interior
    out = []
    for name, mask in (("smooth", smooth_eligible), ("edge", edge_eligible)):
        px = [(int(r), int(c)) for r, c in np.argwhere(mask)]
        if len(px) < samples:
            raise ValueError(
                f"only {len(px)} eligible {name} pixels, need {samples}"
            )
        idx = np.round(np.linspace(0, len(px) - 1, samples)).astype(int)
        out.append([px[i] for i in idx])
    return out[0], out[1]


def cluster_summary(patches, assignments, edge_mask, method="spectral"):
    """Per-cluster mean patches and edge alignment percentages.

    ``edge_mask`` marks pixels on (weak or strong) edges.  The cluster with
    the highest edge percentage is tagged as the edge cluster.
    """
    assignments = np.asarray(assignments)
    flat = _flatten_patches(patches)
    pixels = [p.pixel for p in patches]
    ids = list(range(int(assignments.max()) + 1))
    means, percents = [], []
    for cid in ids:
        sel = assignments == cid
        if not np.any(sel):
            raise ValueError(f"cluster {cid} is empty")
        means.append(flat[sel].mean(axis=0).reshape(PATCH_SIZE, PATCH_SIZE))
        members = [pixels[i] for i in np.nonzero(sel)[0]]
        on_edge = sum(1 for (r, c) in members if edge_mask[r, c])
        percents.append(100.0 * on_edge / len(members))
    edge_cluster = ids[int(np.argmax(percents))]
    return ClusterReport(
        assignments=assignments,
        pixels=pixels,
        k=len(ids),
        mean_patches=means,
        edge_percent=percents,
        edge_cluster=edge_cluster,
        method=method,
    )
