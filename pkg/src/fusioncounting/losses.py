"""Loss terms for the fusion and counting tasks.

Fusion side: SSIM loss (11x11 Gaussian window, sigma 1.5), Sobel texture
loss, max-intensity loss and an unnormalized pixel MSE, combined with the
eta weights. Counting side: the Bayesian point-supervision loss, where
each annotation should collect unit posterior-weighted mass from the
predicted density map. Everything accepts Tensors or arrays and builds a
differentiable graph, so the same code path serves training, gradient
checks and PGD attacks.

Conventions: single-channel maps are (H,W), (H,W,1) or NCHW tensors; for
batched NCHW inputs every loss returns the mean of the per-sample values.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import LossError
from .fusion_net import _to_nchw

DEFAULT_ETA = (20.0, 30.0, 30.0, 100.0)
DEFAULT_COUNT_SIGMA = 4.0   # in density-map cells
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def luminance(rgb):
    """Y channel of an RGB image; differentiable for Tensor input."""
    if isinstance(rgb, Tensor):
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise LossError(f"luminance expects (N,3,H,W) tensor, got {rgb.shape}")
        kern = Tensor(np.array(LUMA_WEIGHTS).reshape(1, 3, 1, 1))
        return ad.conv2d(rgb, kern)
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise LossError(f"luminance expects (H,W,3) array, got {arr.shape}")
    return arr @ np.asarray(LUMA_WEIGHTS)


def _as_map(x):
    """Coerce a single-channel map to an NCHW tensor."""
    t = _to_nchw(x, 1) if not isinstance(x, Tensor) else x
    if t.shape[1] != 1:
        raise LossError(f"expected single-channel map, got shape {t.shape}")
    return t


def _check_same_shape(*tensors):
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise LossError(f"shape mismatch between loss inputs: {sorted(shapes)}")


_SOBEL_XT = Tensor(SOBEL_X.reshape(1, 1, 3, 3))
_SOBEL_YT = Tensor(SOBEL_Y.reshape(1, 1, 3, 3))


def sobel_grad(img):
    """Sobel gradient magnitude with replicate-padded borders."""
    t = _as_map(img)
    if t.shape[2] < 3 or t.shape[3] < 3:
        raise LossError(f"image {t.shape[2]}x{t.shape[3]} smaller than the 3x3 Sobel kernel")
    padded = ad.pad2d(t, 1, mode="replicate")
    gx = ad.conv2d(padded, _SOBEL_XT)
    gy = ad.conv2d(padded, _SOBEL_YT)
    out = ad.sqrt(ad.square(gx) + ad.square(gy))
    if isinstance(img, Tensor):
        return out
    return out.data[0, 0]


@lru_cache(maxsize=8)
def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_map(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Per-window SSIM over all fully interior window positions."""
    a, b = _as_map(a), _as_map(b)
    _check_same_shape(a, b)
    h, w = a.shape[2], a.shape[3]
    win = min(window, h if h % 2 else h - 1, w if w % 2 else w - 1)
    if win < 3:
        raise LossError(f"image {h}x{w} too small for SSIM")
    kern = Tensor(_gaussian_window(win, sigma).reshape(1, 1, win, win))
    mu_a = ad.conv2d(a, kern)
    mu_b = ad.conv2d(b, kern)
    mu_aa = ad.conv2d(ad.square(a), kern)
    mu_bb = ad.conv2d(ad.square(b), kern)
    mu_ab = ad.conv2d(a * b, kern)
    var_a = mu_aa - ad.square(mu_a)
    var_b = mu_bb - ad.square(mu_b)
    cov = mu_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (ad.square(mu_a) + ad.square(mu_b) + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b):
    """Mean SSIM between two maps in [0,1] (Gaussian-windowed, valid region)."""
    value = ad.tmean(ssim_map(a, b))
    return value if isinstance(a, Tensor) or isinstance(b, Tensor) else value.item()


def ssim_loss(fused, vis_y, ir):
    """1 - (SSIM(F, vis) + SSIM(F, ir)) / 2."""
    f, v, r = _as_map(fused), _as_map(vis_y), _as_map(ir)
    _check_same_shape(f, v, r)
    return 1.0 - 0.5 * (ad.tmean(ssim_map(f, v)) + ad.tmean(ssim_map(f, r)))


def texture_loss(fused, vis_y, ir):
    """Mean L1 gap between |grad F| and the elementwise max source gradient."""
    f, v, r = _as_map(fused), _as_map(vis_y), _as_map(ir)
    _check_same_shape(f, v, r)
    gf = sobel_grad(f)
    target = ad.maximum(sobel_grad(v), sobel_grad(r))
    return ad.tmean(ad.absolute(gf - target))


def intensity_loss(fused, vis_y, ir):
    """Mean L1 distance of F to max(vis, ir)."""
    f, v, r = _as_map(fused), _as_map(vis_y), _as_map(ir)
    _check_same_shape(f, v, r)
    return ad.tmean(ad.absolute(f - ad.maximum(v, r)))


def mse_loss(fused, vis_y, ir):
    """Unnormalized pixel loss: (|F - vis|^2 + |F - ir|^2) / 2, summed over pixels.

    For batched input the per-sample sums are averaged over the batch.
    """
    f, v, r = _as_map(fused), _as_map(vis_y), _as_map(ir)
    _check_same_shape(f, v, r)
    n = f.shape[0]
    total = ad.tsum(ad.square(f - v)) + ad.tsum(ad.square(f - r))
    return total * (0.5 / n)


def fusion_loss(fused, vis_y, ir, eta=DEFAULT_ETA):
    """Weighted fusion loss; returns (total, dict of unweighted components)."""
    if any(e < 0 for e in eta):
        raise LossError(f"eta weights must be nonnegative, got {eta}")
    parts = {
        "l_ssim": ssim_loss(fused, vis_y, ir),
        "l_text": texture_loss(fused, vis_y, ir),
        "l_int": intensity_loss(fused, vis_y, ir),
        "l_mse": mse_loss(fused, vis_y, ir),
    }
    total = (eta[0] * parts["l_ssim"] + eta[1] * parts["l_text"]
             + eta[2] * parts["l_int"] + eta[3] * parts["l_mse"])
    return total, parts


def bayesian_posterior(points, height, width, sigma=DEFAULT_COUNT_SIGMA):
    """Posterior p(annotation n | cell x) over map cells, shape (N, H*W).

    Cell centers sit at (col + 0.5, row + 0.5) in map coordinates; the
    per-cell posterior is a softmax of -d^2 / (2 sigma^2) across the
    annotations (uniform prior, no background label).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if sigma <= 0:
        raise LossError(f"sigma must be > 0, got {sigma}")
    ys, xs = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    cells = np.column_stack([xs.ravel(), ys.ravel()])      # (P, 2) as (x, y)
    d2 = ((cells[None, :, :] - points[:, None, :]) ** 2).sum(axis=2)
    logits = -d2 / (2.0 * sigma * sigma)
    logits -= logits.max(axis=0, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=0, keepdims=True)


def bayesian_count_loss(density, points, sigma=DEFAULT_COUNT_SIGMA):
    """Sum over annotations of |1 - E[count_n]|; total mass if no annotations.

    `points` are given in density-map coordinates. Accepts a single map
    only (per-sample annotation lists differ, so batching happens in the
    training loop).
    """
    d = _as_map(density)
    if d.shape[0] != 1:
        raise LossError("bayesian_count_loss takes one sample at a time")
    if np.any(d.data < 0):
        raise LossError("density map must be nonnegative")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = d.shape[2], d.shape[3]
    flat = ad.reshape(d, (h * w,))
    if len(points) == 0:
        return ad.tsum(flat)
    post = Tensor(bayesian_posterior(points, h, w, sigma))
    expected = ad.matmul(post, flat)
    return ad.tsum(ad.absolute(1.0 - expected))


def total_loss(l_fusion, l_count, lam=(1.0, 1.0)):
    """Overall objective lambda1 * L_fusion + lambda2 * L_count."""
    l1, l2 = float(lam[0]), float(lam[1])
    if not (np.isfinite(l1) and np.isfinite(l2)) or l1 < 0 or l2 < 0:
        raise LossError(f"lambda weights must be finite and nonnegative, got {lam}")
    return l1 * as_scalar(l_fusion) + l2 * as_scalar(l_count)


def as_scalar(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))


@dataclass(frozen=True)
class LossBreakdown:
    """Float snapshot of one loss evaluation, for logs and reports."""

    l_ssim: float
    l_text: float
    l_int: float
    l_mse: float
    l_fusion: float
    l_count: float
    l_total: float
    eta: tuple = DEFAULT_ETA
    lam: tuple = (1.0, 1.0)


def compute_losses(fused, vis_y, ir, density, points, lam=(1.0, 1.0),
                   eta=DEFAULT_ETA, count_sigma=DEFAULT_COUNT_SIGMA):
    """Full multi-task objective for one sample; returns (Tensor, LossBreakdown)."""
    l_fus, parts = fusion_loss(fused, vis_y, ir, eta)
    l_cnt = bayesian_count_loss(density, points, count_sigma)
    total = total_loss(l_fus, l_cnt, lam)
    report = LossBreakdown(
        l_ssim=parts["l_ssim"].item(), l_text=parts["l_text"].item(),
        l_int=parts["l_int"].item(), l_mse=parts["l_mse"].item(),
        l_fusion=l_fus.item(), l_count=l_cnt.item(), l_total=total.item(),
        eta=tuple(eta), lam=(float(lam[0]), float(lam[1])))
    return total, report
