"""Fusion-quality and crowd-counting evaluation metrics.

Fusion metrics follow the conventions common in the VIF literature: the
fused image is compared against both sources on the [0,255] intensity
scale where the metric is scale-sensitive (PSNR, SD, AG, SF). Qabf is the
Xydeas-Petrovic edge-transfer measure with the standard sigmoid constants,
normalized so that perfect edge transfer scores exactly 1. Counting uses
GAME(l) (absolute count error over a 2^l x 2^l region grid) and RMSE.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .losses import SOBEL_X, SOBEL_Y, ssim

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10      # on the [0,1] scale; caps PSNR at exactly 100 dB

# Xydeas-Petrovic sigmoid constants (edge strength, then orientation)
QABF_GAMMA_G, QABF_KAPPA_G, QABF_SIGMA_G = 0.9994, -15.0, 0.5
QABF_GAMMA_A, QABF_KAPPA_A, QABF_SIGMA_A = 0.9879, -22.0, 0.8


@dataclass
class MetricReport:
    """Per-image (or summary) metric row. game has entries for l = 0..3;
    for a single image rmse is the absolute count error."""

    psnr: float
    ssim: float
    qabf: float
    cc: float
    scd: float
    sd: float
    ag: float
    sf: float
    game: np.ndarray
    rmse: float

    COLUMNS = ("psnr", "ssim", "qabf", "cc", "scd", "sd", "ag", "sf",
               "game0", "game1", "game2", "game3", "rmse")

    def row(self):
        return [self.psnr, self.ssim, self.qabf, self.cc, self.scd,
                self.sd, self.ag, self.sf, *[float(g) for g in self.game], self.rmse]


def _flat_map(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise MetricError(f"expected a single-channel map, got shape {arr.shape}")
    return arr


def psnr(fused, reference):
    """10*log10(255^2 / MSE) on the 255 scale, capped at 100 dB."""
    f, a = _flat_map(fused), _flat_map(reference)
    mse = float(np.mean((f - a) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return -10.0 * np.log10(mse)


def pearson(a, b):
    """Pearson correlation; 0 when either signal is constant."""
    a = _flat_map(a).ravel()
    b = _flat_map(b).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((da * db).sum() / (na * nb))


def _sobel_pair(img):
    pad = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
    gx = (win * SOBEL_X).sum(axis=(2, 3))
    gy = (win * SOBEL_Y).sum(axis=(2, 3))
    return gx, gy


def qabf(fused, src_a, src_b):
    """Edge-transfer quality, normalized to 1 at perfect transfer."""
    f, a, b = _flat_map(fused), _flat_map(src_a), _flat_map(src_b)
    gxs = [_sobel_pair(img) for img in (a, b, f)]
    strengths = [np.sqrt(gx * gx + gy * gy) for gx, gy in gxs]
    angles = [np.where(gx == 0.0, np.pi / 2.0, np.arctan(np.divide(
        gy, gx, out=np.zeros_like(gy), where=gx != 0.0))) for gx, gy in gxs]
    ga, gb, gf = strengths
    aa, ab, af = angles

    def edge_preservation(gs, asrc):
        hi = np.maximum(gs, gf)
        ratio = np.where(hi > 0.0, np.minimum(gs, gf) / np.where(hi > 0.0, hi, 1.0), 1.0)
        ang = 1.0 - np.abs(asrc - af) / (np.pi / 2.0)
        qg = QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (ratio - QABF_SIGMA_G)))
        qa = QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (ang - QABF_SIGMA_A)))
        return qg * qa

    q_perfect = (QABF_GAMMA_G / (1.0 + np.exp(QABF_KAPPA_G * (1.0 - QABF_SIGMA_G)))
                 * QABF_GAMMA_A / (1.0 + np.exp(QABF_KAPPA_A * (1.0 - QABF_SIGMA_A))))
    qaf = edge_preservation(ga, aa)
    qbf = edge_preservation(gb, ab)
    weight_total = (ga + gb).sum()
    if weight_total == 0.0:
        return 0.0
    return float((qaf * ga + qbf * gb).sum() / weight_total / q_perfect)


def average_gradient(img):
    """Mean forward-difference gradient magnitude / sqrt(2), 255 scale."""
    f = _flat_map(img) * 255.0
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def spatial_frequency(img):
    """sqrt(RF^2 + CF^2) of row/column difference energies, 255 scale."""
    f = _flat_map(img) * 255.0
    rf = np.mean((f[:, 1:] - f[:, :-1]) ** 2)
    cf = np.mean((f[1:, :] - f[:-1, :]) ** 2)
    return float(np.sqrt(rf + cf))


def fusion_quality(fused, vis_y, ir):
    """All eight fusion metrics of the evaluation suite as a dict."""
    f, v, r = _flat_map(fused), _flat_map(vis_y), _flat_map(ir)
    if f.shape != v.shape or f.shape != r.shape:
        raise MetricError(f"shape mismatch: {f.shape} vs {v.shape} vs {r.shape}")
    return {
        "psnr": 0.5 * (psnr(f, v) + psnr(f, r)),
        "ssim": 0.5 * (ssim(f, v) + ssim(f, r)),
        "qabf": qabf(f, v, r),
        "cc": 0.5 * (pearson(f, v) + pearson(f, r)),
        "scd": pearson(f - v, r) + pearson(f - r, v),
        "sd": float(np.std(f * 255.0)),
        "ag": average_gradient(f),
        "sf": spatial_frequency(f),
    }


# counting metrics ------------------------------------------------------------

def _region_edges(dim, n_regions):
    """Proportional integer split; level l+1 boundaries refine level l."""
    return [dim * k // n_regions for k in range(n_regions + 1)]


def game(est_density, gt_points, level, image_shape=None):
    """Grid Average Mean absolute Error at the given level.

    The density map is split into a 2^level x 2^level grid of regions and
    the absolute difference between estimated mass and ground-truth count
    is summed over regions. Points are in density-map coordinates unless
    image_shape=(H, W) of the source image is given, in which case they
    are rescaled to the map resolution first.
    """
    if level not in (0, 1, 2, 3):
        raise MetricError(f"GAME level must be in 0..3, got {level}")
    d = _flat_map(est_density)
    if np.any(d < 0):
        raise MetricError("estimated density must be nonnegative")
    h, w = d.shape
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if image_shape is not None:
        ih, iw = image_shape
        pts = pts * np.array([w / iw, h / ih])
    n = 2 ** level
    ye = _region_edges(h, n)
    xe = _region_edges(w, n)
    est = np.zeros((n, n))
    cnt = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            est[i, j] = d[ye[i]:ye[i + 1], xe[j]:xe[j + 1]].sum()
    if len(pts):
        cols = np.minimum(pts[:, 0].astype(int), w - 1)
        rows = np.minimum(pts[:, 1].astype(int), h - 1)
        ri = np.searchsorted(ye, rows, side="right") - 1
        ci = np.searchsorted(xe, cols, side="right") - 1
        for r, c in zip(ri, ci):
            cnt[r, c] += 1
    return float(np.abs(est - cnt).sum())


def counting_report(est_densities, gt_point_lists, image_shapes=None):
    """Dataset GAME(0..3) means and RMSE over per-image total-count errors."""
    if len(est_densities) == 0 or len(est_densities) != len(gt_point_lists):
        raise MetricError("need equal-length nonempty density and point collections")
    shapes = image_shapes if image_shapes is not None else [None] * len(est_densities)
    games = np.zeros((len(est_densities), 4))
    sq_errors = []
    for i, (d, pts) in enumerate(zip(est_densities, gt_point_lists)):
        for level in range(4):
            games[i, level] = game(d, pts, level, shapes[i])
        err = float(np.asarray(_flat_map(d)).sum()) - len(np.asarray(pts).reshape(-1, 2))
        sq_errors.append(err * err)
    return games.mean(axis=0), float(np.sqrt(np.mean(sq_errors)))
