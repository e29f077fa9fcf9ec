"""PGD adversarial examples and the adversarial training-set augmentation.

The attack runs signed-gradient ascent on the weighted multi-task loss
(computed against the sample's clean labels), projecting every step into
the L-infinity ball of radius epsilon/255 around the clean input and into
[0,1]. Epsilon and alpha are given in 8-bit intensity units. Attacks can
target the visible image, the infrared image, or both.
"""

from dataclasses import dataclass

import numpy as np

from . import fusion_net, losses
from .autodiff import Tensor
from .errors import AttackError, ConfigError
from .rgbt_data import RgbtSample

TARGETS = ("visible", "infrared", "both")
OBJECTIVES = ("total", "fusion", "count")


@dataclass
class AttackConfig:
    epsilon: float = 20.0    # 8-bit intensity units
    alpha: float = 5.0
    iters: int = 7
    target: str = "both"
    objective: str = "total"

    def validate(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


def _default_loss(params, sample, lam, eta, count_sigma, objective):
    """Build the attack objective against the clean labels of `sample`."""
    clean_vis_y = losses.luminance(sample.visible)[:, :, None]
    clean_ir = sample.infrared
    scale = float(fusion_net.DOWNSAMPLE)
    map_points = sample.points / scale if len(sample.points) else sample.points

    def loss_fn(vis_t, ir_t):
        pyramid = fusion_net.encode(vis_t, ir_t, params)
        need_fusion = objective in ("total", "fusion") or params.arch == "series"
        fused = fusion_net.decode_fusion(pyramid, params) if need_fusion else None
        terms = []
        if objective in ("total", "fusion"):
            l_fus, _ = losses.fusion_loss(fused, clean_vis_y, clean_ir, eta)
            terms.append(float(lam[0]) * l_fus)
        if objective in ("total", "count"):
            if params.arch == "series":
                density = fusion_net.series_count(fused, params)
            else:
                density = fusion_net.decode_count(pyramid, params)
            l_cnt = losses.bayesian_count_loss(density, map_points, count_sigma)
            terms.append(float(lam[1]) * l_cnt)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    return loss_fn


def pgd_attack(params, sample: RgbtSample, cfg: AttackConfig, lam=(1.0, 1.0),
               eta=losses.DEFAULT_ETA, count_sigma=losses.DEFAULT_COUNT_SIGMA,
               loss_fn=None) -> RgbtSample:
    """Projected gradient descent on the multi-task loss; returns the
    perturbed sample with annotations and gt_density carried over unchanged.

    `loss_fn(vis_tensor, ir_tensor) -> scalar Tensor` may override the
    attacked objective (used by probe tests and ablation studies).
    """
    cfg.validate()
    if loss_fn is None:
        loss_fn = _default_loss(params, sample, lam, eta, count_sigma, cfg.objective)
    eps = cfg.epsilon / 255.0
    step = cfg.alpha / 255.0
    vis0 = sample.visible.transpose(2, 0, 1)[None]
    ir0 = sample.infrared.transpose(2, 0, 1)[None]
    vis, ir = vis0.copy(), ir0.copy()
    attack_vis = cfg.target in ("visible", "both")
    attack_ir = cfg.target in ("infrared", "both")
    for _ in range(cfg.iters):
        vis_t = Tensor(vis, requires_grad=attack_vis)
        ir_t = Tensor(ir, requires_grad=attack_ir)
        loss = loss_fn(vis_t, ir_t)
        loss.backward()
        if attack_vis:
            g = vis_t.grad
            if g is None or not np.all(np.isfinite(g)):
                raise AttackError("non-finite or missing gradient on visible input")
            vis = vis + step * np.sign(g)
            vis = np.clip(np.clip(vis, vis0 - eps, vis0 + eps), 0.0, 1.0)
        if attack_ir:
            g = ir_t.grad
            if g is None or not np.all(np.isfinite(g)):
                raise AttackError("non-finite or missing gradient on infrared input")
            ir = ir + step * np.sign(g)
            ir = np.clip(np.clip(ir, ir0 - eps, ir0 + eps), 0.0, 1.0)
    return RgbtSample(
        visible=vis[0].transpose(1, 2, 0),
        infrared=ir[0].transpose(1, 2, 0),
        points=sample.points.copy(),
        gt_density=sample.gt_density.copy() if sample.gt_density is not None else None,
    )


@dataclass
class TrainItem:
    """One training stream element: the (possibly attacked) inputs plus the
    clean sample whose images/labels supervise the losses."""

    sample: RgbtSample
    clean: RgbtSample
    adversarial: bool = False


def attack_dataset(samples, params, cfg, lam=(1.0, 1.0), **kwargs):
    """Attack every sample; order preserved."""
    return [pgd_attack(params, s, cfg, lam, **kwargs) for s in samples]


def augment_epoch(samples, params, cfg, lam=(1.0, 1.0), seed=0,
                  adversarial=None, **kwargs):
    """Interleaved clean/adversarial stream of 2N TrainItems, shuffled by seed.

    Precomputed adversarial twins may be passed via `adversarial` to avoid
    re-running the attack each epoch (the default single-generation mode).
    """
    if len(samples) < 1:
        raise ConfigError("augment_epoch needs at least one sample")
    if adversarial is None:
        adversarial = attack_dataset(samples, params, cfg, lam, **kwargs)
    if len(adversarial) != len(samples):
        raise ConfigError("clean and adversarial sets differ in length")
    stream = []
    for clean, adv in zip(samples, adversarial):
        stream.append(TrainItem(sample=clean, clean=clean, adversarial=False))
        stream.append(TrainItem(sample=adv, clean=clean, adversarial=True))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(stream))
    return [stream[i] for i in perm]


def linf_distance(a: RgbtSample, b: RgbtSample):
    """Largest per-channel deviation between two samples' images."""
    dv = np.abs(a.visible - b.visible).max() if a.visible.size else 0.0
    di = np.abs(a.infrared - b.infrared).max() if a.infrared.size else 0.0
    return max(float(dv), float(di))
