"""Training, adversarial training and evaluation loops.

Implements the multi-task training process: per epoch, the dynamic
weighting scheduler supplies (lambda1, lambda2) from the loss history,
batches run forward through the shared encoder into both decoders, and
Adam updates all parameters at a cosine-annealed learning rate. Ablation
modes: st_fusion / st_count (single head), no_dw (fixed unit weights) and
series (cascaded fused-image counting). Adversarial training consumes the
2N clean+attacked stream, supervising attacked samples against the clean
images and labels. Everything is deterministic in (seed, config, data).
"""

import csv
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import adversary, fusion_net, losses, quality_metrics, task_weighting
from .adversary import AttackConfig, TrainItem
from .autodiff import Tensor, narrow_batch
from .errors import ConfigError, FormatError, LossError, SchedulerError
from .fusion_net import DOWNSAMPLE

MODES = ("multitask", "st_fusion", "st_count", "no_dw", "series")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-5
    lr_min: float = 1e-7
    batch_size: int = 4
    seed: int = 0
    eta: tuple = losses.DEFAULT_ETA
    z: float = task_weighting.DEFAULT_Z
    mode: str = "multitask"
    count_sigma: float = losses.DEFAULT_COUNT_SIGMA
    data: str = None
    adversarial: bool = False
    epsilon: float = 20.0
    alpha: float = 5.0
    iters: int = 7
    target: str = "both"
    regenerate: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.lr > self.lr_min > 0):
            raise ConfigError(f"need lr > lr_min > 0, got lr={self.lr} lr_min={self.lr_min}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.eta) != 4:
            raise ConfigError(f"eta needs 4 weights, got {self.eta}")
        if self.count_sigma <= 0:
            raise ConfigError(f"count_sigma must be > 0, got {self.count_sigma}")
        if self.adversarial:
            self.attack_config().validate()

    def attack_config(self):
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha,
                            iters=self.iters, target=self.target)


@dataclass
class TrainLogRow:
    epoch: int
    l_fusion: float
    l_count: float
    l_total: float
    lambda1: float
    lambda2: float
    lr: float
    wall_ms: float

    COLUMNS = ("epoch", "l_fusion", "l_count", "l_total",
               "lambda1", "lambda2", "lr", "wall_ms")


def write_train_log(path, rows):
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f)
        writer.writerow(TrainLogRow.COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, repr(r.l_fusion), repr(r.l_count), repr(r.l_total),
                             repr(r.lambda1), repr(r.lambda2), repr(r.lr), repr(r.wall_ms)])


def read_train_log(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != TrainLogRow.COLUMNS:
            raise FormatError(f"{path}: unexpected train log header {header}")
        rows = []
        for row in reader:
            rows.append(TrainLogRow(int(row[0]), *[float(v) for v in row[1:]]))
        return rows


def parse_train_config(path):
    """Read a `key = value` config file; unknown keys are errors."""
    cfg = TrainConfig()
    known = {f.name: f for f in fields(TrainConfig)}
    updates = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            updates[key] = _parse_value(key, value, getattr(cfg, key), path, lineno)
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def _parse_value(key, value, default, path, lineno):
    try:
        if key == "eta":
            parts = [float(v) for v in value.split(",")]
            return tuple(parts)
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: bad value {value!r} for key {key!r}")


def cosine_lr(t, total, lr_max, lr_min):
    """Cosine annealing: lr_max at t=0 down to lr_min at t=total."""
    if t < 0 or t > total:
        raise SchedulerError(f"epoch index {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t / total))


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in params.tensors.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data = fusion_net._f32_snap(p.data - update)


def _stack_items(items):
    vis = np.stack([it.sample.visible.transpose(2, 0, 1) for it in items])
    ir = np.stack([it.sample.infrared.transpose(2, 0, 1) for it in items])
    ref_vis_y = np.stack([
        losses.luminance(it.clean.visible)[None, :, :] for it in items])
    ref_ir = np.stack([it.clean.infrared.transpose(2, 0, 1) for it in items])
    return Tensor(vis), Tensor(ir), ref_vis_y, ref_ir


def _map_points(points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts / float(DOWNSAMPLE)


def _batch_losses(items, params, cfg, lam):
    """Forward one batch and return (total Tensor, l_fusion value, l_count value)."""
    vis_t, ir_t, ref_vis_y, ref_ir = _stack_items(items)
    mode = cfg.mode
    need_fusion = mode != "st_count"
    need_count = mode != "st_fusion"
    pyramid = fusion_net.encode(vis_t, ir_t, params)
    fused = fusion_net.decode_fusion(pyramid, params) if need_fusion or mode == "series" else None

    l_f = None
    if need_fusion:
        l_f, _ = losses.fusion_loss(fused, ref_vis_y, ref_ir, cfg.eta)
    l_c = None
    if need_count:
        if mode == "series":
            density = fusion_net.series_count(fused, params)
        else:
            density = fusion_net.decode_count(pyramid, params)
        per_sample = []
        for i, it in enumerate(items):
            d_i = narrow_batch(density, i)
            per_sample.append(losses.bayesian_count_loss(
                d_i, _map_points(it.clean.points), cfg.count_sigma))
        acc = per_sample[0]
        for term in per_sample[1:]:
            acc = acc + term
        l_c = acc * (1.0 / len(per_sample))

    f_val = l_f.item() if l_f is not None else 0.0
    c_val = l_c.item() if l_c is not None else 0.0
    for name, value in (("l_fusion", f_val), ("l_count", c_val)):
        if not np.isfinite(value):
            raise LossError(f"non-finite {name} ({value}) in epoch batch")

    if mode == "st_fusion":
        total = l_f
    elif mode == "st_count":
        total = l_c
    else:
        total = losses.total_loss(l_f, l_c, lam)
    return total, f_val, c_val


def _mode_lambda(cfg, state, epoch):
    if cfg.mode in ("multitask", "series"):
        lam = task_weighting.compute_weights(state, epoch)
        return float(lam[0]), float(lam[1])
    if cfg.mode == "no_dw":
        return 1.0, 1.0
    if cfg.mode == "st_fusion":
        return 1.0, 0.0
    return 0.0, 1.0


def _train_items(samples):
    return [TrainItem(sample=s, clean=s, adversarial=False) for s in samples]


def _run_training(items_per_epoch, cfg, params):
    """Shared loop: items_per_epoch(epoch) yields the epoch's TrainItems."""
    state = task_weighting.WeightState(n_tasks=2, z=cfg.z)
    optimizer = Adam()
    log = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lam = _mode_lambda(cfg, state, epoch)
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr, cfg.lr_min)
        items = items_per_epoch(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
        f_vals, c_vals, t_vals = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            params.zero_grad()
            total, f_val, c_val = _batch_losses(batch, params, cfg, lam)
            total.backward()
            optimizer.step(params, lr)
            f_vals.append(f_val)
            c_vals.append(c_val)
            t_vals.append(total.item())
        task_weighting.record_epoch(state, [np.mean(f_vals), np.mean(c_vals)])
        log.append(TrainLogRow(
            epoch=epoch, l_fusion=float(np.mean(f_vals)), l_count=float(np.mean(c_vals)),
            l_total=float(np.mean(t_vals)), lambda1=lam[0], lambda2=lam[1],
            lr=float(lr), wall_ms=(time.perf_counter() - t0) * 1000.0))
    return params, log


def train(samples, cfg: TrainConfig):
    """Multi-task training on clean samples; returns (params, log rows)."""
    cfg.validate()
    if not samples:
        raise ConfigError("training needs a non-empty dataset")
    if cfg.adversarial:
        return adv_train(samples, cfg)
    arch = "series" if cfg.mode == "series" else "parallel"
    params = fusion_net.init_params(cfg.seed, arch=arch)
    items = _train_items(samples)

    def per_epoch(epoch):
        return items

    return _run_training(per_epoch, cfg, params)


def adv_train(samples, cfg: TrainConfig):
    """Adversarial training over the 2N clean+attacked stream.

    By default the attacked twins are generated once, before the epoch
    loop; cfg.regenerate refreshes them from the current parameters at
    the start of every epoch.
    """
    cfg.validate()
    if not samples:
        raise ConfigError("training needs a non-empty dataset")
    if cfg.mode == "series":
        raise ConfigError("adversarial training supports the parallel architecture only")
    attack_cfg = cfg.attack_config()
    params = fusion_net.init_params(cfg.seed, arch="parallel")
    lam_attack = (1.0, 1.0)
    fixed_adv = None
    if not cfg.regenerate:
        fixed_adv = adversary.attack_dataset(samples, params, attack_cfg, lam_attack,
                                             eta=cfg.eta, count_sigma=cfg.count_sigma)

    def per_epoch(epoch):
        adv = fixed_adv
        if cfg.regenerate:
            adv = adversary.attack_dataset(samples, params, attack_cfg, lam_attack,
                                           eta=cfg.eta, count_sigma=cfg.count_sigma)
        return adversary.augment_epoch(samples, params, attack_cfg, lam_attack,
                                       seed=[cfg.seed, epoch, 1], adversarial=adv)

    return _run_training(per_epoch, cfg, params)


@dataclass
class EvalResult:
    reports: list                  # per-image MetricReport
    summary: quality_metrics.MetricReport
    fusion_losses: np.ndarray      # per-image weighted fusion loss vs clean refs
    count_losses: np.ndarray       # per-image Bayesian counting loss
    fused_images: list             # (H,W,1) arrays, clean or attacked forward


def evaluate(params, samples, attack: AttackConfig = None, lam=(1.0, 1.0),
             eta=losses.DEFAULT_ETA, count_sigma=losses.DEFAULT_COUNT_SIGMA):
    """Run both heads over the dataset, optionally under a PGD attack.

    Fusion metrics and losses always compare against the clean sources;
    counting metrics compare against the clean annotations.
    """
    if not samples:
        raise ConfigError("evaluation needs a non-empty dataset")
    reports = []
    fusion_losses = []
    count_losses = []
    fused_images = []
    densities = []
    point_lists = []
    for clean in samples:
        eval_sample = clean
        if attack is not None:
            eval_sample = adversary.pgd_attack(params, clean, attack, lam,
                                               eta=eta, count_sigma=count_sigma)
        fused, density = fusion_net.forward(eval_sample, params)
        ref_vis_y = losses.luminance(clean.visible)[:, :, None]
        ref_ir = clean.infrared
        fm = quality_metrics.fusion_quality(fused, ref_vis_y, ref_ir)
        map_points = _map_points(clean.points)
        games = [quality_metrics.game(density, map_points, level) for level in range(4)]
        err = abs(float(np.asarray(density).sum()) - len(clean.points))
        reports.append(quality_metrics.MetricReport(
            psnr=fm["psnr"], ssim=fm["ssim"], qabf=fm["qabf"], cc=fm["cc"],
            scd=fm["scd"], sd=fm["sd"], ag=fm["ag"], sf=fm["sf"],
            game=np.asarray(games), rmse=err))
        l_fus, _ = losses.fusion_loss(fused, ref_vis_y, ref_ir, eta)
        fusion_losses.append(l_fus.item())
        count_losses.append(losses.bayesian_count_loss(density, map_points, count_sigma).item())
        fused_images.append(fused)
        densities.append(density)
        point_lists.append(map_points)
    game_means, rmse = quality_metrics.counting_report(densities, point_lists)
    summary = quality_metrics.MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        qabf=float(np.mean([r.qabf for r in reports])),
        cc=float(np.mean([r.cc for r in reports])),
        scd=float(np.mean([r.scd for r in reports])),
        sd=float(np.mean([r.sd for r in reports])),
        ag=float(np.mean([r.ag for r in reports])),
        sf=float(np.mean([r.sf for r in reports])),
        game=game_means, rmse=rmse)
    return EvalResult(reports=reports, summary=summary,
                      fusion_losses=np.asarray(fusion_losses),
                      count_losses=np.asarray(count_losses),
                      fused_images=fused_images)


def write_metrics_csv(path, result: EvalResult):
    """One row per image plus a final `summary` row, fixed column order."""
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f)
        writer.writerow(("image",) + quality_metrics.MetricReport.COLUMNS)
        for i, r in enumerate(result.reports):
            writer.writerow([i] + [repr(float(v)) for v in r.row()])
        writer.writerow(["summary"] + [repr(float(v)) for v in result.summary.row()])


def write_attack_report(path, clean_losses, attacked_losses, linf_norms):
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f)
        writer.writerow(("image", "clean_loss", "attacked_loss", "linf"))
        rows = zip(clean_losses, attacked_losses, linf_norms)
        for i, (c, a, d) in enumerate(rows):
            writer.writerow([i, repr(float(c)), repr(float(a)), repr(float(d))])
