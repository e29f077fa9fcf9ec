"""Command-line interface: synth / train / advtrain / attack / eval / plot.

Exit codes: 0 success, 1 runtime error, 2 usage error. All diagnostics go
to stderr; data goes only to the paths named in flags. The FC_THREADS
environment variable caps BLAS worker threads (applied before numpy
loads, so it must be set when the process starts).
"""

import argparse
import os
import sys

__version__ = "0.1.0"

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap():
    cap = os.environ.get("FC_THREADS")
    if not cap:
        return
    if "numpy" in sys.modules:
        print("fusioncounting: FC_THREADS set after numpy import; cap may not apply",
              file=sys.stderr)
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fusioncounting",
        description="Joint visible-infrared fusion and crowd counting experiments.")
    parser.add_argument("--version", action="version", version=f"fusioncounting {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-T dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", default="64x64", help="image size as HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--people", default="5..40", help="person count range MIN..MAX")

    for name in ("train", "advtrain"):
        p = sub.add_parser(name, help=f"{name} a model on a dataset directory")
        p.add_argument("--data", required=True)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--out", required=True, help="checkpoint output path")
        p.add_argument("--log", default=None, help="training log CSV (default: train_log.csv beside checkpoint)")
        p.add_argument("--mode", default=None,
                       choices=["multitask", "st_fusion", "st_count", "no_dw", "series"])
        if name == "advtrain":
            p.add_argument("--eps", type=float, default=None, help="PGD epsilon, 8-bit units")
            p.add_argument("--alpha", type=float, default=None, help="PGD step, 8-bit units")
            p.add_argument("--iters", type=int, default=None)
            p.add_argument("--target", default=None, choices=["visible", "infrared", "both"])

    p = sub.add_parser("attack", help="write a PGD-attacked copy of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for attacked samples")
    p.add_argument("--eps", type=float, default=20.0)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--iters", type=int, default=7)
    p.add_argument("--target", default="both", choices=["visible", "infrared", "both"])

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="metrics CSV output path")
    p.add_argument("--attack", action="store_true", help="attack inputs before evaluating")
    p.add_argument("--eps", type=float, default=20.0)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--iters", type=int, default=7)
    p.add_argument("--target", default="both", choices=["visible", "infrared", "both"])
    p.add_argument("--dump-fused", default=None, help="directory for fused output images")

    p = sub.add_parser("plot", help="draw loss/weight curves from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="SVG output path")
    return parser


def _parse_size(text):
    from .errors import ConfigError

    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError:
        raise ConfigError(f"bad --size {text!r}, expected HxW like 64x64")


def _parse_people(text):
    from .errors import ConfigError

    try:
        lo, hi = (int(v) for v in text.split(".."))
        if not (0 <= lo <= hi):
            raise ValueError
        return lo, hi
    except ValueError:
        raise ConfigError(f"bad --people {text!r}, expected MIN..MAX like 5..40")


def _cmd_synth(args):
    from pathlib import Path

    from .rgbt_data import make_dataset, write_dataset

    h, w = _parse_size(args.size)
    samples = make_dataset(args.count, size=(h, w), base_seed=args.seed,
                           people_range=_parse_people(args.people))
    write_dataset(samples, Path(args.out))
    print(f"wrote {len(samples)} samples to {args.out}", file=sys.stderr)
    return 0


def _load_train_pieces(args):
    from .rgbt_data import read_dataset
    from .train_harness import parse_train_config

    cfg = parse_train_config(args.config)
    if args.mode is not None:
        from dataclasses import replace
        cfg = replace(cfg, mode=args.mode)
    samples = read_dataset(args.data)
    return cfg, samples


def _cmd_train(args, adversarial=False):
    from dataclasses import replace
    from pathlib import Path

    from .fusion_net import save_checkpoint
    from .train_harness import adv_train, train, write_train_log

    cfg, samples = _load_train_pieces(args)
    if adversarial:
        overrides = {"adversarial": True}
        for key, attr in (("epsilon", "eps"), ("alpha", "alpha"),
                          ("iters", "iters"), ("target", "target")):
            value = getattr(args, attr)
            if value is not None:
                overrides[key] = value
        cfg = replace(cfg, **overrides)
        params, log = adv_train(samples, cfg)
    else:
        params, log = train(samples, cfg)
    save_checkpoint(args.out, params)
    log_path = args.log or str(Path(args.out).parent / "train_log.csv")
    write_train_log(log_path, log)
    print(f"trained {cfg.epochs} epochs (mode={cfg.mode}); "
          f"checkpoint {args.out}, log {log_path}", file=sys.stderr)
    return 0


def _cmd_attack(args):
    from pathlib import Path

    from .adversary import AttackConfig, linf_distance, pgd_attack
    from .fusion_net import load_checkpoint
    from .rgbt_data import read_dataset, write_dataset
    from .train_harness import evaluate, write_attack_report

    params = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    cfg = AttackConfig(epsilon=args.eps, alpha=args.alpha, iters=args.iters,
                       target=args.target)
    attacked = [pgd_attack(params, s, cfg) for s in samples]
    write_dataset(attacked, Path(args.out))
    clean_eval = evaluate(params, samples)
    clean_losses = clean_eval.fusion_losses + clean_eval.count_losses
    adv_eval = evaluate(params, attacked)
    adv_losses = adv_eval.fusion_losses + adv_eval.count_losses
    norms = [linf_distance(a, s) for a, s in zip(attacked, samples)]
    write_attack_report(Path(args.out) / "attack_report.csv",
                        clean_losses, adv_losses, norms)
    print(f"attacked {len(samples)} samples into {args.out}", file=sys.stderr)
    return 0


def _cmd_eval(args):
    from pathlib import Path

    from .adversary import AttackConfig
    from .fusion_net import load_checkpoint
    from .rgbt_data import _write_pnm, read_dataset
    from .train_harness import evaluate, write_metrics_csv

    params = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    attack = None
    if args.attack:
        attack = AttackConfig(epsilon=args.eps, alpha=args.alpha,
                              iters=args.iters, target=args.target)
    result = evaluate(params, samples, attack=attack)
    write_metrics_csv(args.report, result)
    if args.dump_fused:
        out = Path(args.dump_fused)
        out.mkdir(parents=True, exist_ok=True)
        for i, fused in enumerate(result.fused_images):
            _write_pnm(out / f"fused_{i:05d}.pgm", fused, "P5")
    s = result.summary
    print(f"evaluated {len(samples)} samples: GAME(0)={s.game[0]:.3f} "
          f"RMSE={s.rmse:.3f} SSIM={s.ssim:.4f} PSNR={s.psnr:.2f}", file=sys.stderr)
    return 0


# SVG plotting ---------------------------------------------------------------

_SVG_W, _SVG_H = 900, 420
_PANEL = dict(x0=70, y0=40, w=330, h=300)
_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def _polyline(xs, ys, color):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _panel_coords(values, epochs, x0, y0, w, h, log_scale=False):
    import numpy as np

    vals = np.asarray(values, dtype=float)
    if log_scale:
        vals = np.log10(np.maximum(vals, 1e-12))
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        hi = lo + 1.0
    t_lo, t_hi = min(epochs), max(epochs)
    span = max(t_hi - t_lo, 1)
    xs = [x0 + w * (e - t_lo) / span for e in epochs]
    ys = [y0 + h * (1.0 - (v - lo) / (hi - lo)) for v in vals]
    return xs, ys


def make_loss_curve_svg(rows):
    """Two panels: per-epoch losses (log scale) and lambda weights."""
    epochs = [r.epoch for r in rows]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
             f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
             '<rect width="100%" height="100%" fill="white"/>']
    panels = (
        (70, [("l_fusion", [r.l_fusion for r in rows]),
              ("l_count", [r.l_count for r in rows]),
              ("l_total", [r.l_total for r in rows])], True,
         "epoch-mean loss (log10 scale)"),
        (520, [("lambda1", [r.lambda1 for r in rows]),
               ("lambda2", [r.lambda2 for r in rows])], False,
         "task weights"),
    )
    color_idx = 0
    for x0, series, log_scale, title in panels:
        y0, w, h = _PANEL["y0"], _PANEL["w"], _PANEL["h"]
        parts.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" '
                     'fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0}" y="{y0 - 12}" font-size="14">{title}</text>')
        parts.append(f'<text x="{x0 + w / 2 - 20}" y="{y0 + h + 30}" font-size="12">epoch</text>')
        for li, (label, values) in enumerate(series):
            color = _COLORS[color_idx]
            color_idx += 1
            xs, ys = _panel_coords(values, epochs, x0, y0, w, h, log_scale)
            parts.append(_polyline(xs, ys, color))
            parts.append(f'<text x="{x0 + w - 80}" y="{y0 + 16 + 14 * li}" '
                         f'font-size="12" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _cmd_plot(args):
    from .train_harness import read_train_log

    rows = read_train_log(args.log)
    svg = make_loss_curve_svg(rows)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(svg)
    print(f"plotted {len(rows)} epochs to {args.out}", file=sys.stderr)
    return 0


def main(argv=None):
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    from .errors import FusionCountingError

    handlers = {
        "synth": _cmd_synth,
        "train": lambda a: _cmd_train(a, adversarial=False),
        "advtrain": lambda a: _cmd_train(a, adversarial=True),
        "attack": _cmd_attack,
        "eval": _cmd_eval,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except FusionCountingError as exc:
        print(f"fusioncounting: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fusioncounting: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
