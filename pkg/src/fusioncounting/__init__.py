"""Joint visible-infrared image fusion and crowd counting.

A desk-scale multi-task framework: a shared two-stream encoder with
per-layer cross-modal interaction feeds a fusion decoder and a counting
decoder, trained jointly with dynamically weighted losses and optional
PGD adversarial training. Submodules:

- rgbt_data: synthetic aligned RGB-T scenes, density maps, file formats
- autodiff: the numpy reverse-mode engine behind the model and losses
- fusion_net: encoder, interaction blocks, both decoders, checkpoints
- losses: fusion loss terms, Bayesian counting loss, weighted totals
- task_weighting: dynamic per-task weight scheduler
- adversary: PGD attacks and adversarial training-set augmentation
- quality_metrics: fusion metrics (PSNR/SSIM/Qabf/CC/SCD/SD/AG/SF),
  GAME and RMSE counting metrics
- train_harness: training/eval loops, Adam, cosine schedule, logging
- cli: the `fusioncounting` command

The top-level package imports lazily so the CLI can cap BLAS threads
before numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = ("adversary", "autodiff", "cli", "errors", "fusion_net", "losses",
               "quality_metrics", "rgbt_data", "task_weighting", "train_harness")


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
