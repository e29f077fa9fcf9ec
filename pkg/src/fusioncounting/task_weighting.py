"""Dynamic loss weighting over relative descent rates (Matthew effect).

Each task k tracks its epoch-mean loss L_k(t). From epoch 3 on, the
relative descent rate w_k = L_k(t-1) / L_k(t-2) feeds a softmax whose
complement is scaled by K/(K-1), so weights always sum to K and the task
whose loss is dropping fastest (smallest w) gets amplified.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SchedulerError

DEFAULT_Z = 3.0
RATIO_GUARD = 1e-12   # near-zero previous loss: treat the task as flat (w=1)


@dataclass
class WeightState:
    n_tasks: int = 2
    z: float = DEFAULT_Z
    history: list = field(default_factory=list)   # per epoch, array of K losses
    w: np.ndarray = None                          # last descent rates
    lam: np.ndarray = None                        # last computed weights

    def __post_init__(self):
        if self.n_tasks < 2:
            raise SchedulerError(f"need at least 2 tasks, got {self.n_tasks}")
        if self.w is None:
            self.w = np.ones(self.n_tasks)
        if self.lam is None:
            self.lam = np.ones(self.n_tasks)

    @property
    def epochs_recorded(self):
        return len(self.history)


def record_epoch(state: WeightState, epoch_losses) -> WeightState:
    """Append one epoch of per-task mean losses to the history."""
    losses = np.asarray(epoch_losses, dtype=np.float64)
    if losses.shape != (state.n_tasks,):
        raise SchedulerError(
            f"expected {state.n_tasks} per-task losses, got shape {losses.shape}")
    if not np.all(np.isfinite(losses)):
        raise SchedulerError(f"non-finite epoch loss: {losses}")
    if np.any(losses < 0):
        raise SchedulerError(f"negative epoch loss: {losses}")
    state.history.append(losses.copy())
    return state


def compute_weights(state: WeightState, t: int) -> np.ndarray:
    """Weights lambda_k(t) for epoch t (1-indexed), strictly causal.

    Epochs 1 and 2 use w_k = 1 (uniform weights); later epochs need the
    losses of epochs t-1 and t-2 recorded in the state history.
    """
    if t < 1:
        raise SchedulerError(f"epoch index must be >= 1, got {t}")
    k = state.n_tasks
    if t <= 2:
        w = np.ones(k)
    else:
        if state.epochs_recorded < t - 1:
            raise SchedulerError(
                f"epoch {t} needs {t - 1} recorded epochs, have {state.epochs_recorded}")
        prev1 = state.history[t - 2]   # L(t-1)
        prev2 = state.history[t - 3]   # L(t-2)
        w = np.ones(k)
        ok = prev2 >= RATIO_GUARD
        w[ok] = prev1[ok] / prev2[ok]
    lam = weights_from_rates(w, state.z)
    state.w = w
    state.lam = lam
    return lam


def weights_from_rates(w, z=DEFAULT_Z):
    """lambda_k = K/(K-1) * (1 - softmax(w*Z)_k); sums to K exactly."""
    w = np.asarray(w, dtype=np.float64)
    k = w.size
    logits = w * z
    logits = logits - logits.max()
    e = np.exp(logits)
    soft = e / e.sum()
    return (k / (k - 1.0)) * (1.0 - soft)
