# vslan/services/losses.py
from typing import Sequence, Union

import numpy as np

from vslan.core.diffcore import Tensor, as_tensor, index_select, log_softmax
from vslan.core.exceptions import SequenceError
from vslan.models.vocab import PAD

Reward = Union[float, Sequence[float], np.ndarray]


def xe_loss(logits: Tensor, targets) -> Tensor:
    """
    Masked negative log-likelihood per target token.

    ``logits`` is [T, vocab] or [B, T, vocab]; ``targets`` is [T] or [B, T]
    with PAD marking positions that do not count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = targets.reshape(1, -1)
    if logits.shape[:2] != targets.shape:
        raise SequenceError(f"logits {logits.shape} and targets {targets.shape} are not aligned")
    mask = (targets != PAD).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise SequenceError("xe_loss got no non-PAD targets")
    rows, cols = np.indices(targets.shape)
    picked = index_select(log_softmax(logits, axis=-1), (rows, cols, targets))
    return -(picked * mask).sum() * (1.0 / count)


def scst_loss(sample_log_prob: Tensor, r_sample: Reward, r_baseline: Reward) -> Tensor:
    """-(r_sample - r_baseline) * log p(sample), averaged over the batch when given one."""
    sample_log_prob = as_tensor(sample_log_prob)
    advantage = np.asarray(r_sample, dtype=np.float64) - np.asarray(r_baseline, dtype=np.float64)
    if advantage.shape != sample_log_prob.shape:
        advantage = np.broadcast_to(advantage, sample_log_prob.shape)
    loss = -(sample_log_prob * advantage)
    return loss.mean() if loss.ndim else loss


def shared_loss(xe, rl, eta: float):
    """eta * xe + (1 - eta) * rl."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eta == 1.0:
        return xe
    if eta == 0.0:
        return rl
    return xe * eta + rl * (1.0 - eta)
