"""Label-smoothed cross entropy."""
import numpy as np

from .. import tensor as T
from ..errors import ConfigError, ContractError, InputError


def cross_entropy_label_smoothed(logits, targets, eps=0.0, ignore_index=None):
    """Mean of ``(1 - eps) * NLL(target) + eps * mean_v NLL(v)`` over non-ignored positions."""
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {eps}")
    V = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise InputError(f"targets {targets.shape} do not match logits {logits.shape}")
    flat_t = targets.reshape(-1)
    keep = np.ones(flat_t.shape, dtype=bool) if ignore_index is None else flat_t != ignore_index
    if not keep.any():
        raise ContractError("every target position is padding")
    kept = flat_t[keep]
    if kept.min() < 0 or kept.max() >= V:
        bad = kept[(kept < 0) | (kept >= V)][0]
        raise InputError(f"target {int(bad)} is outside [0, {V})")
    lp = T.reshape(T.log_softmax(logits), (-1, V))
    rows = np.nonzero(keep)[0]
    nll = T.scale(T.getitem(lp, (rows, kept)), -1.0)
    loss = T.scale(T.sum_(nll), (1.0 - eps) / rows.size)
    if eps > 0.0:
        uniform = T.scale(T.sum_(T.getitem(lp, rows)), -eps / (rows.size * V))
        loss = T.add(loss, uniform)
    return loss
