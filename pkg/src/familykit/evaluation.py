"""Full-sequence causal evaluation: per-branch NLL and perplexity."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .model import FamilialModel, forward_branch
from .tensor import cross_entropy
from .training import IGNORE_INDEX, targets_for

EVAL_BATCH = 64


def branch_nll(model: FamilialModel, ids: np.ndarray, branch: int,
               window: int | None = None) -> tuple[float, int]:
    """Sum of next-token negative log-likelihoods over non-overlapping
    windows, and the number of scored positions."""
    window = window or model.config.ctx_len
    ids = np.asarray(ids, dtype=np.int64)
    n_windows = len(ids) // window
    if n_windows == 0:
        raise DataError(f"need at least {window} tokens to evaluate, got {len(ids)}")
    rows = ids[:n_windows * window].reshape(n_windows, window)
    total = 0.0
    count = 0
    for start in range(0, n_windows, EVAL_BATCH):
        batch = rows[start:start + EVAL_BATCH]
        targets = targets_for(batch)
        n_eff = int((targets != IGNORE_INDEX).sum())
        logits = forward_branch(model, batch, branch)
        loss = cross_entropy(logits, targets, ignore_index=IGNORE_INDEX)
        total += float(loss.data) * n_eff
        count += n_eff
    return total, count


def branch_perplexity(model: FamilialModel, ids: np.ndarray, branch: int,
                      window: int | None = None) -> float:
    total, count = branch_nll(model, ids, branch, window)
    return float(np.exp(total / count))
