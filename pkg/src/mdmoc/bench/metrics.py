"""Continual-learning metrics over an accuracy matrix.

``R[i, j]`` is the accuracy on task j after learning through task i
(0-based).  ACC, BWT and FWT follow the GEM conventions; FWT uses
``1 / class_count`` as its reference accuracy.  Undefined cells are NaN.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from ..errors import ValidationError
from ..merge_engine import MergeState, unmerge


@dataclass(frozen=True, eq=False)
class MetricReport:
    acc_matrix: np.ndarray
    acc: float
    bwt: float
    fwt: float
    uad: float = float("nan")


def _check_matrix(r: np.ndarray, need_fwt: bool) -> None:
    t = r.shape[0]
    if r.ndim != 2 or r.shape != (t, t) or t == 0:
        raise ValidationError("accuracy matrix must be square and non-empty")
    lower = np.tril_indices(t)
    if np.any(np.isnan(r[lower])):
        raise ValidationError("accuracy matrix is missing entries on or below the diagonal")
    if need_fwt and t > 1 and np.any(np.isnan(np.diag(r, 1))):
        raise ValidationError("accuracy matrix is missing the pre-training (superdiagonal) entries")
    defined = r[~np.isnan(r)]
    if np.any((defined < 0) | (defined > 1)):
        raise ValidationError("accuracies must lie in [0, 1]")


def compute_metrics(acc_matrix, chance: float | Iterable[float], uad: float = float("nan")) -> MetricReport:
    r = np.asarray(acc_matrix, dtype=np.float64)
    _check_matrix(r, need_fwt=True)
    t = r.shape[0]
    chance = np.broadcast_to(np.asarray(chance, dtype=np.float64), (t,))
    # exact sums of the signed terms, rounded once, then one division
    acc = math.fsum(r[t - 1]) / t
    if t > 1:
        bwt = math.fsum([r[t - 1, j] for j in range(t - 1)] + [-r[j, j] for j in range(t - 1)]) / (t - 1)
        fwt = math.fsum([r[j - 1, j] for j in range(1, t)] + [-chance[j] for j in range(1, t)]) / (t - 1)
    else:
        bwt = fwt = 0.0
    return MetricReport(r, float(acc), float(bwt), float(fwt), float(uad))


def compute_uad(
    state: MergeState,
    removed_id: str,
    accuracy: Callable[[np.ndarray, str], float],
    task_ids: Iterable[str] | None = None,
) -> tuple[float, float, MergeState]:
    """Mean accuracy drop on the remaining tasks caused by unmerging ``removed_id``.

    ``accuracy(theta_values, task_id)`` scores one task.  Returns the drop,
    the wall time of the unmerge itself, and the post-removal state.
    """
    if removed_id not in state.basis:
        raise ValidationError(f"model {removed_id!r} is not part of the merge")
    remaining = [i for i in (task_ids if task_ids is not None else state.ids) if i != removed_id]
    before = [accuracy(state.merged.values, i) for i in remaining]
    t0 = time.perf_counter()
    after_state = unmerge(state, removed_id)
    elapsed = time.perf_counter() - t0
    after = [accuracy(after_state.merged.values, i) for i in remaining]
    uad = math.fsum(before + [-a for a in after]) / len(remaining) if remaining else 0.0
    return uad, elapsed, after_state
