"""Exact marginal scaling of sampled individuals.

Categorical cells carry per-row probability vectors up to this point.
Here each unit/feature pair gets an integer class budget derived from the
coarse proportions (largest-remainder apportionment), rows draw classes
from their vectors restricted to classes with remaining budget, and the
final counts match the budget exactly.  Continuous features are shifted
so the unit mean equals the coarse mean, flooring at zero.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .rng import draw_rows

_SNAP_TOL = 1e-9
_MAX_SHIFT_PASSES = 5
_SHIFT_RESIDUAL_TOL = 1e-6


def integerize_budget(population: int, proportions: np.ndarray) -> np.ndarray:
    """Integer per-class counts via largest-remainder apportionment.

    Floors of population * p are topped up in order of descending
    fractional part, ties broken by class declaration order.  Products
    within 1e-9 of an integer are snapped first so count-rational
    proportions reproduce their counts exactly.
    """
    p = np.asarray(proportions, dtype=float)
    raw = population * p
    nearest = np.rint(raw)
    raw = np.where(np.abs(raw - nearest) < _SNAP_TOL, nearest, raw)
    base = np.floor(raw).astype(np.int64)
    remaining = int(population - base.sum())
    if remaining < 0:
        raise DataError("integerize_budget: proportions sum above 1")
    if remaining > 0:
        frac = raw - base
        order = np.argsort(-frac, kind="stable")
        base[order[:remaining]] += 1
    return base


def assign_categories(
    prob_rows: np.ndarray, budget: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Assign one class per row under an exact per-class budget.

    Rows are processed in order; each draws from its probability vector
    restricted to classes with remaining budget (masked and renormalized),
    and the drawn class's budget decrements.  A row whose vector has no
    mass on any in-budget class falls back to a draw proportional to the
    remaining budget, which keeps the procedure terminating where the
    rejection-sampling reading would loop forever.

    Returns the (n,) class-index array; final counts equal the budget.
    """
    prob_rows = np.asarray(prob_rows, dtype=float)
    n, c = prob_rows.shape
    budget = np.asarray(budget, dtype=np.int64).copy()
    if budget.shape != (c,) or budget.min() < 0:
        raise DataError("assign_categories: budget shape/sign mismatch")
    if int(budget.sum()) != n:
        raise DataError(f"assign_categories: budget sums to {int(budget.sum())}, expected {n}")
    if not np.all(np.isfinite(prob_rows)) or prob_rows.min() < 0:
        raise DataError("assign_categories: probability rows must be finite and nonnegative")

    out = np.empty(n, dtype=np.int64)
    start = 0
    while start < n:
        mask = budget > 0
        masked = prob_rows[start:] * mask
        mass = masked.sum(axis=1)
        zero_rows = np.flatnonzero(mass <= 0.0)
        stop = n - start if zero_rows.size == 0 else int(zero_rows[0])
        accepted = 0
        if stop > 0:
            draws = draw_rows(masked[:stop], rng.random(stop))
            # cumulative per-class tally; the first row that overdraws a class
            # invalidates itself and everything after it
            onehot = np.zeros((stop, c), dtype=np.int64)
            onehot[np.arange(stop), draws] = 1
            over = np.cumsum(onehot, axis=0) > budget
            bad = np.flatnonzero(over.any(axis=1))
            accepted = stop if bad.size == 0 else int(bad[0])
            if accepted > 0:
                out[start : start + accepted] = draws[:accepted]
                budget -= np.bincount(draws[:accepted], minlength=c)
                start += accepted
                continue
        # single fallback row: no mass on any in-budget class
        idx = int(draw_rows(budget[None, :].astype(float), rng.random(1))[0])
        out[start] = idx
        budget[idx] -= 1
        start += 1
    return out


def shift_continuous(values: np.ndarray, target_mean: float) -> np.ndarray:
    """Shift a unit's values so their mean equals the coarse mean.

    Every value moves by (target mean - sample mean); negatives are
    floored at zero with the excess removed proportionally from the
    positive values (at most 5 passes, residual <= 1e-6 relative).
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataError("shift_continuous: empty unit")
    if target_mean < 0.0:
        raise DataError(f"shift_continuous: negative target mean {target_mean}")
    shifted = values + (target_mean - values.mean())
    if shifted.min() >= 0.0:
        return shifted
    target_sum = target_mean * values.size
    for _ in range(_MAX_SHIFT_PASSES):
        if shifted.min() >= 0.0:
            break
        shifted = np.maximum(shifted, 0.0)
        total = shifted.sum()
        if total <= 0.0:
            break
        shifted *= target_sum / total
    residual = abs(shifted.mean() - target_mean) / max(1.0, abs(target_mean))
    if residual > _SHIFT_RESIDUAL_TOL:
        raise DataError(f"shift_continuous: residual {residual:.3e} above tolerance")
    return shifted
