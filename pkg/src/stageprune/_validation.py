"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InvalidInput, InvalidSchedule, InvalidShape


def check_matrix(A, *, name: str = "matrix", dtype=np.float64, square: bool = False) -> np.ndarray:
    """Return ``A`` as a finite 2-D float array, raising ``InvalidShape`` on bad input."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] == 0 or A.shape[1] == 0:
        raise InvalidShape(f"{name} must be a non-empty 2-D array, got shape {A.shape}")
    try:
        A = check_array(A, dtype=dtype, ensure_all_finite=True, copy=False)
    except ValueError as exc:
        raise InvalidInput(f"{name}: {exc}") from exc
    if square and A.shape[0] != A.shape[1]:
        raise InvalidShape(f"{name} must be square, got shape {A.shape}")
    return A


def check_index_set(idx: Iterable[int], size: int, *, name: str = "index set") -> np.ndarray:
    idx = np.asarray(list(idx), dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 1-D collection")
    if np.unique(idx).size != idx.size:
        raise InvalidInput(f"{name} contains duplicates: {idx.tolist()}")
    if idx.min() < 0 or idx.max() >= size:
        raise InvalidInput(f"{name} out of range [0, {size}): {idx.tolist()}")
    return idx


def check_schedule(levels: Sequence[int], n_stages: int, l_max: int, budget: int | None = None) -> tuple[int, ...]:
    """Validate a stage-wise sparsity schedule and return it as a tuple of ints."""
    levels = tuple(int(v) for v in levels)
    if len(levels) != n_stages:
        raise InvalidSchedule(f"schedule has {len(levels)} stages, expected {n_stages}")
    bad = [v for v in levels if v < 0 or v > l_max]
    if bad:
        raise InvalidSchedule(f"levels {bad} outside [0, {l_max}]")
    if budget is not None and sum(levels) != budget:
        raise InvalidSchedule(f"schedule sums to {sum(levels)}, budget is {budget}")
    return levels
