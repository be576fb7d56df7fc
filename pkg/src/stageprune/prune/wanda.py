"""Structural Wanda: weight magnitude times input-activation norm."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_matrix
from ..exceptions import InvalidConfig, InvalidShape
from .trajectory import PruneStep, PruningTrajectory, StructureSpec


@dataclass(frozen=True)
class WandaScores:
    layer_id: str
    elementwise: np.ndarray  # (d_out, d_in)
    group_scores: np.ndarray  # (n_groups,)
    spec: StructureSpec


def wanda_scores(W, X, spec: StructureSpec, *, aggregate: str = "head") -> WandaScores:
    """Element scores ``|W_ij| * ||X_j||`` and their per-group aggregate.

    ``X`` has shape ``(d_in, n_columns)``. Row groups are aggregated either as
    ``aggregate="head"`` (sum over the group's rows and all inputs, divided by
    the number of rows) or ``aggregate="channel"`` (per-row sum over inputs
    divided by ``d_in``, then averaged over the rows in the group). Column
    groups sum their columns and divide by the group size.

    Every sum is exactly rounded (``math.fsum``), so scores do not depend on
    summation order and ties between equal groups are genuine.
    """
    W = check_matrix(W, name="W")
    X = check_matrix(X, name="X")
    if X.shape[0] != W.shape[1]:
        raise InvalidShape(f"X has {X.shape[0]} rows, W has {W.shape[1]} columns")
    norms = np.sqrt([math.fsum(row) for row in (X * X).tolist()])
    S = np.abs(W) * norms[None, :]
    if spec.axis == "rows":
        if aggregate == "head":
            per_group = [_fsum(S[list(g), :]) / len(g) for g in spec.groups]
        elif aggregate == "channel":
            per_row = np.array([math.fsum(row) / W.shape[1] for row in S.tolist()])
            per_group = [_fsum(per_row[list(g)]) / len(g) for g in spec.groups]
        else:
            raise InvalidConfig(f"unknown aggregate {aggregate!r}")
    else:
        per_group = [_fsum(S[:, list(g)]) / len(g) for g in spec.groups]
    return WandaScores(spec.layer_id, S, np.asarray(per_group, dtype=np.float64), spec)


def _fsum(a: np.ndarray) -> float:
    return math.fsum(a.ravel().tolist())


def wanda_prune_layer(scores: WandaScores, l_max: int, *, stage: int = 0) -> PruningTrajectory:
    """Mask-only trajectory: level ``k`` removes the ``k`` lowest-scoring groups.

    Ties go to the lower group index.
    """
    n = scores.spec.n_groups
    if not 0 <= l_max <= n:
        raise InvalidConfig(f"l_max {l_max} outside [0, {n}]")
    order = np.argsort(scores.group_scores, kind="stable")[:l_max]
    steps = tuple(PruneStep(group=int(g), importance=float(scores.group_scores[g])) for g in order)
    return PruningTrajectory(stage=stage, layer_id=scores.layer_id, kind="mask", n_groups=n, steps=steps, spec=scores.spec)


def apply_group_mask(W, spec: StructureSpec, removed) -> np.ndarray:
    W = np.array(W, dtype=np.float64, copy=True)
    idx = spec.indices(removed)
    if spec.axis == "rows":
        W[idx, :] = 0.0
    else:
        W[:, idx] = 0.0
    return W


class WandaPruner(TransformerMixin, BaseEstimator):
    """Structural Wanda for one linear layer, fitted on ``(n_samples, d_in)`` inputs.

    Groups are contiguous runs of ``group_size`` rows (``axis="rows"``) or
    columns. ``transform`` applies the masked layer at ``level``.
    """

    def __init__(self, weight=None, group_size=1, axis="rows", aggregate="channel", max_level=None, level=0):
        self.weight = weight
        self.group_size = group_size
        self.axis = axis
        self.aggregate = aggregate
        self.max_level = max_level
        self.level = level

    def fit(self, X, y=None):
        X = check_matrix(X, name="X")
        W = check_matrix(self.weight, name="weight")
        size = W.shape[0] if self.axis == "rows" else W.shape[1]
        self.spec_ = StructureSpec.contiguous("layer", size, self.group_size, axis=self.axis)
        self.scores_ = wanda_scores(W, X.T, self.spec_, aggregate=self.aggregate)
        l_max = self.spec_.n_groups if self.max_level is None else self.max_level
        self.trajectory_ = wanda_prune_layer(self.scores_, l_max)
        self.n_features_in_ = W.shape[1]
        return self

    def pruned_weight(self, level=None) -> np.ndarray:
        check_is_fitted(self, "trajectory_")
        lvl = self.level if level is None else level
        return apply_group_mask(self.weight, self.spec_, self.trajectory_.removed(lvl))

    def transform(self, X):
        X = check_matrix(X, name="X")
        return X @ self.pruned_weight().T
