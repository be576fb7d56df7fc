"""Second-order structured pruning with least-squares weight compensation."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_index_set, check_matrix
from ..exceptions import InvalidConfig, InvalidShape
from ..linalg import DEFAULT_DAMPING, damped_inverse, damping_value, gram, inverse_submatrix_inverse
from .trajectory import PruneStep, PruningTrajectory, StructureSpec


def obs_importance(W, Hinv, M) -> float:
    """Output error incurred by removing columns ``M`` with optimal compensation.

    ``sum_i W[i, M] @ inv(Hinv[M, M]) @ W[i, M].T``
    """
    W = check_matrix(W, name="W")
    M = check_index_set(M, W.shape[1], name="M")
    A = inverse_submatrix_inverse(Hinv, M)
    WM = W[:, M]
    return float(np.sum((WM @ A) * WM))


def obs_compensation(W, Hinv, M) -> np.ndarray:
    """Update ``delta = -W[:, M] @ inv(Hinv[M, M]) @ Hinv[M, :]``.

    ``W + delta`` has exactly zero columns ``M``; the remaining columns absorb
    the removed contribution.
    """
    W = check_matrix(W, name="W")
    Hinv = check_matrix(Hinv, name="Hinv", square=True)
    if Hinv.shape[0] != W.shape[1]:
        raise InvalidShape(f"Hinv is {Hinv.shape}, W has {W.shape[1]} columns")
    M = check_index_set(M, W.shape[1], name="M")
    A = inverse_submatrix_inverse(Hinv, M)
    delta = -(W[:, M] @ A) @ Hinv[M, :]
    delta[:, M] = -W[:, M]
    return delta


def obs_prune_layer(
    W,
    H,
    spec: StructureSpec,
    l_max: int,
    *,
    damping: float = DEFAULT_DAMPING,
    stage: int = 0,
) -> PruningTrajectory:
    """Greedily remove ``l_max`` column groups, compensating after every removal.

    Each iteration re-inverts the damped Hessian restricted to the surviving
    columns, scores every surviving group against the current weights, drops
    the cheapest (lowest group index on ties) and applies its compensation.
    The damping value is fixed from the full Hessian.
    """
    W = check_matrix(W, name="W").copy()
    H = check_matrix(H, name="H", square=True)
    if spec.axis != "cols":
        raise InvalidConfig("second-order pruning removes column groups")
    if H.shape[0] != W.shape[1]:
        raise InvalidShape(f"H is {H.shape}, W has {W.shape[1]} columns")
    if not 0 <= l_max <= spec.n_groups:
        raise InvalidConfig(f"l_max {l_max} outside [0, {spec.n_groups}]")
    lam = damping_value(H, damping)

    alive = list(range(spec.n_groups))
    snapshots = [W.copy()]
    steps = []
    for _ in range(l_max):
        R = spec.indices(alive)
        pos = {int(c): k for k, c in enumerate(R)}
        Hinv = damped_inverse(H[np.ix_(R, R)], damp=lam)
        WR = W[:, R]
        best, best_imp = None, np.inf
        for g in alive:
            local = [pos[c] for c in spec.groups[g]]
            imp = obs_importance(WR, Hinv, local)
            if imp < best_imp:
                best, best_imp = g, imp
        local = [pos[c] for c in spec.groups[best]]
        delta_R = obs_compensation(WR, Hinv, local)
        delta = np.zeros_like(W)
        delta[:, R] = delta_R
        W = W + delta
        W[:, list(spec.groups[best])] = 0.0
        alive.remove(best)
        steps.append(PruneStep(group=best, importance=best_imp, delta=delta))
        snapshots.append(W.copy())
    return PruningTrajectory(
        stage=stage,
        layer_id=spec.layer_id,
        kind="weights",
        n_groups=spec.n_groups,
        steps=tuple(steps),
        snapshots=tuple(snapshots),
        spec=spec,
    )


class OBSPruner(TransformerMixin, BaseEstimator):
    """Second-order column-group pruner for one linear layer.

    ``fit`` takes calibration inputs of shape ``(n_samples, d_in)`` and builds
    the full greedy trajectory up to ``max_level``. ``transform`` applies the
    pruned layer at ``level`` (no bias).

    Parameters
    ----------
    weight : array of shape (d_out, d_in)
    group_size : int, default=1
        Contiguous columns removed together.
    max_level : int or None
        Number of groups to remove in the trajectory; all groups when None.
    level : int, default=0
        Level used by ``transform`` and ``pruned_weight``.
    damping : float, default=0.01
        Fraction of ``mean(diag(H))`` added to the diagonal.
    """

    def __init__(self, weight=None, group_size=1, max_level=None, level=0, damping=DEFAULT_DAMPING):
        self.weight = weight
        self.group_size = group_size
        self.max_level = max_level
        self.level = level
        self.damping = damping

    def fit(self, X, y=None):
        X = check_matrix(X, name="X")
        W = check_matrix(self.weight, name="weight")
        if X.shape[1] != W.shape[1]:
            raise InvalidShape(f"X has {X.shape[1]} features, weight expects {W.shape[1]}")
        self.spec_ = StructureSpec.contiguous("layer", W.shape[1], self.group_size)
        l_max = self.spec_.n_groups if self.max_level is None else self.max_level
        self.hessian_ = gram(X.T)
        self.trajectory_ = obs_prune_layer(W, self.hessian_, self.spec_, l_max, damping=self.damping)
        self.importances_ = np.array([s.importance for s in self.trajectory_.steps])
        self.n_features_in_ = W.shape[1]
        return self

    def pruned_weight(self, level=None) -> np.ndarray:
        check_is_fitted(self, "trajectory_")
        return self.trajectory_.weight(self.level if level is None else level)

    def transform(self, X):
        X = check_matrix(X, name="X")
        return X @ self.pruned_weight().T
