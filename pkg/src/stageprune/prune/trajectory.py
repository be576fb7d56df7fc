from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..exceptions import InvalidConfig, InvalidInput


@dataclass(frozen=True)
class StructureSpec:
    """Equal-size index groups of one layer that are removed as a unit.

    ``axis`` says whether groups index weight columns (layer inputs, as in
    second-order pruning) or weight rows (layer outputs, as in structural
    Wanda on ``qkv``/``fc1``).
    """

    layer_id: str
    groups: tuple[tuple[int, ...], ...]
    axis: Literal["cols", "rows"] = "cols"

    def __post_init__(self):
        sizes = {len(g) for g in self.groups}
        if not self.groups or len(sizes) != 1:
            raise InvalidConfig(f"{self.layer_id}: groups must be non-empty and of equal size")
        flat = [i for g in self.groups for i in g]
        if len(set(flat)) != len(flat):
            raise InvalidConfig(f"{self.layer_id}: groups overlap")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_size(self) -> int:
        return len(self.groups[0])

    def indices(self, group_ids) -> np.ndarray:
        return np.array(sorted(i for g in group_ids for i in self.groups[g]), dtype=np.intp)

    @classmethod
    def contiguous(cls, layer_id: str, size: int, group_size: int, axis="cols") -> "StructureSpec":
        if group_size < 1 or size % group_size:
            raise InvalidConfig(f"{layer_id}: cannot split {size} indices into groups of {group_size}")
        groups = tuple(tuple(range(s, s + group_size)) for s in range(0, size, group_size))
        return cls(layer_id, groups, axis)


@dataclass(frozen=True)
class PruneStep:
    group: int
    importance: float
    delta: np.ndarray | None = None  # full-shape compensation, second-order backend only


@dataclass(frozen=True)
class PruningTrajectory:
    """Greedy removal order of one (stage, layer) and its per-level state.

    ``kind`` is ``"weights"`` when every level carries a compensated weight
    snapshot, ``"mask"`` for mask-only backends, and ``"drop"`` when the
    removed units are whole blocks.
    """

    stage: int
    layer_id: str
    kind: Literal["weights", "mask", "drop"]
    n_groups: int
    steps: tuple[PruneStep, ...]
    snapshots: tuple[np.ndarray, ...] | None = None  # level 0..max_level
    spec: StructureSpec | None = None

    @property
    def order(self) -> tuple[int, ...]:
        return tuple(s.group for s in self.steps)

    @property
    def max_level(self) -> int:
        return len(self.steps)

    def removed(self, level: int) -> tuple[int, ...]:
        if not 0 <= level <= self.max_level:
            raise InvalidInput(f"level {level} outside [0, {self.max_level}]")
        return tuple(sorted(self.order[:level]))

    def mask(self, level: int) -> np.ndarray:
        """Boolean keep-mask over groups at ``level``."""
        keep = np.ones(self.n_groups, dtype=bool)
        keep[list(self.removed(level))] = False
        return keep

    def weight(self, level: int) -> np.ndarray:
        if self.snapshots is None:
            raise InvalidInput(f"{self.layer_id}: {self.kind} trajectory stores no weights")
        return self.snapshots[level]


def removed_count(level: int, n_groups: int, l_max: int) -> int:
    """Groups removed from a layer with ``n_groups`` structures at a global level.

    Layers whose group count equals ``l_max`` remove exactly ``level`` groups;
    coarser layers remove ``floor(level * n_groups / l_max)``.
    """
    if not 0 <= level <= l_max:
        raise InvalidInput(f"level {level} outside [0, {l_max}]")
    return level * n_groups // l_max
