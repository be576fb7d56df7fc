"""Precomputed pruning database and stage-conditioned weight routing.

One dense backbone is shared by every stage. The database stores, per
(stage, layer, removed-group count), either a compensated weight snapshot
(second-order backend) or the list of removed structures (mask-only and
layer-drop backends). Level 0 is never stored: it resolves to the backbone.

File layout (``.routedb``, see :mod:`stageprune.binio`): a JSON header with
``backend``, ``n_stages``, ``l_max``, ``T``, the layer registry (block, kind,
shape, axis, groups) and one record per entry, followed by little-endian
``<f4`` weight snapshots and ``<i4`` removed-group lists named
``"{stage}/{layer_id}/{k}/weight"`` and ``"{stage}/{layer_id}/{k}/removed"``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from ._validation import check_schedule
from .binio import read_container, write_container
from .calib import StagePartition
from .exceptions import IncompleteTrajectory, InvalidConfig
from .prune.layerdrop import BLOCKS_ID
from .prune.trajectory import PruningTrajectory, removed_count
from .toydiff.model import DenoiserModel, StageRoute

DB_MAGIC = b"SPRTDB01"
FLOAT_BYTES = 4
_BACKEND_OF_KIND = {"weights": "obs", "mask": "wanda", "drop": "layerdrop"}


@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    block: int | None
    kind: str  # qkv / proj / fc1 / fc2 / blocks
    shape: tuple[int, int] | None
    axis: str
    groups: tuple[tuple[int, ...], ...]

    @property
    def n_groups(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class RouteEntry:
    removed: np.ndarray  # int32 group ids, sorted
    weight: np.ndarray | None = None  # float32 snapshot, second-order only

    @property
    def nbytes(self) -> int:
        return int(self.removed.nbytes + (self.weight.nbytes if self.weight is not None else 0))

    @property
    def payload_bytes(self) -> int:
        """Bytes a routed forward actually reads: the snapshot, or else the removal list."""
        return int(self.weight.nbytes if self.weight is not None else self.removed.nbytes)


@dataclass
class RouteDatabase:
    backend: str
    n_stages: int
    l_max: int
    T: int
    layers: dict[str, LayerRecord]
    entries: dict[tuple[int, str, int], RouteEntry]
    backbone: DenoiserModel | None = field(default=None, repr=False)

    @property
    def partition(self) -> StagePartition:
        return StagePartition(self.n_stages, self.T)

    @property
    def nbytes(self) -> int:
        return sum(e.nbytes for e in self.entries.values())

    def removed_count(self, layer_id: str, level: int) -> int:
        return removed_count(level, self.layers[layer_id].n_groups, self.l_max)

    def resolve(self, stage: int, layer_id: str, level: int) -> RouteEntry | None:
        """Stored entry for a layer at a global level; None means the dense backbone."""
        k = self.removed_count(layer_id, level)
        if k == 0:
            return None
        try:
            return self.entries[(stage, layer_id, k)]
        except KeyError:
            raise IncompleteTrajectory(f"no entry for stage {stage}, layer {layer_id}, k={k}") from None

    def check_complete(self) -> None:
        for s in range(self.n_stages):
            for lid in self.layers:
                for level in range(1, self.l_max + 1):
                    self.resolve(s, lid, level)

    def save(self, path) -> Path:
        header = {
            "kind": "routedb",
            "backend": self.backend,
            "n_stages": self.n_stages,
            "l_max": self.l_max,
            "T": self.T,
            "layers": [
                {
                    "layer_id": r.layer_id,
                    "block": r.block,
                    "kind": r.kind,
                    "shape": list(r.shape) if r.shape else None,
                    "axis": r.axis,
                    "groups": [list(g) for g in r.groups],
                }
                for r in self.layers.values()
            ],
            "entries": [[s, lid, k] for (s, lid, k) in sorted(self.entries)],
        }
        arrays = {}
        for (s, lid, k) in sorted(self.entries):
            e = self.entries[(s, lid, k)]
            arrays[f"{s}/{lid}/{k}/removed"] = e.removed
            if e.weight is not None:
                arrays[f"{s}/{lid}/{k}/weight"] = e.weight
        return write_container(path, DB_MAGIC, header, arrays)

    @classmethod
    def load(cls, path, backbone: DenoiserModel | None = None) -> "RouteDatabase":
        header, arrays = read_container(path, DB_MAGIC)
        layers = {}
        for r in header["layers"]:
            layers[r["layer_id"]] = LayerRecord(
                r["layer_id"],
                r["block"],
                r["kind"],
                tuple(r["shape"]) if r["shape"] else None,
                r["axis"],
                tuple(tuple(g) for g in r["groups"]),
            )
        entries = {}
        for s, lid, k in header["entries"]:
            entries[(s, lid, k)] = RouteEntry(
                removed=arrays[f"{s}/{lid}/{k}/removed"], weight=arrays.get(f"{s}/{lid}/{k}/weight")
            )
        return cls(
            backend=header["backend"],
            n_stages=header["n_stages"],
            l_max=header["l_max"],
            T=header["T"],
            layers=layers,
            entries=entries,
            backbone=backbone,
        )


def _layer_record(traj: PruningTrajectory, backbone: DenoiserModel | None) -> LayerRecord:
    if traj.kind == "drop":
        return LayerRecord(BLOCKS_ID, None, "blocks", None, "blocks", tuple((b,) for b in range(traj.n_groups)))
    if traj.spec is None:
        raise InvalidConfig(f"{traj.layer_id}: trajectory carries no structure spec")
    block, kind = None, traj.layer_id.rsplit(".", 1)[-1]
    shape = None
    if backbone is not None:
        info = backbone.layer_registry()[traj.layer_id]
        block, shape = info.block, info.shape
    elif traj.snapshots is not None:
        shape = tuple(traj.snapshots[0].shape)
    if block is None and traj.layer_id.startswith("blocks."):
        block = int(traj.layer_id.split(".")[1])
    return LayerRecord(traj.layer_id, block, kind, shape, traj.spec.axis, traj.spec.groups)


def build_db(
    trajectories: Mapping[tuple[int, str], PruningTrajectory],
    *,
    l_max: int,
    partition: StagePartition,
    backbone: DenoiserModel | None = None,
) -> RouteDatabase:
    """Collect trajectories into a complete route database.

    Raises
    ------
    IncompleteTrajectory
        If some (stage, layer) is missing or stops short of the groups its
        layer needs at ``l_max``.
    """
    if not trajectories:
        raise IncompleteTrajectory("no trajectories supplied")
    kinds = {t.kind for t in trajectories.values()}
    if len(kinds) != 1:
        raise InvalidConfig(f"mixed trajectory kinds {sorted(kinds)}")
    backend = _BACKEND_OF_KIND[kinds.pop()]

    layers: dict[str, LayerRecord] = {}
    for (_, lid), traj in sorted(trajectories.items()):
        layers.setdefault(lid, _layer_record(traj, backbone))

    entries: dict[tuple[int, str, int], RouteEntry] = {}
    for s in range(partition.n):
        for lid, rec in layers.items():
            traj = trajectories.get((s, lid))
            if traj is None:
                raise IncompleteTrajectory(f"missing trajectory for stage {s}, layer {lid}")
            k_top = removed_count(l_max, rec.n_groups, l_max)
            if traj.max_level < k_top:
                raise IncompleteTrajectory(f"stage {s}, layer {lid}: trajectory stops at {traj.max_level} < {k_top}")
            for k in range(1, k_top + 1):
                weight = None
                if traj.kind == "weights":
                    weight = np.ascontiguousarray(traj.weight(k), dtype=np.float32)
                entries[(s, lid, k)] = RouteEntry(np.asarray(traj.removed(k), dtype=np.int32), weight)
    db = RouteDatabase(backend, partition.n, l_max, partition.T, layers, entries, backbone)
    db.check_complete()
    return db


def _stage_route(db: RouteDatabase, stage: int, level: int) -> StageRoute | None:
    overrides, head_masks, channel_masks, skip = {}, {}, {}, frozenset()
    cfg = db.backbone.config if db.backbone is not None else None
    for lid, rec in db.layers.items():
        entry = db.resolve(stage, lid, level)
        if entry is None:
            continue
        if rec.kind == "blocks":
            skip = frozenset(int(b) for b in entry.removed)
        elif entry.weight is not None:
            overrides[lid] = torch.from_numpy(entry.weight)
        elif rec.kind == "qkv":
            mask = torch.ones(cfg.num_heads)
            mask[torch.from_numpy(entry.removed.astype(np.int64))] = 0.0
            head_masks[rec.block] = mask
        elif rec.kind == "fc1":
            mask = torch.ones(cfg.mlp_hidden)
            for g in entry.removed:
                mask[list(rec.groups[g])] = 0.0
            channel_masks[rec.block] = mask
        else:
            raise InvalidConfig(f"cannot route mask entries for layer kind {rec.kind!r}")
    route = StageRoute(overrides, head_masks, channel_masks, skip)
    return None if route.is_empty else route


class RoutedModel:
    """Backbone plus a per-stage route table for one sparsity schedule.

    Calling it like the dense model picks the stage of the (shared) batch
    timestep and forwards through the backbone with that stage's entries.
    """

    def __init__(self, db: RouteDatabase, schedule: Sequence[int], routes: list[StageRoute | None]):
        self.db = db
        self.backbone = db.backbone
        self.schedule = tuple(schedule)
        self.partition = db.partition
        self.routes = routes

    def route_for(self, t: int) -> StageRoute | None:
        return self.routes[self.partition.stage_of(int(t))]

    def __call__(self, x, t, labels):
        return self.backbone(x, t, labels, route=self.route_for(int(t[0])))


def route(db: RouteDatabase, schedule: Sequence[int]) -> RoutedModel:
    """Resolve a schedule against the database; no weight arithmetic happens here."""
    if db.backbone is None:
        raise InvalidConfig("database has no backbone attached")
    levels = check_schedule(schedule, db.n_stages, db.l_max)
    routes = [_stage_route(db, s, lvl) for s, lvl in enumerate(levels)]
    return RoutedModel(db, levels, routes)


def materialize(db: RouteDatabase, stage: int, level: int) -> DenoiserModel:
    """A standalone copy of the backbone with one stage's pruning baked into its weights."""
    model = copy.deepcopy(db.backbone)
    with torch.no_grad():
        for lid, rec in db.layers.items():
            entry = db.resolve(stage, lid, level)
            if entry is None:
                continue
            if rec.kind == "blocks":
                for b in entry.removed:
                    blk = model.blocks[int(b)]
                    for lin in (blk.attn.proj, blk.mlp.fc2):
                        lin.weight.zero_()
                        lin.bias.zero_()
                continue
            lin = model.get_submodule(lid)
            if entry.weight is not None:
                lin.weight.copy_(torch.from_numpy(entry.weight))
                continue
            rows = sorted(i for g in entry.removed for i in rec.groups[g])
            lin.weight[rows, :] = 0.0
            lin.bias[rows] = 0.0
    return model


class StitchedModel:
    """Independent per-stage model copies swapped at stage boundaries."""

    def __init__(self, models: list[DenoiserModel], partition: StagePartition):
        self.models = models
        self.partition = partition

    def __call__(self, x, t, labels):
        return self.models[self.partition.stage_of(int(t[0]))](x, t, labels)


def stitch(db: RouteDatabase, schedule: Sequence[int]) -> StitchedModel:
    levels = check_schedule(schedule, db.n_stages, db.l_max)
    return StitchedModel([materialize(db, s, lvl) for s, lvl in enumerate(levels)], db.partition)


def memory_report(db: RouteDatabase, schedule: Sequence[int]) -> dict:
    """Analytic loading-memory comparison for one schedule.

    Stitching holds ``n_stages`` full backbone-shaped copies. Routing holds one
    backbone, minus any overridden layer that no stage reads densely, plus the
    entries the schedule resolves to. ``db_bytes`` is the whole database.
    """
    if db.backbone is None:
        raise InvalidConfig("database has no backbone attached")
    levels = check_schedule(schedule, db.n_stages, db.l_max)
    backbone_bytes = db.backbone.config.param_count() * FLOAT_BYTES
    loaded = 0
    dense_needed = {lid: False for lid in db.layers}
    for s, lvl in enumerate(levels):
        for lid in db.layers:
            entry = db.resolve(s, lid, lvl)
            if entry is None:
                dense_needed[lid] = True
            else:
                loaded += entry.payload_bytes
    released = 0
    if db.backend == "obs":
        for lid, rec in db.layers.items():
            if not dense_needed[lid]:
                released += rec.shape[0] * rec.shape[1] * FLOAT_BYTES
    routing = backbone_bytes - released + loaded
    stitching = db.n_stages * backbone_bytes
    return {
        "backend": db.backend,
        "n_stages": db.n_stages,
        "schedule": list(levels),
        "backbone_bytes": backbone_bytes,
        "routing_bytes": routing,
        "stitching_bytes": stitching,
        "ratio": routing / stitching,
        "db_bytes": db.nbytes,
        "db_ratio": db.nbytes / stitching,
    }
