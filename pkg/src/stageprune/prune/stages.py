"""Per-stage trajectory construction for every prunable structure of the model."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..calib import CalibrationSet, capture_activations
from ..exceptions import InvalidConfig, StagePruneError
from ..linalg import DEFAULT_DAMPING, gram
from ..toydiff.model import DenoiserModel
from .layerdrop import layerdrop_scores, layerdrop_trajectory
from .obs import obs_prune_layer
from .trajectory import PruningTrajectory, StructureSpec
from .wanda import wanda_scores, wanda_prune_layer

logger = logging.getLogger(__name__)

BACKENDS = ("obs", "wanda", "layerdrop")


def default_mlp_group_size(mlp_hidden: int, l_max: int) -> int:
    """Channels per MLP group: ``mlp_hidden / l_max`` when that divides, else 1."""
    if l_max >= 1 and mlp_hidden % l_max == 0:
        return mlp_hidden // l_max
    return 1


def model_structures(model: DenoiserModel, backend: str, mlp_group_size: int = 1) -> list[StructureSpec]:
    """Group layout of every layer a backend edits.

    Second-order pruning removes input columns of ``attn.proj`` (one group
    per head) and ``mlp.fc2`` (hidden channels). Wanda removes output rows of
    ``attn.qkv`` (the q, k and v rows of one head) and ``mlp.fc1``.
    """
    cfg = model.config
    C, hd, hidden = cfg.embed_dim, cfg.head_dim, cfg.mlp_hidden
    if hidden % mlp_group_size:
        raise InvalidConfig(f"mlp_hidden {hidden} not divisible by group size {mlp_group_size}")
    specs = []
    for b in range(cfg.depth):
        if backend == "obs":
            specs.append(StructureSpec.contiguous(f"blocks.{b}.attn.proj", C, hd, axis="cols"))
            specs.append(StructureSpec.contiguous(f"blocks.{b}.mlp.fc2", hidden, mlp_group_size, axis="cols"))
        elif backend == "wanda":
            heads = tuple(
                tuple(s * C + h * hd + k for s in range(3) for k in range(hd)) for h in range(cfg.num_heads)
            )
            specs.append(StructureSpec(f"blocks.{b}.attn.qkv", heads, axis="rows"))
            specs.append(StructureSpec.contiguous(f"blocks.{b}.mlp.fc1", hidden, mlp_group_size, axis="rows"))
        elif backend == "layerdrop":
            return []
        else:
            raise InvalidConfig(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    return specs


def _layer_trajectory(model, backend, spec, bundle, stage, damping) -> PruningTrajectory:
    W = model.layer_weight(spec.layer_id).detach().numpy().astype(np.float64)
    X = bundle[spec.layer_id]
    if backend == "obs":
        return obs_prune_layer(W, gram(X), spec, spec.n_groups, damping=damping, stage=stage)
    aggregate = "head" if spec.layer_id.endswith("qkv") else "channel"
    return wanda_prune_layer(wanda_scores(W, X, spec, aggregate=aggregate), spec.n_groups, stage=stage)


def build_stage_trajectories(
    model: DenoiserModel,
    backend: str,
    calibs: Sequence[CalibrationSet],
    l_max: int,
    *,
    mlp_group_size: int | None = None,
    damping: float = DEFAULT_DAMPING,
) -> dict[tuple[int, str], PruningTrajectory]:
    """Full trajectories for every (stage, layer), each stage using only its own calibration."""
    if not calibs:
        raise InvalidConfig("need one calibration set per stage")
    if backend == "layerdrop" and l_max > model.config.depth:
        raise InvalidConfig(f"layerdrop l_max {l_max} exceeds depth {model.config.depth}")
    gs = mlp_group_size or default_mlp_group_size(model.config.mlp_hidden, l_max)
    specs = model_structures(model, backend, gs)
    out: dict[tuple[int, str], PruningTrajectory] = {}
    for stage, calib in enumerate(calibs):
        if backend == "layerdrop":
            traj = layerdrop_trajectory(layerdrop_scores(model, calib), l_max, stage=stage)
            out[(stage, traj.layer_id)] = traj
            continue
        bundle = capture_activations(model, calib, layers=[s.layer_id for s in specs])
        for spec in specs:
            try:
                out[(stage, spec.layer_id)] = _layer_trajectory(model, backend, spec, bundle, stage, damping)
            except StagePruneError as exc:
                raise type(exc)(f"stage {stage}, layer {spec.layer_id}: {exc}") from exc
        logger.info("stage %d: %d trajectories built", stage, len(specs))
    return out
