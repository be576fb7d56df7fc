"""Depth pruning by input/output cosine similarity of whole blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..calib import CalibrationSet
from ..exceptions import DegenerateActivations, InvalidConfig
from ..toydiff.model import DenoiserModel
from .trajectory import PruneStep, PruningTrajectory

BLOCKS_ID = "blocks"


@dataclass(frozen=True)
class BlockRedundancy:
    block: int
    score: float  # mean cosine similarity in [-1, 1]
    n_used: int  # samples with non-zero input and output


def block_cosine(x, y) -> np.ndarray:
    """Cosine similarity of ``vec(x[b])`` and ``vec(y[b])`` for every batch entry.

    Entries where either vector has zero norm come back as NaN.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    dot = np.sum(x * y, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dot / (nx * ny)
    cos[(nx == 0) | (ny == 0)] = np.nan
    return np.clip(cos, -1.0, 1.0)


@torch.no_grad()
def layerdrop_scores(model: DenoiserModel, calib: CalibrationSet, batch_size: int = 256) -> list[BlockRedundancy]:
    """Average block input/output cosine similarity over the calibration samples."""
    if calib.size == 0:
        raise InvalidConfig("calibration set is empty")
    depth = model.config.depth
    sims: list[list[np.ndarray]] = [[] for _ in range(depth)]
    for start in range(0, calib.size, batch_size):
        sl = slice(start, start + batch_size)
        trace: dict = {}
        model(
            torch.from_numpy(calib.latents[sl]),
            torch.from_numpy(calib.timesteps[sl]),
            torch.from_numpy(calib.labels[sl]),
            trace=trace,
        )
        for b in range(depth):
            sims[b].append(block_cosine(trace[f"block_in.{b}"].numpy(), trace[f"block_out.{b}"].numpy()))
    out = []
    for b in range(depth):
        s = np.concatenate(sims[b])
        valid = s[~np.isnan(s)]
        if valid.size == 0:
            raise DegenerateActivations(f"block {b}: every sample has a zero-norm input or output")
        out.append(BlockRedundancy(block=b, score=float(valid.mean()), n_used=int(valid.size)))
    return out


def layerdrop_trajectory(scores: list[BlockRedundancy], l_max: int, *, stage: int = 0) -> PruningTrajectory:
    """Level ``k`` drops the ``k`` blocks closest to identity (highest score first)."""
    if not 0 <= l_max <= len(scores):
        raise InvalidConfig(f"l_max {l_max} outside [0, {len(scores)}]")
    ranked = sorted(scores, key=lambda r: (-r.score, r.block))[:l_max]
    steps = tuple(PruneStep(group=r.block, importance=r.score) for r in ranked)
    return PruningTrajectory(stage=stage, layer_id=BLOCKS_ID, kind="drop", n_groups=len(scores), steps=steps)
