from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from ..exceptions import InvalidConfig, TrainingDiverged
from .data import ToyDataset
from .model import DenoiserModel
from .schedule import NoiseSchedule, forward_noise

logger = logging.getLogger(__name__)


def train(
    model: DenoiserModel,
    data: ToyDataset,
    sched: NoiseSchedule,
    *,
    epochs: int = 30,
    lr: float = 2e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[DenoiserModel, list[float]]:
    """Fit ``model`` to predict the noise added by ``forward_noise``.

    Returns a trained copy and the mean loss of every epoch; the input model
    is left untouched. Runs are deterministic for a fixed ``seed``.
    """
    if len(data) == 0:
        raise InvalidConfig("dataset is empty")
    if epochs < 0:
        raise InvalidConfig("epochs must be >= 0")
    model = copy.deepcopy(model)
    if epochs == 0:
        return model, []

    gen = torch.Generator().manual_seed(seed)
    images = torch.from_numpy(np.ascontiguousarray(data.images))
    labels = torch.from_numpy(data.labels)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    steps_total = epochs * math.ceil(len(data) / batch_size)
    lr_sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps_total, pct_start=0.1)

    history = []
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(data), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            idx = perm[start : start + batch_size]
            x0, y = images[idx], labels[idx]
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            xt = forward_noise(x0, t, noise, sched)
            loss = F.mse_loss(model(xt, t, y), noise)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        logger.info("epoch %d loss %.5f", epoch + 1, history[-1])
    model.eval()
    return model, history
