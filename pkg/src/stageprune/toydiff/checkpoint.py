from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..binio import read_container, write_container
from .model import DenoiserModel, ModelConfig

MAGIC = b"SPCKPT01"


def save_checkpoint(model: DenoiserModel, path, extra: dict | None = None) -> Path:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    header = {"kind": "checkpoint", "config": model.config.to_dict(), "extra": extra or {}}
    return write_container(path, MAGIC, header, arrays)


def load_checkpoint(path) -> DenoiserModel:
    header, arrays = read_container(path, MAGIC)
    model = DenoiserModel(ModelConfig(**header["config"]))
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model
