from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from ..exceptions import InvalidConfig
from .schedule import NoiseSchedule

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    eta: float = 0.0
    seed: int = 0

    def timesteps(self, T: int) -> np.ndarray:
        """Descending sampler timesteps, starting at ``T``."""
        if not 1 <= self.num_steps <= T:
            raise InvalidConfig(f"num_steps must be in [1, {T}], got {self.num_steps}")
        if T % self.num_steps:
            return np.round(np.linspace(T, T / self.num_steps, self.num_steps)).astype(np.int64)
        stride = T // self.num_steps
        return np.arange(T, 0, -stride, dtype=np.int64)


def initial_latents(seed: int, count: int, size: int = 16) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal((count, size, size)).astype(np.float32))


@torch.no_grad()
def sample(
    model: Denoiser,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    labels: int | Sequence[int],
    *,
    image_size: int = 16,
    latents: torch.Tensor | None = None,
) -> np.ndarray:
    """DDIM sampling from pure noise.

    ``model(x, t, labels)`` must return predicted noise. A scalar ``labels``
    yields one ``(H, W)`` image; a sequence yields a ``(B, H, W)`` batch whose
    starting latents come from ``cfg.seed``. Output is clipped to [-1, 1]
    once, after the last step.
    """
    single = np.isscalar(labels)
    y = torch.as_tensor(np.atleast_1d(labels), dtype=torch.int64)
    if latents is None:
        latents = initial_latents(cfg.seed, len(y), image_size)
    x = latents.clone()
    if cfg.eta < 0:
        raise InvalidConfig("eta must be >= 0")
    noise_rng = torch.Generator().manual_seed(cfg.seed + 1)

    ts = cfg.timesteps(sched.T)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        abar = float(sched.alpha_bar_at(int(t)))
        abar_prev = float(sched.alpha_bar_at(t_prev))
        eps = model(x, torch.full((len(y),), int(t), dtype=torch.int64), y)
        x0 = (x - (1.0 - abar) ** 0.5 * eps) / abar**0.5
        sigma = cfg.eta * ((1 - abar_prev) / (1 - abar) * (1 - abar / abar_prev)) ** 0.5
        direction = (1.0 - abar_prev - sigma**2) ** 0.5 * eps
        x = abar_prev**0.5 * x0 + direction
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=noise_rng)
    out = x.clamp(-1.0, 1.0).numpy()
    return out[0] if single else out
