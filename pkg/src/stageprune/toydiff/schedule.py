from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..exceptions import InvalidConfig, InvalidTimestep


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule over timesteps ``1..T``.

    Arrays are stored 0-based (entry ``t - 1`` belongs to timestep ``t``).
    ``alpha_bar_at(0)`` returns 1, the clean-image limit used by the sampler's
    final step.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    snr: np.ndarray

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InvalidTimestep(f"timestep outside [0, {self.T}]: {t}")
        return t.astype(np.intp)

    def alpha_bar_at(self, t) -> np.ndarray:
        t = self._check(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def snr_at(self, t) -> np.ndarray:
        t = self._check(t)
        if np.any(t < 1):
            raise InvalidTimestep("SNR is infinite at t = 0")
        return self.snr[t - 1]

    def interval_mean_snr(self, lo: int, hi: int) -> float:
        """Average SNR over the integer timesteps ``lo..hi`` inclusive."""
        return float(np.mean(self.snr[lo - 1 : hi]))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise InvalidConfig(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidConfig(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    snr = alpha_bar / (1.0 - alpha_bar)
    for arr in (beta, alpha_bar, snr):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, snr=snr)


def forward_noise(x0, t, noise, sched: NoiseSchedule):
    """Return ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``.

    Works for numpy arrays and torch tensors. ``t`` is a scalar or one
    timestep per leading batch entry.
    """
    if tuple(np.shape(noise)) != tuple(np.shape(x0)):
        raise InvalidConfig(f"noise shape {tuple(np.shape(noise))} != x0 shape {tuple(np.shape(x0))}")
    t_arr = t.cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    abar = sched.alpha_bar_at(t_arr)
    a = np.sqrt(abar)
    s = np.sqrt(1.0 - abar)
    if a.ndim:
        extra = (1,) * (np.ndim(x0) - a.ndim)
        a = a.reshape(a.shape + extra)
        s = s.reshape(s.shape + extra)
    if isinstance(x0, torch.Tensor):
        a = torch.as_tensor(a, dtype=x0.dtype)
        s = torch.as_tensor(s, dtype=x0.dtype)
        return a * x0 + s * noise
    x0 = np.asarray(x0)
    out = a * x0 + s * np.asarray(noise)
    return out.astype(np.result_type(x0.dtype, np.float32), copy=False)
