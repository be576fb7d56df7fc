"""SNR-aware per-stage calibration data and activation capture."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .binio import read_container, write_container
from .exceptions import InvalidConfig, InvalidTimestep
from .toydiff.data import ToyDataset
from .toydiff.model import DenoiserModel
from .toydiff.schedule import NoiseSchedule, forward_noise

CALIB_MAGIC = b"SPCALB01"


@dataclass(frozen=True)
class StagePartition:
    """``n`` contiguous timestep intervals covering ``[1, T]``.

    Stage 0 holds the highest timesteps, where sampling starts. When ``T`` is
    not divisible by ``n`` the earliest stages get one extra timestep each.
    """

    n: int
    T: int

    def __post_init__(self):
        if self.n < 1 or self.T < self.n:
            raise InvalidConfig(f"cannot split T={self.T} into {self.n} stages")

    @property
    def intervals(self) -> list[tuple[int, int]]:
        base, extra = divmod(self.T, self.n)
        out, hi = [], self.T
        for i in range(self.n):
            length = base + (1 if i < extra else 0)
            out.append((hi - length + 1, hi))
            hi -= length
        return out

    def stage_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise InvalidTimestep(f"timestep {t} outside [1, {self.T}]")
        for i, (lo, hi) in enumerate(self.intervals):
            if lo <= t <= hi:
                return i
        raise AssertionError("unreachable: intervals cover [1, T]")

    def step_stages(self, timesteps) -> list[int]:
        """Stage index of every sampler timestep."""
        return [self.stage_of(int(t)) for t in timesteps]

    def check_sampler(self, timesteps) -> None:
        """Require every stage to own the same number of sampler steps."""
        counts = np.bincount(self.step_stages(timesteps), minlength=self.n)
        if len(set(counts.tolist())) != 1:
            raise InvalidConfig(f"sampler steps are not spread evenly over {self.n} stages: {counts.tolist()}")


@dataclass(frozen=True)
class CalibrationSet:
    stage: int
    latents: np.ndarray  # (N, H, W) float32
    timesteps: np.ndarray  # (N,) int64
    labels: np.ndarray  # (N,) int64
    source_index: np.ndarray  # (N,) dataset row of each clean image
    seed: int

    @property
    def size(self) -> int:
        return len(self.timesteps)

    def concat(self, other: "CalibrationSet") -> "CalibrationSet":
        return CalibrationSet(
            stage=self.stage,
            latents=np.concatenate([self.latents, other.latents]),
            timesteps=np.concatenate([self.timesteps, other.timesteps]),
            labels=np.concatenate([self.labels, other.labels]),
            source_index=np.concatenate([self.source_index, other.source_index]),
            seed=self.seed,
        )

    def save(self, path) -> Path:
        header = {"kind": "calibration", "stage": self.stage, "size": self.size, "seed": self.seed}
        arrays = {
            "latents": self.latents,
            "timesteps": self.timesteps,
            "labels": self.labels,
            "source_index": self.source_index,
        }
        return write_container(path, CALIB_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        header, arrays = read_container(path, CALIB_MAGIC)
        return cls(stage=header["stage"], seed=header["seed"], **arrays)


def stratified_timesteps(rng: np.random.Generator, lo: int, hi: int, size: int) -> np.ndarray:
    """``size`` timesteps from ``lo..hi``, each used ``size // L`` times plus distinct random extras.

    Every timestep keeps probability ``1 / L`` per draw; only the variance of
    the empirical mix is removed. Returned in random order.
    """
    span = np.arange(lo, hi + 1)
    reps, extra = divmod(size, len(span))
    t = np.concatenate([np.tile(span, reps), rng.choice(span, size=extra, replace=False)])
    return rng.permutation(t)


def build_stage_calibration(
    data: ToyDataset,
    stage: int,
    part: StagePartition,
    sched: NoiseSchedule,
    size: int = 1024,
    seed: int = 0,
) -> CalibrationSet:
    """Noise dataset images at timesteps drawn uniformly from the stage interval.

    Timesteps are stratified (see :func:`stratified_timesteps`), so the set's
    SNR profile tracks the interval's even at small sizes.
    """
    if len(data) == 0:
        raise InvalidConfig("calibration dataset is empty")
    if size < 1:
        raise InvalidConfig("calibration size must be >= 1")
    if not 0 <= stage < part.n:
        raise InvalidConfig(f"stage {stage} outside [0, {part.n})")
    lo, hi = part.intervals[stage]
    rng = np.random.default_rng([seed, stage])
    src = rng.choice(len(data), size=size, replace=size > len(data))
    t = stratified_timesteps(rng, lo, hi, size)
    x0 = data.images[src]
    noise = rng.standard_normal(x0.shape)
    latents = forward_noise(x0.astype(np.float64), t, noise, sched).astype(np.float32)
    return CalibrationSet(
        stage=stage,
        latents=latents,
        timesteps=t.astype(np.int64),
        labels=data.labels[src].astype(np.int64),
        source_index=src.astype(np.int64),
        seed=seed,
    )


def build_all_stage_calibrations(data, part, sched, size=1024, seed=0) -> list[CalibrationSet]:
    return [build_stage_calibration(data, s, part, sched, size, seed) for s in range(part.n)]


def empirical_snr(calib: CalibrationSet, sched: NoiseSchedule) -> float:
    """Mean SNR(t) over the timesteps actually drawn for the set."""
    return float(np.mean(sched.snr_at(calib.timesteps)))


def noise_residual_ratio(calib: CalibrationSet, data: ToyDataset, sched: NoiseSchedule) -> float:
    """Pooled variance of ``(x_t - sqrt(abar) x0) / sqrt(1 - abar)``.

    Equals 1 in expectation when every latent carries exactly the noise level
    its recorded timestep implies.
    """
    x0 = data.images[calib.source_index].astype(np.float64)
    abar = sched.alpha_bar_at(calib.timesteps)[:, None, None]
    resid = (calib.latents.astype(np.float64) - np.sqrt(abar) * x0) / np.sqrt(1.0 - abar)
    return float(np.mean(resid**2))


@dataclass
class ActivationBundle:
    """Per-layer input activations, one column per token of every sample."""

    stage: int
    n_samples: int
    X: dict[str, np.ndarray] = field(default_factory=dict)  # layer-id -> (d_in, n_samples * tokens)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self.X[layer_id]


@torch.no_grad()
def capture_activations(
    model: DenoiserModel,
    calib: CalibrationSet,
    layers=None,
    batch_size: int = 256,
) -> ActivationBundle:
    """Record the input of every prunable layer over the calibration samples.

    The model is only read. Columns are ordered sample-major, token-minor.
    """
    layer_ids = list(layers) if layers is not None else list(model.layer_registry())
    chunks: dict[str, list[np.ndarray]] = {lid: [] for lid in layer_ids}
    for start in range(0, calib.size, batch_size):
        sl = slice(start, start + batch_size)
        trace: dict[str, torch.Tensor] = {}
        model(
            torch.from_numpy(calib.latents[sl]),
            torch.from_numpy(calib.timesteps[sl]),
            torch.from_numpy(calib.labels[sl]),
            trace=trace,
        )
        for lid in layer_ids:
            act = trace[lid]
            chunks[lid].append(act.reshape(-1, act.shape[-1]).numpy().astype(np.float64))
    X = {lid: np.ascontiguousarray(np.concatenate(c, axis=0).T) for lid, c in chunks.items()}
    return ActivationBundle(stage=calib.stage, n_samples=calib.size, X=X)
