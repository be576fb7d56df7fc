"""Image-quality metrics and the schedule fitness evaluator.

Every fitness value is "higher is better": SSIM as is, MSE negated.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binio import read_container, write_container
from .routedb import route
from .exceptions import InvalidConfig, InvalidInput, InvalidShape, MissingReference
from .toydiff.sampler import SamplerConfig, initial_latents, sample
from .toydiff.schedule import NoiseSchedule

METRICS = ("ssim_vs_dense", "mse_vs_dense", "energy_distance")
REF_MAGIC = b"SPREFC01"


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, *, win_size: int = 7, sigma: float = 1.5, data_range: float = 1.0) -> float | np.ndarray:
    """Mean single-scale SSIM with a Gaussian window over valid positions.

    Inputs in [-1, 1] are mapped to [0, 1] first. Accepts single images
    ``(H, W)`` or batches ``(B, H, W)``; a batch returns one value per image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidShape(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3) or min(a.shape[-2:]) < win_size:
        raise InvalidShape(f"need (H, W) or (B, H, W) images of side >= {win_size}, got {a.shape}")
    single = a.ndim == 2
    if single:
        a, b = a[None], b[None]
    a = (a + 1.0) / 2.0
    b = (b + 1.0) / 2.0
    w = gaussian_window(win_size, sigma)

    def filt(img):
        win = sliding_window_view(img, (win_size, win_size), axis=(-2, -1))
        return np.einsum("...ij,ij->...", win, w)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    vals = np.clip(num / den, -1.0, 1.0).mean(axis=(-2, -1))
    return float(vals[0]) if single else vals


def _pair_mean_dist(A: np.ndarray, B: np.ndarray) -> float:
    sq = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return float(np.mean(np.sqrt(np.maximum(sq, 0.0))))


def energy_distance(A, B) -> float:
    """``2 E|a - b| - E|a - a'| - E|b - b'|`` over all pairs of flattened samples."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise InvalidInput("energy distance needs non-empty sample sets")
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise InvalidShape(f"sample dimension mismatch {A.shape[1]} vs {B.shape[1]}")
    e = 2.0 * _pair_mean_dist(A, B) - _pair_mean_dist(A, A) - _pair_mean_dist(B, B)
    return max(e, 0.0)


@dataclass(frozen=True)
class FitnessSeeds:
    """The K fixed (latent, label) pairs every schedule is scored on."""

    seed: int = 0
    count: int = 64
    num_classes: int = 4

    @property
    def labels(self) -> list[int]:
        return [i % self.num_classes for i in range(self.count)]


def model_checksum(model) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


@dataclass
class ReferenceCache:
    """Dense-model samples for a fixed seed list, keyed by model and sampler config."""

    key: dict
    images: np.ndarray

    @classmethod
    def build(cls, model, sampler: SamplerConfig, sched: NoiseSchedule, seeds: FitnessSeeds) -> "ReferenceCache":
        images = _sample_fixed(model, sampler, sched, seeds)
        key = {"model": model_checksum(model), "sampler": asdict(sampler), "seeds": asdict(seeds)}
        return cls(key, images)

    def matches(self, model, sampler: SamplerConfig, seeds: FitnessSeeds) -> bool:
        return self.key == {"model": model_checksum(model), "sampler": asdict(sampler), "seeds": asdict(seeds)}

    def save(self, path) -> Path:
        return write_container(path, REF_MAGIC, {"kind": "reference", "key": self.key}, {"images": self.images})

    @classmethod
    def load(cls, path) -> "ReferenceCache":
        header, arrays = read_container(path, REF_MAGIC)
        return cls(header["key"], arrays["images"])


def _sample_fixed(model, sampler: SamplerConfig, sched: NoiseSchedule, seeds: FitnessSeeds) -> np.ndarray:
    latents = initial_latents(seeds.seed, seeds.count)
    return sample(model, sampler, sched, seeds.labels, latents=latents)


def fitness_eval(
    metric: str,
    model,
    seeds: FitnessSeeds,
    sampler: SamplerConfig,
    sched: NoiseSchedule,
    reference: ReferenceCache | None = None,
    reference_set: np.ndarray | None = None,
) -> float:
    """Mean metric over the fixed seeds; higher is better for every metric."""
    if metric not in METRICS:
        raise InvalidConfig(f"unknown metric {metric!r}; expected one of {METRICS}")
    images = _sample_fixed(model, sampler, sched, seeds)
    if metric == "energy_distance":
        if reference_set is None:
            raise MissingReference("energy_distance needs a reference sample set")
        return -energy_distance(images, reference_set)
    if reference is None:
        raise MissingReference(f"{metric} needs a dense reference cache")
    if reference.images.shape != images.shape:
        raise MissingReference("reference cache was built for a different seed list")
    if metric == "ssim_vs_dense":
        return float(np.mean(ssim(images, reference.images)))
    return -float(np.mean((images.astype(np.float64) - reference.images) ** 2))


class FitnessEvaluator:
    """Callable ``schedule -> fitness`` over a route database.

    Results are memoised per schedule; ``n_calls`` counts every request,
    ``n_evaluated`` only the distinct schedules actually sampled.
    """

    def __init__(
        self,
        db,
        sched: NoiseSchedule,
        *,
        metric: str = "ssim_vs_dense",
        seeds: FitnessSeeds | None = None,
        sampler: SamplerConfig | None = None,
        reference: ReferenceCache | None = None,
        reference_set: np.ndarray | None = None,
    ):
        self.db = db
        self.sched = sched
        self.metric = metric
        self.seeds = seeds or FitnessSeeds(num_classes=db.backbone.config.num_classes)
        self.sampler = sampler or SamplerConfig()
        db.partition.check_sampler(self.sampler.timesteps(sched.T))
        if metric in ("ssim_vs_dense", "mse_vs_dense") and reference is None:
            reference = ReferenceCache.build(db.backbone, self.sampler, sched, self.seeds)
        self.reference = reference
        self.reference_set = reference_set
        self.cache: dict[tuple[int, ...], float] = {}
        self.n_calls = 0

    @property
    def n_evaluated(self) -> int:
        return len(self.cache)

    def __call__(self, schedule: Sequence[int]) -> float:
        key = tuple(int(v) for v in schedule)
        self.n_calls += 1
        if key not in self.cache:
            model = route(self.db, key)
            self.cache[key] = fitness_eval(
                self.metric, model, self.seeds, self.sampler, self.sched, self.reference, self.reference_set
            )
        return self.cache[key]

    def images(self, schedule: Sequence[int]) -> np.ndarray:
        return _sample_fixed(route(self.db, schedule), self.sampler, self.sched, self.seeds)
