"""Seeded synthetic multi-task image datasets.

Each 16x16 image is a sum of Gaussian blobs.  Three latent sources drive the
three targets:

* task 0 -- quadrant (4 classes) of the brightest blob, from its polar angle;
* task 1 -- total blob mass (regression);
* task 2 -- parity of the blob count (2 classes).

Task ``t`` reads the latent ``u_t = (rho * z_shared + (1 - rho) * z_t) / norm``,
so ``rho`` sets how strongly the tasks' targets co-vary.  Positions of the
secondary blobs and pixel noise are nuisance variation that no target reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import TaskSpec
from .tensor import ContractError

GENERATOR_ID = "blobs-v1"
LATENT_DIM = 3
BLOB_SIGMA = 1.2
DOMINANT_SHARE = 0.55
MAX_BLOBS = 4
# images are scaled so a unit-mass blob peaks at 1
PIXEL_GAIN = 2 * math.pi * BLOB_SIGMA ** 2


def default_tasks() -> list[TaskSpec]:
    return [
        TaskSpec("quadrant", "classification", 4, "cross_entropy", 1.0, "accuracy"),
        TaskSpec("mass", "regression", 1, "l1", 1.0, "l1_error"),
        TaskSpec("parity", "classification", 2, "cross_entropy", 1.0, "accuracy"),
    ]


@dataclass
class SyntheticTaskset:
    generator: str = GENERATOR_ID
    rho: float = 0.5
    image_size: int = 16
    train_size: int = 2000
    test_size: int = 500
    noise: float = 0.15
    seed: int = 1
    tasks: list[TaskSpec] = field(default_factory=default_tasks)

    def __post_init__(self):
        if self.generator != GENERATOR_ID:
            raise ContractError(f"unknown generator {self.generator!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError("rho must lie in [0, 1]")
        if self.train_size <= 0 or self.test_size <= 0:
            raise ContractError("dataset sizes must be positive")
        if self.noise < 0:
            raise ContractError("noise must be nonnegative")
        if len(self.tasks) != 3:
            raise ContractError("the blob generator defines exactly three tasks")
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]
        for got, want in zip(self.tasks, default_tasks()):
            if (got.kind, got.out_dim) != (want.kind, want.out_dim):
                raise ContractError(f"task {got.name!r} must be {want.kind} with out_dim {want.out_dim}")


@dataclass
class Dataset:
    x: np.ndarray  # [N, 1, H, W]
    labels: list[np.ndarray]
    latents: np.ndarray  # [N, 3, LATENT_DIM] task latents u_t

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, idx) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.x[idx], [y[idx] for y in self.labels]


def _phi(z):
    return 0.5 * (1.0 + np.vectorize(math.erf)(np.asarray(z) / math.sqrt(2.0)))


def targets_from_latents(u: np.ndarray):
    """Map task latents [N, 3, D] to (quadrant, mass, count) and the blob layout
    parameters the renderer needs."""
    theta = np.arctan2(u[:, 0, 1], u[:, 0, 0]) % (2 * np.pi)
    quadrant = np.minimum((theta // (np.pi / 2)).astype(np.int64), 3)
    radius = 2.5 + 2.0 * _phi(u[:, 0, 2])
    mass = 1.0 + 2.0 * _phi(u[:, 1, 0])
    count = 1 + np.minimum((MAX_BLOBS * _phi(u[:, 2, 0])).astype(np.int64), MAX_BLOBS - 1)
    return quadrant, mass, count, theta, radius


def _blob(size, cx, cy, m):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    g = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * BLOB_SIGMA ** 2))
    return m / (2 * np.pi * BLOB_SIGMA ** 2) * g


def _sample(spec: SyntheticTaskset, n: int, rng: np.random.Generator) -> Dataset:
    rho = spec.rho
    z_shared = rng.normal(size=(n, 1, LATENT_DIM))
    z_task = rng.normal(size=(n, 3, LATENT_DIM))
    norm = math.sqrt(rho ** 2 + (1 - rho) ** 2)
    u = (rho * z_shared + (1 - rho) * z_task) / norm
    quadrant, mass, count, theta, radius = targets_from_latents(u)

    S = spec.image_size
    c = S / 2.0
    x = np.zeros((n, 1, S, S))
    nuisance = rng.uniform(2.0, S - 2.0, size=(n, MAX_BLOBS - 1, 2))
    for i in range(n):
        k = int(count[i])
        main = mass[i] * (DOMINANT_SHARE if k > 1 else 1.0)
        img = _blob(S, c + radius[i] * np.cos(theta[i]), c - radius[i] * np.sin(theta[i]), main)
        for j in range(k - 1):
            img += _blob(S, nuisance[i, j, 0], nuisance[i, j, 1], mass[i] * (1 - DOMINANT_SHARE) / (k - 1))
        x[i, 0] = PIXEL_GAIN * img
    x += spec.noise * rng.normal(size=x.shape)
    return Dataset(x, [quadrant, mass, (count % 2).astype(np.int64)], u)


def generate_dataset(spec: SyntheticTaskset) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; the two splits draw from independent
    child streams of ``spec.seed``."""
    train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(2)
    return (_sample(spec, spec.train_size, np.random.default_rng(train_seq)),
            _sample(spec, spec.test_size, np.random.default_rng(test_seq)))
