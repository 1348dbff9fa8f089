"""
Synthetic desk-scale tasks: sequence denoising and embedding classification,
Gaussian perturbation at a level gamma relative to the clean data's standard
deviation, and in/out-of-distribution evaluation sets.

Every random draw comes from a generator seeded by (seed, stream, ..., index)
through ``numpy.random.SeedSequence`` spawn keys (PCG64 bit generator,
ziggurat normal sampler), so any sample can be regenerated on its own,
independently of iteration order.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from .exceptions import ParameterError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA_GRID = (0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0, 1.5)
STRUCTURES = ("smooth", "sparse_dct")

CLEAN_STREAM = 1
NOISE_STREAM = 2
CLASS_MEAN_STREAM = 3
CLASS_SAMPLE_STREAM = 4
EVAL_NOISE_STREAM = 5

TRAIN_NOISE_KEY = 0


def sample_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one (seed, stream, ..., index) coordinate"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


GAMMA_RESOLUTION = 1e-6


def gamma_key(gamma: float) -> int:
    """Stable integer key for a perturbation level (micro-units)

    Levels closer than ``GAMMA_RESOLUTION`` can share a key; ``split_id_ood``
    rejects such grids.
    """
    return int(round(gamma * 1_000_000))


def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; column k is the k-th cosine vector"""
    return fft.idct(np.eye(n), norm="ortho", axis=0)


@dataclass
class PerturbationSpec:
    gamma: float
    seed: int = 0
    stream: int = TRAIN_NOISE_KEY

    def __post_init__(self):
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ParameterError(f"perturbation level must be a finite nonnegative number, got {self.gamma}")


@dataclass
class DenoisingSample:
    clean: np.ndarray
    noisy: np.ndarray
    gamma: float


@dataclass
class ClassificationSample:
    embeddings: np.ndarray
    label: int
    gamma: float


@dataclass
class DenoisingSet:
    """Batch of clean signals (M, N, T) and their perturbed copies"""
    clean: np.ndarray
    noisy: np.ndarray
    gamma: float = 0.0
    task: str = field(default="denoising", init=False)

    @property
    def inputs(self) -> np.ndarray:
        return self.noisy

    @property
    def targets(self) -> np.ndarray:
        return self.clean

    def __len__(self) -> int:
        return self.clean.shape[0]

    def sample(self, index: int) -> DenoisingSample:
        return DenoisingSample(self.clean[index], self.noisy[index], self.gamma)


@dataclass
class ClassificationSet:
    """Clean class patterns, their perturbed embeddings and labels"""
    clean: np.ndarray
    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int
    gamma: float = 0.0
    task: str = field(default="classification", init=False)

    @property
    def inputs(self) -> np.ndarray:
        return self.embeddings

    @property
    def targets(self) -> np.ndarray:
        return self.labels

    def __len__(self) -> int:
        return self.clean.shape[0]

    def sample(self, index: int) -> ClassificationSample:
        return ClassificationSample(self.embeddings[index], int(self.labels[index]), self.gamma)


@dataclass
class EvalSet:
    """One perturbation level of the held-out data"""
    gamma: float
    in_distribution: bool
    data: object


def gen_denoising(count: int, n: int, t: int, structure: str = "smooth", seed: int = 0,
                  offset: float = 0.0, start: int = 0, scale: float = 1.0) -> np.ndarray:
    """Clean signals of shape (count, n, t)

    ``smooth`` mixes the first ceil(n/4) DCT vectors with standard-normal
    weights; ``sparse_dct`` gives every column exactly ceil(n/8) nonzero DCT
    coefficients. Coefficients are multiplied by ``scale`` before ``offset``
    is added. ``start`` offsets the sample index (held-out data).
    """
    if n < 1 or t < 1 or count < 0:
        raise ParameterError(f"invalid denoising sizes count={count}, n={n}, t={t}")
    if structure not in STRUCTURES:
        raise ParameterError(f"unknown signal structure '{structure}'")
    if not scale > 0:
        raise ParameterError(f"signal scale must be positive, got {scale}")
    basis = dct_basis(n)
    out = np.empty((count, n, t))
    for i in range(count):
        rng = sample_rng(seed, CLEAN_STREAM, start + i)
        if structure == "smooth":
            k = math.ceil(n / 4)
            out[i] = basis[:, :k] @ rng.standard_normal((k, t))
        else:
            k = math.ceil(n / 8)
            coefficients = np.zeros((n, t))
            for col in range(t):
                support = rng.choice(n, size=k, replace=False)
                values = rng.standard_normal(k)
                values[values == 0.0] = 1.0
                coefficients[support, col] = values
            out[i] = basis @ coefficients
    return scale * out + offset


def global_sigma(clean: np.ndarray) -> float:
    """Standard deviation of all clean entries"""
    sigma = float(np.std(clean))
    if not sigma > 0:
        raise ParameterError("clean data has zero spread; cannot scale perturbations")
    return sigma


def perturb(clean: np.ndarray, spec: PerturbationSpec, sigma_x: float, start: int = 0) -> np.ndarray:
    """clean + N(0, (gamma * sigma_x)^2) noise, drawn per sample index

    ``clean`` is one N x T matrix or an (M, N, T) batch; it is never modified.
    """
    if spec.gamma == 0.0:
        return np.array(clean, dtype=np.float64, copy=True)
    if not sigma_x > 0:
        raise ParameterError(f"sigma_x must be positive, got {sigma_x}")
    clean = np.asarray(clean, dtype=np.float64)
    batch = clean if clean.ndim == 3 else clean[None]
    sigma = spec.gamma * sigma_x
    noisy = np.empty_like(batch)
    for i in range(batch.shape[0]):
        rng = sample_rng(spec.seed, NOISE_STREAM, spec.stream, start + i)
        noisy[i] = batch[i] + sigma * rng.standard_normal(batch.shape[1:])
    return noisy if clean.ndim == 3 else noisy[0]


def class_means(n: int, t: int, num_classes: int, separation: float, seed: int) -> np.ndarray:
    """Frozen class patterns (C, n, t) whose closest pair is exactly ``separation`` apart"""
    if num_classes < 2:
        raise ParameterError(f"classification needs at least 2 classes, got {num_classes}")
    if not separation > 0:
        raise ParameterError(f"class separation must be positive, got {separation}")
    means = sample_rng(seed, CLASS_MEAN_STREAM).standard_normal((num_classes, n, t))
    flat = means.reshape(num_classes, -1)
    distances = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    closest = np.min(distances[~np.eye(num_classes, dtype=bool)])
    return means * (separation / closest)


def gen_classification(count: int, n: int, t: int, num_classes: int, separation: float,
                       seed: int = 0, start: int = 0) -> ClassificationSet:
    """Balanced labels (index mod C); samples are class pattern + unit Gaussian"""
    if count < 0 or n < 1 or t < 1:
        raise ParameterError(f"invalid classification sizes count={count}, n={n}, t={t}")
    means = class_means(n, t, num_classes, separation, seed)
    labels = (np.arange(start, start + count) % num_classes).astype(np.int64)
    clean = np.empty((count, n, t))
    for i in range(count):
        rng = sample_rng(seed, CLASS_SAMPLE_STREAM, start + i)
        clean[i] = means[labels[i]] + rng.standard_normal((n, t))
    return ClassificationSet(clean=clean, embeddings=clean.copy(), labels=labels, num_classes=num_classes)


def partition(train_count: int, heldout_count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint sample-index ranges for training and held-out data"""
    return np.arange(train_count), np.arange(train_count, train_count + heldout_count)


def with_noise(data, gamma: float, sigma_x: float, seed: int, stream: int):
    """Copy of a denoising or classification set with fresh noise at ``gamma``"""
    spec = PerturbationSpec(gamma, seed, stream)
    if isinstance(data, ClassificationSet):
        return ClassificationSet(clean=data.clean, embeddings=perturb(data.clean, spec, sigma_x),
                                 labels=data.labels, num_classes=data.num_classes, gamma=gamma)
    return DenoisingSet(clean=data.clean, noisy=perturb(data.clean, spec, sigma_x), gamma=gamma)


def split_id_ood(heldout, gamma_train: float, gamma_grid: Sequence[float], sigma_x: float,
                 seed: int = 0) -> List[EvalSet]:
    """One evaluation set per grid level, ascending; levels <= gamma_train are ID

    All sets share the held-out clean data. Noise for a level depends only
    on (seed, level), not on the rest of the grid.
    """
    if not len(gamma_grid):
        raise ParameterError("gamma grid must not be empty")
    levels = sorted(float(g) for g in gamma_grid)
    keys = [gamma_key(g) for g in levels]
    if len(set(keys)) != len(keys):
        raise ParameterError(f"gamma grid levels must differ by at least {GAMMA_RESOLUTION:g}, got {levels}")
    sets = []
    for gamma, key in zip(levels, keys):
        data = with_noise(heldout, gamma, sigma_x, seed, EVAL_NOISE_STREAM * 10_000_000 + key)
        sets.append(EvalSet(gamma=gamma, in_distribution=gamma <= gamma_train, data=data))
    return sets


@dataclass
class TaskData:
    """Training set, held-out clean data and the sigma_x both are scaled by"""
    train: object
    heldout: object
    sigma_x: float


def prepare_task(task: str, n: int, t: int, train_count: int, heldout_count: int, gamma_train: float,
                 seed: int = 0, structure: str = "smooth", offset: float = 0.0,
                 num_classes: Optional[int] = None, separation: float = 2.0, scale: float = 1.0) -> TaskData:
    """Generate train and held-out data for one seed; training inputs carry gamma_train noise"""
    train_idx, held_idx = partition(train_count, heldout_count)
    if task == "denoising":
        train_clean = gen_denoising(len(train_idx), n, t, structure, seed, offset, start=0, scale=scale)
        held_clean = gen_denoising(len(held_idx), n, t, structure, seed, offset, start=train_count,
                                   scale=scale)
        train = DenoisingSet(train_clean, train_clean, 0.0)
        heldout = DenoisingSet(held_clean, held_clean, 0.0)
    elif task == "classification":
        if num_classes is None:
            raise ParameterError("classification needs num_classes")
        train = gen_classification(len(train_idx), n, t, num_classes, separation, seed, start=0)
        heldout = gen_classification(len(held_idx), n, t, num_classes, separation, seed, start=train_count)
    else:
        raise ParameterError(f"unknown task '{task}'")
    sigma_x = global_sigma(train.clean)
    logger.info(f"Prepared {task} data: {train_count} train / {heldout_count} held-out, sigma_x={sigma_x:.6g}")
    return TaskData(train=with_noise(train, gamma_train, sigma_x, seed, TRAIN_NOISE_KEY), heldout=heldout,
                    sigma_x=sigma_x)
