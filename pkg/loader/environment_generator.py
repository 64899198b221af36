import logging

import numpy as np

from const import TEACHER_GAIN, TEACHER_HIDDEN
from loader.environment import (
    DatasetBundle,
    EnvironmentDataset,
    GeneratorConfig,
    TaskSpec,
)

TEACHER_REFERENCE_SAMPLES = 4096


class TeacherNetwork:
    """Fixed random two-layer net scoring the core features; small gain keeps it close to linear."""
    first: np.ndarray
    second: np.ndarray

    def __init__(self, d_core: int, seed: int):
        rng = np.random.default_rng(seed)
        self.first = rng.standard_normal((d_core, TEACHER_HIDDEN)) / np.sqrt(d_core)
        self.second = rng.standard_normal(TEACHER_HIDDEN) / np.sqrt(TEACHER_HIDDEN)
        reference = self.raw_score(rng.standard_normal((TEACHER_REFERENCE_SAMPLES, d_core)))
        self.center = float(reference.mean())
        self.scale = float(reference.std())

    def raw_score(self, core: np.ndarray) -> np.ndarray:
        return np.tanh(TEACHER_GAIN * core @ self.first) @ self.second

    def standardized_score(self, core: np.ndarray) -> np.ndarray:
        return (self.raw_score(core) - self.center) / self.scale


def correlated_features(signal: np.ndarray, rho: float, count: int, rng: np.random.Generator) -> np.ndarray:
    # unit-variance signal gives corr(feature, signal) == rho
    noise = rng.standard_normal((signal.shape[0], count))
    return rho * signal[:, None] + np.sqrt(1.0 - rho * rho) * noise


def environment_offsets(config: GeneratorConfig) -> list[float]:
    """Per-environment offset of the spurious features: training environments spread evenly over
    [-env_shift, env_shift], the test environment at 0. Within an environment the correlation is untouched.
    """
    count = len(config.train_rhos)
    return [config.env_shift * (2.0 * index / (count - 1) - 1.0) for index in range(count)] + [0.0]


def tabular_environment(
        config: GeneratorConfig,
        teacher: TeacherNetwork,
        env_id: str,
        rho: float,
        offset: float,
        rng: np.random.Generator,
) -> EnvironmentDataset:
    n = config.samples_per_env
    core = rng.standard_normal((n, config.d_core))
    score = teacher.standardized_score(core)
    if config.kind == 'tabular_cls':
        targets = (score > 0).astype(np.int64)
        signal = 2.0 * targets - 1.0
    else:
        targets = score + config.noise_sigma * rng.standard_normal(n)
        signal = targets / np.sqrt(1.0 + config.noise_sigma ** 2)
    spurious = correlated_features(signal, rho, config.d_spur, rng) + offset
    noise = rng.standard_normal((n, config.d_noise))
    return EnvironmentDataset(env_id, np.concatenate([core, spurious, noise], axis=1), targets)


def shape_masks(size: int, n_classes: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2.0
    eighth = size / 8.0
    radius = np.hypot(rows - center, cols - center)
    inner = (rows >= size / 4) & (rows < 3 * size / 4)
    masks = [
        inner & (cols >= size / 4) & (cols < 3 * size / 4),
        (np.abs(rows - center) < eighth) | (np.abs(cols - center) < eighth),
        (np.abs(rows - center) < eighth) & (cols >= eighth) & (cols < size - eighth),
        (np.abs(cols - center) < eighth) & (rows >= eighth) & (rows < size - eighth),
        np.abs(rows - cols) < eighth,
        (radius >= size / 4) & (radius <= 3 * size / 8),
    ]
    return np.stack(masks[:n_classes]).astype(np.float64)


def checkerboard(size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    return np.where((rows + cols) % 2 == 0, 1.0, -1.0)


def class_polarity(targets: np.ndarray) -> np.ndarray:
    return np.where(targets % 2 == 0, 1.0, -1.0)


def image_environment(config: GeneratorConfig, masks: np.ndarray, env_id: str, rho: float, rng: np.random.Generator) -> EnvironmentDataset:
    n, size = config.samples_per_env, config.image_size
    targets = rng.integers(0, config.n_classes, size=n)
    # texture polarity agrees with the class polarity with probability (1 + rho) / 2
    agrees = rng.random(n) < (1.0 + rho) / 2.0
    polarity = np.where(agrees, 1.0, -1.0) * class_polarity(targets)
    samples = np.empty((n, 2, size, size))
    samples[:, 0] = masks[targets] + config.noise_sigma * rng.standard_normal((n, size, size))
    samples[:, 1] = polarity[:, None, None] * checkerboard(size) + config.noise_sigma * rng.standard_normal((n, size, size))
    return EnvironmentDataset(env_id, samples, targets)


def true_importance(config: GeneratorConfig) -> np.ndarray:
    if config.kind == 'tiny_image_cls':
        importance = np.zeros((2, config.image_size, config.image_size))
        importance[0] = shape_masks(config.image_size, config.n_classes).max(axis=0)
        return importance
    importance = np.zeros(config.d_core + config.d_spur + config.d_noise)
    importance[:config.d_core] = 1.0
    return importance


def generate(config: GeneratorConfig, seed: int) -> DatasetBundle:
    config.validate()
    rhos = config.train_rhos + [config.test_rho]
    env_rngs = [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(len(rhos))]
    if config.kind == 'tiny_image_cls':
        masks = shape_masks(config.image_size, config.n_classes)
        environments = [image_environment(config, masks, env_id, rho, rng) for env_id, rho, rng in zip(config.env_ids, rhos, env_rngs)]
        task = TaskSpec('classification', config.n_classes)
    else:
        teacher = TeacherNetwork(config.d_core, config.teacher_seed)
        environments = [
            tabular_environment(config, teacher, env_id, rho, offset, rng)
            for env_id, rho, offset, rng in zip(config.env_ids, rhos, environment_offsets(config), env_rngs)
        ]
        task = TaskSpec('classification', 2) if config.kind == 'tabular_cls' else TaskSpec('regression')
    logging.debug(f"Generated {config.kind} bundle with environments {config.env_ids} (seed {seed})")
    return DatasetBundle(config.kind, task, environments[:-1], environments[-1], true_importance(config))
