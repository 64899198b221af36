from typing import (
    Iterable,
    Iterator,
    Optional,
)

import numpy as np

from const import (
    D_CORE,
    D_NOISE,
    D_SPUR,
    ENV_SHIFT,
    IMAGE_SIZE,
    NOISE_SIGMA,
    SAMPLES_PER_ENV,
    TEST_ENV_ID,
    TEST_RHO,
    TRAIN_FRACTION,
    TRAIN_RHOS,
)
from errors import ConfigError, InputError

GENERATOR_KINDS = ['tabular_cls', 'tiny_image_cls', 'tabular_reg']
TASK_KINDS = ['classification', 'regression']


class TaskSpec:
    kind: str
    n_classes: int

    def __init__(self, kind: str, n_classes: int = 0):
        if kind not in TASK_KINDS:
            raise InputError(f"task kind must be one of {TASK_KINDS}, got '{kind}'")
        if kind == 'classification' and n_classes < 2:
            raise InputError(f"classification needs at least 2 classes, got {n_classes}")
        self.kind = kind
        self.n_classes = n_classes if kind == 'classification' else 0

    @property
    def is_classification(self) -> bool:
        return self.kind == 'classification'

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.is_classification else 1

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return (self.kind, self.n_classes) == (other.kind, other.n_classes)
        return NotImplemented

    def __hash__(self):
        return hash((self.kind, self.n_classes))

    def __repr__(self):
        return f"TaskSpec({self.kind}, {self.n_classes})" if self.is_classification else "TaskSpec(regression)"


class EnvironmentDataset:
    env_id: str
    samples: np.ndarray
    targets: np.ndarray

    def __init__(self, env_id: str, samples: np.ndarray, targets: np.ndarray):
        samples = np.asarray(samples, dtype=np.float64)
        targets = np.asarray(targets)
        if samples.shape[0] != targets.shape[0] or targets.ndim != 1:
            raise InputError(f"environment '{env_id}': {samples.shape[0]} samples but targets of shape {targets.shape}")
        if ' ' in env_id or not env_id:
            raise InputError(f"environment id must be a non-empty token, got '{env_id}'")
        self.env_id = env_id
        self.samples = samples
        self.targets = targets

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, indices: np.ndarray) -> 'EnvironmentDataset':
        return EnvironmentDataset(self.env_id, self.samples[indices], self.targets[indices])

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return (
                self.env_id == other.env_id
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes()
                and np.array_equal(self.targets, other.targets)
            )
        return NotImplemented

    __hash__ = None

    def __repr__(self):
        return f"EnvironmentDataset({self.env_id}, n={len(self)}, shape={self.feature_shape})"


class DatasetBundle:
    generator_kind: str
    task: TaskSpec
    train_envs: list[EnvironmentDataset]
    test_env: EnvironmentDataset
    true_importance: np.ndarray

    def __init__(self, generator_kind: str, task: TaskSpec, train_envs: list[EnvironmentDataset], test_env: EnvironmentDataset, true_importance: np.ndarray):
        if len(train_envs) < 2:
            raise InputError(f"a bundle needs at least 2 training environments, got {len(train_envs)}")
        env_ids = [env.env_id for env in train_envs] + [test_env.env_id]
        if len(set(env_ids)) != len(env_ids):
            raise InputError(f"environment ids must be unique, got {env_ids}")
        shapes = {env.feature_shape for env in train_envs + [test_env]}
        if len(shapes) != 1:
            raise InputError(f"environments disagree on feature shape: {sorted(shapes)}")
        true_importance = np.asarray(true_importance, dtype=np.float64)
        if true_importance.shape != test_env.feature_shape:
            raise InputError(f"true importance of shape {true_importance.shape} does not cover features {test_env.feature_shape}")
        if np.any(true_importance < 0):
            raise InputError("true importance must be nonnegative")
        self.generator_kind = generator_kind
        self.task = task
        self.train_envs = list(train_envs)
        self.test_env = test_env
        self.true_importance = true_importance

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.test_env.feature_shape

    @property
    def environments(self) -> list[EnvironmentDataset]:
        return self.train_envs + [self.test_env]

    def environment(self, env_id: str) -> EnvironmentDataset:
        for env in self.environments:
            if env.env_id == env_id:
                return env
        raise InputError(f"no environment '{env_id}' in bundle, have {[env.env_id for env in self.environments]}")

    def with_test_env(self, env_id: str) -> 'DatasetBundle':
        test_env = self.environment(env_id)
        train_envs = [env for env in self.environments if env.env_id != env_id]
        return DatasetBundle(self.generator_kind, self.task, train_envs, test_env, self.true_importance)

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return (
                self.generator_kind == other.generator_kind
                and self.task == other.task
                and self.environments == other.environments
                and self.true_importance.tobytes() == other.true_importance.tobytes()
            )
        return NotImplemented

    __hash__ = None


class GeneratorConfig:
    kind: str
    n_classes: int
    d_core: int
    d_spur: int
    d_noise: int
    image_size: int
    train_rhos: list[float]
    test_rho: float
    samples_per_env: int
    noise_sigma: float
    env_shift: float
    teacher_seed: int

    def __init__(
            self,
            kind: str = 'tabular_cls',
            n_classes: int = 2,
            d_core: int = D_CORE,
            d_spur: int = D_SPUR,
            d_noise: int = D_NOISE,
            image_size: int = IMAGE_SIZE,
            train_rhos: Optional[Iterable[float]] = None,
            test_rho: float = TEST_RHO,
            samples_per_env: int = SAMPLES_PER_ENV,
            noise_sigma: float = NOISE_SIGMA,
            env_shift: float = ENV_SHIFT,
            teacher_seed: int = 0,
    ):
        self.kind = kind
        self.n_classes = int(n_classes)
        self.d_core = int(d_core)
        self.d_spur = int(d_spur)
        self.d_noise = int(d_noise)
        self.image_size = int(image_size)
        self.train_rhos = [float(rho) for rho in (TRAIN_RHOS if train_rhos is None else train_rhos)]
        self.test_rho = float(test_rho)
        self.samples_per_env = int(samples_per_env)
        self.noise_sigma = float(noise_sigma)
        self.env_shift = float(env_shift)
        self.teacher_seed = int(teacher_seed)
        self.validate()

    def validate(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError('kind', f"generator kind must be one of {GENERATOR_KINDS}, got '{self.kind}'")
        if self.d_core < 1:
            raise ConfigError('d_core', f"at least one core feature is required, got {self.d_core}")
        if self.d_spur < 0 or self.d_noise < 0:
            raise ConfigError('d_spur', "feature counts must be nonnegative")
        if len(self.train_rhos) < 2:
            raise ConfigError('train_rhos', f"at least 2 training environments are required, got {len(self.train_rhos)}")
        if any(abs(rho) > 1.0 for rho in self.train_rhos + [self.test_rho]):
            raise ConfigError('train_rhos', "correlation strengths must lie in [-1, 1]")
        if self.samples_per_env < 2:
            raise ConfigError('samples_per_env', f"at least 2 samples per environment are required, got {self.samples_per_env}")
        if self.noise_sigma < 0:
            raise ConfigError('noise_sigma', f"noise sigma must be nonnegative, got {self.noise_sigma}")
        if self.env_shift < 0:
            raise ConfigError('env_shift', f"environment shift must be nonnegative, got {self.env_shift}")
        if self.kind == 'tabular_cls' and self.n_classes != 2:
            raise ConfigError('n_classes', "tabular_cls labels are the sign of a teacher score, n_classes must be 2")
        if self.kind == 'tiny_image_cls':
            if self.image_size < 8:
                raise ConfigError('image_size', f"images must be at least 8 pixels wide, got {self.image_size}")
            if self.d_core < 1 or not 2 <= self.n_classes <= 6:
                raise ConfigError('n_classes', f"tiny_image_cls supports 2 to 6 classes, got {self.n_classes}")

    @property
    def env_ids(self) -> list[str]:
        return [f"env{index}" for index in range(len(self.train_rhos))] + [TEST_ENV_ID]

    def as_dict(self) -> dict:
        return {
            'kind': self.kind,
            'n_classes': self.n_classes,
            'd_core': self.d_core,
            'd_spur': self.d_spur,
            'd_noise': self.d_noise,
            'image_size': self.image_size,
            'train_rhos': list(self.train_rhos),
            'test_rho': self.test_rho,
            'samples_per_env': self.samples_per_env,
            'noise_sigma': self.noise_sigma,
            'env_shift': self.env_shift,
            'teacher_seed': self.teacher_seed,
        }


def split_train_val(env: EnvironmentDataset, fraction: float = TRAIN_FRACTION, seed: int = 0) -> tuple[EnvironmentDataset, EnvironmentDataset]:
    if not 0.0 < fraction < 1.0:
        raise InputError(f"split fraction must lie in (0, 1), got {fraction}")
    if len(env) == 0:
        raise InputError(f"cannot split empty environment '{env.env_id}'")
    order = np.random.default_rng(seed).permutation(len(env))
    n_train = int(np.floor(fraction * len(env) + 0.5))
    return env.subset(np.sort(order[:n_train])), env.subset(np.sort(order[n_train:]))


def leave_one_out_rotations(bundle: DatasetBundle) -> Iterator[DatasetBundle]:
    for env in bundle.environments:
        yield bundle.with_test_env(env.env_id)
