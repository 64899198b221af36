import logging
from typing import Optional

import numpy as np
import pandas as pd

from const import (
    ABLATION_METHODS,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BATCH_SIZE,
    CLIP_NORM,
    LEARNING_RATE,
    METHODS,
    MIX_ALPHA,
    TRAIN_FRACTION,
    TRAIN_STEPS,
    VALIDATION_INTERVAL,
)
from dre_objective import (
    LossBreakdown,
    LossEvaluation,
    MixConfig,
    evaluate_loss,
    mixup_inputs,
    pair_batch,
    sample_tau,
    task_targets,
)
from errors import InputError, NumericError, TrainingDivergedError
from explainers import check_explainer
from loader.environment import DatasetBundle, EnvironmentDataset, TaskSpec, split_train_val
from metrics import metric_improves, task_metric
from models import Model, ModelSpec, ParameterSet, build_model

HISTORY_COLUMNS = ['step', 'task', 'consistency', 'sparsity', 'total', 'val_metric']


def all_methods() -> list[str]:
    return METHODS + list(ABLATION_METHODS)


class HyperParams:
    method: str
    learning_rate: float
    batch_size: int
    steps: int
    beta1: float
    beta2: float
    eps: float
    clip_norm: Optional[float]
    val_every: int
    mix: MixConfig
    mixup_alpha: float
    explainer: str
    detach_cam_weights: bool
    pair_by: str
    train_fraction: float
    seed: int

    def __init__(
            self,
            method: str = 'dre',
            learning_rate: float = LEARNING_RATE,
            batch_size: int = BATCH_SIZE,
            steps: int = TRAIN_STEPS,
            beta1: float = ADAM_BETA1,
            beta2: float = ADAM_BETA2,
            eps: float = ADAM_EPS,
            clip_norm: Optional[float] = CLIP_NORM,
            val_every: int = VALIDATION_INTERVAL,
            mix: Optional[MixConfig] = None,
            mixup_alpha: float = MIX_ALPHA,
            explainer: str = 'input_gradient',
            detach_cam_weights: bool = False,
            pair_by: str = 'label',
            train_fraction: float = TRAIN_FRACTION,
            seed: int = 0,
    ):
        self.method = method
        self.learning_rate = float(learning_rate)
        self.batch_size = int(batch_size)
        self.steps = int(steps)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = None if clip_norm is None else float(clip_norm)
        self.val_every = int(val_every)
        self.mix = mix or MixConfig()
        self.mixup_alpha = float(mixup_alpha)
        self.explainer = explainer
        self.detach_cam_weights = bool(detach_cam_weights)
        self.pair_by = pair_by
        self.train_fraction = float(train_fraction)
        self.seed = int(seed)
        self.validate()

    def validate(self):
        if self.method not in all_methods():
            raise InputError(f"method must be one of {all_methods()}, got '{self.method}'")
        if self.steps <= 0:
            raise InputError(f"steps must be positive, got {self.steps}")
        if self.learning_rate <= 0:
            raise InputError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InputError(f"batch size must be positive, got {self.batch_size}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
            raise InputError(f"invalid Adam constants beta1={self.beta1} beta2={self.beta2} eps={self.eps}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise InputError(f"clip norm must be positive or disabled, got {self.clip_norm}")
        if self.val_every < 1:
            raise InputError(f"validation interval must be positive, got {self.val_every}")
        if self.mixup_alpha <= 0:
            raise InputError(f"mixup alpha must be positive, got {self.mixup_alpha}")

    @property
    def uses_pairs(self) -> bool:
        return self.method.startswith('dre')

    def effective_mix(self) -> MixConfig:
        overrides = ABLATION_METHODS.get(self.method, {})
        return self.mix.with_weights(overrides.get('lambda'), overrides.get('gamma'))

    def with_method(self, method: str) -> 'HyperParams':
        copy = HyperParams.__new__(HyperParams)
        copy.__dict__.update(self.__dict__)
        copy.method = method
        copy.validate()
        return copy

    def with_seed(self, seed: int) -> 'HyperParams':
        copy = self.with_method(self.method)
        copy.seed = int(seed)
        return copy


class TrainState:
    step: int
    first_moments: dict[str, np.ndarray]
    second_moments: dict[str, np.ndarray]
    batch_rng: np.random.Generator
    mix_rng: np.random.Generator

    def __init__(self, params: ParameterSet, seed: int):
        self.step = 0
        self.first_moments = {name: np.zeros_like(value) for name, value in params.items()}
        self.second_moments = {name: np.zeros_like(value) for name, value in params.items()}
        # batches never depend on how many draws the mixing consumed
        batch_seed, mix_seed = np.random.SeedSequence(seed).spawn(2)
        self.batch_rng = np.random.default_rng(batch_seed)
        self.mix_rng = np.random.default_rng(mix_seed)


class TrainingHistory:
    method: str
    rows: list[dict]
    selected_step: Optional[int]
    selected_metric: Optional[float]
    empty_pair_steps: int
    degenerate_pairs: int

    def __init__(self, method: str):
        self.method = method
        self.rows = []
        self.selected_step = None
        self.selected_metric = None
        self.empty_pair_steps = 0
        self.degenerate_pairs = 0

    def record(self, step: int, breakdown: LossBreakdown):
        self.rows.append({'step': step, **breakdown.as_row(), 'val_metric': np.nan})

    def record_validation(self, metric: float):
        self.rows[-1]['val_metric'] = metric

    def __len__(self):
        return len(self.rows)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def validations(self) -> list[tuple[int, float]]:
        return [(row['step'], row['val_metric']) for row in self.rows if not np.isnan(row['val_metric'])]


def write_history_csv(history: TrainingHistory, path: str):
    history.frame().to_csv(path, index=False, float_format='%.17g')


def adam_step(
        params: ParameterSet,
        grads: dict[str, np.ndarray],
        state: TrainState,
        learning_rate: float,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
) -> ParameterSet:
    for name, value in params.items():
        if name not in grads or grads[name].shape != value.shape:
            raise InputError(f"gradient for '{name}' is missing or misshapen")
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter '{name}'", parameter=name)
    state.step += 1
    first_correction = 1.0 - beta1 ** state.step
    second_correction = 1.0 - beta2 ** state.step
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        state.first_moments[name] = beta1 * state.first_moments[name] + (1.0 - beta1) * grad
        state.second_moments[name] = beta2 * state.second_moments[name] + (1.0 - beta2) * grad * grad
        first = state.first_moments[name] / first_correction
        second = state.second_moments[name] / second_correction
        updated[name] = value - learning_rate * first / (np.sqrt(second) + eps)
        if not np.all(np.isfinite(updated[name])):
            raise NumericError(f"update of parameter '{name}' overflowed", parameter=name)
    return ParameterSet(updated)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in grads.values())))
    if norm <= max_norm:
        return grads
    return {name: grad * (max_norm / norm) for name, grad in grads.items()}


def sample_batches(envs: list[EnvironmentDataset], batch_size: int, rng: np.random.Generator) -> list[EnvironmentDataset]:
    return [env.subset(np.sort(rng.choice(len(env), size=min(batch_size, len(env)), replace=False))) for env in envs]


def merge(envs: list[EnvironmentDataset], env_id: str = 'merged') -> EnvironmentDataset:
    return EnvironmentDataset(env_id, np.concatenate([env.samples for env in envs]), np.concatenate([env.targets for env in envs]))


def split_environments(bundle: DatasetBundle, fraction: float, seed: int) -> tuple[list[EnvironmentDataset], list[EnvironmentDataset]]:
    splits = [split_train_val(env, fraction, seed) for env in bundle.train_envs]
    return [train for train, _ in splits], [val for _, val in splits]


def check_compatible(bundle: DatasetBundle, spec: ModelSpec):
    if spec.input_shape != bundle.feature_shape or spec.output_dim != bundle.task.output_dim:
        raise InputError(
            f"model {spec} does not fit bundle features {bundle.feature_shape} with {bundle.task.output_dim} outputs"
        )


def step_loss(model: Model, task: TaskSpec, batches: list[EnvironmentDataset], hyper: HyperParams, mix: MixConfig, delta: float, state: TrainState) -> LossEvaluation:
    merged = merge(batches)
    targets = task_targets(task, merged.targets)
    if hyper.method == 'erm':
        return evaluate_loss(model, task, merged.samples, targets, mix, [], np.empty(0))
    if hyper.method == 'mixup':
        # label-mixing baseline: random partners within the merged batch, one coefficient
        partners = state.mix_rng.permutation(len(merged))
        tau = sample_tau(hyper.mixup_alpha, state.mix_rng)
        mixed_x = mixup_inputs(merged.samples, merged.samples[partners], tau)
        mixed_targets = tau * targets + (1.0 - tau) * targets[partners]
        return evaluate_loss(model, task, mixed_x, mixed_targets, mix, [], np.empty(0))
    pairs = pair_batch(batches, task, delta, state.mix_rng, hyper.pair_by, model)
    taus = sample_tau(mix.alpha, state.mix_rng, size=len(pairs))
    return evaluate_loss(model, task, merged.samples, targets, mix, pairs, taus, hyper.explainer, hyper.detach_cam_weights)


def train(bundle: DatasetBundle, spec: ModelSpec, hyper: HyperParams, logger: logging.Logger = logging.getLogger(__name__)) -> tuple[Model, TrainingHistory]:
    check_compatible(bundle, spec)
    if hyper.uses_pairs:
        check_explainer(spec, hyper.explainer)
    task = bundle.task
    mix = hyper.effective_mix()
    train_envs, val_envs = split_environments(bundle, hyper.train_fraction, hyper.seed)
    validation = merge(val_envs, 'validation')
    delta = 0.0 if task.is_classification else mix.resolve_delta(np.concatenate([env.targets for env in train_envs]))
    model = build_model(spec, hyper.seed)
    state = TrainState(model.params, hyper.seed)
    history = TrainingHistory(hyper.method)
    best_params, last_breakdown = model.params, None
    logger.info(f"Training {hyper.method} for {hyper.steps} steps on {[env.env_id for env in train_envs]} (seed {hyper.seed})")
    for step in range(1, hyper.steps + 1):
        batches = sample_batches(train_envs, hyper.batch_size, state.batch_rng)
        try:
            evaluation = step_loss(model, task, batches, hyper, mix, delta, state)
            grads = clip_gradients(evaluation.gradients, hyper.clip_norm)
            params = adam_step(model.params, grads, state, hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.eps)
            model = model.with_params(params)
        except NumericError as e:
            logger.error(f"{hyper.method} diverged at step {step}: {e}")
            raise TrainingDivergedError(step, last_breakdown, e) from e
        last_breakdown = evaluation.breakdown
        history.record(step, evaluation.breakdown)
        if hyper.uses_pairs and evaluation.n_pairs == 0:
            history.empty_pair_steps += 1
        history.degenerate_pairs += evaluation.n_degenerate
        if step % hyper.val_every == 0 or step == hyper.steps:
            metric = task_metric(model, validation, task)
            history.record_validation(metric)
            if history.selected_metric is None or metric_improves(task, metric, history.selected_metric):
                history.selected_step, history.selected_metric = step, metric
                best_params = model.params
            logger.info(f"step {step}: {evaluation.breakdown}, validation {metric:.6g}")
    if history.empty_pair_steps:
        logger.warning(f"{history.empty_pair_steps} of {hyper.steps} steps formed no pairs")
    if history.degenerate_pairs:
        logger.warning(f"{history.degenerate_pairs} pairs had an all-zero explanation and were left out of the consistency term")
    logger.info(f"Selected checkpoint from step {history.selected_step} (validation {history.selected_metric:.6g})")
    return Model(spec, best_params), history
