"""Distributional explanation consistency objective.

Samples sharing a label but drawn from different environments are paired, mixed with one
Beta-distributed coefficient per pair, and the explanation of the mixed sample is compared with
the same mixture of the two explanations. The loss graph carries the explanations as gradient
nodes, so its parameter gradients are second-order derivatives of the model.
"""
import logging
from typing import Optional, Union

import numpy as np

from autodiff import ComputeGraph, GraphBuilder, append_gradients, evaluate, gradient_name
from autodiff.primitives import mix
from const import (
    CONSISTENCY_WEIGHT,
    DISCREPANCIES,
    KL_FLOOR,
    MIX_ALPHA,
    PAIRING_DELTA_FACTOR,
    SPARSITY_WEIGHT,
)
from errors import DegenerateDistributionError, InputError
from explainers import append_explanation
from loader.environment import EnvironmentDataset, TaskSpec
from models import (
    Model,
    ModelSpec,
    build_forward,
    declare_parameters,
    forward,
    parameter_shapes,
    predict_classes,
)

PAIR_BY = ['label', 'prediction']


class MixPair:
    x_a: np.ndarray
    x_b: np.ndarray
    label: Union[int, tuple[float, float]]
    env_a: str
    env_b: str

    def __init__(self, x_a: np.ndarray, x_b: np.ndarray, label, env_a: str, env_b: str):
        if env_a == env_b:
            raise InputError(f"a mix pair must span two environments, both samples come from '{env_a}'")
        self.x_a = x_a
        self.x_b = x_b
        self.label = label
        self.env_a = env_a
        self.env_b = env_b

    def __repr__(self):
        return f"MixPair({self.env_a}/{self.env_b}, label={self.label})"


class MixConfig:
    alpha: float
    discrepancy: str
    consistency_weight: float
    sparsity_weight: float
    delta: Optional[float]

    def __init__(
            self,
            alpha: float = MIX_ALPHA,
            discrepancy: str = 'l1',
            consistency_weight: float = CONSISTENCY_WEIGHT,
            sparsity_weight: float = SPARSITY_WEIGHT,
            delta: Optional[float] = None,
    ):
        if alpha <= 0:
            raise InputError(f"mixing concentration alpha must be positive, got {alpha}")
        if discrepancy not in DISCREPANCIES:
            raise InputError(f"discrepancy must be one of {DISCREPANCIES}, got '{discrepancy}'")
        if consistency_weight < 0 or sparsity_weight < 0:
            raise InputError(f"loss weights must be nonnegative, got lambda={consistency_weight} gamma={sparsity_weight}")
        if delta is not None and delta < 0:
            raise InputError(f"pairing threshold delta must be nonnegative, got {delta}")
        self.alpha = float(alpha)
        self.discrepancy = discrepancy
        self.consistency_weight = float(consistency_weight)
        self.sparsity_weight = float(sparsity_weight)
        self.delta = None if delta is None else float(delta)

    def with_weights(self, consistency_weight: Optional[float] = None, sparsity_weight: Optional[float] = None) -> 'MixConfig':
        return MixConfig(
            self.alpha,
            self.discrepancy,
            self.consistency_weight if consistency_weight is None else consistency_weight,
            self.sparsity_weight if sparsity_weight is None else sparsity_weight,
            self.delta,
        )

    def resolve_delta(self, targets: np.ndarray) -> float:
        if self.delta is not None:
            return self.delta
        return PAIRING_DELTA_FACTOR * float(np.std(targets))


class LossBreakdown:
    task: float
    consistency: float
    sparsity: float
    total: float

    def __init__(self, task: float, consistency: float, sparsity: float, total: float):
        self.task = float(task)
        self.consistency = float(consistency)
        self.sparsity = float(sparsity)
        self.total = float(total)

    def recompose(self, consistency_weight: float, sparsity_weight: float) -> float:
        return self.task + consistency_weight * self.consistency + sparsity_weight * self.sparsity

    def as_row(self) -> dict[str, float]:
        return {'task': self.task, 'consistency': self.consistency, 'sparsity': self.sparsity, 'total': self.total}

    def __repr__(self):
        return f"LossBreakdown(task={self.task:.6g}, consistency={self.consistency:.6g}, sparsity={self.sparsity:.6g}, total={self.total:.6g})"


# numeric forms

def sample_tau(alpha: float, rng: np.random.Generator, size: Optional[int] = None):
    if alpha <= 0:
        raise InputError(f"mixing concentration alpha must be positive, got {alpha}")
    draws = rng.beta(alpha, alpha, size=size)
    # small alpha can round a draw onto an endpoint
    draws = np.clip(draws, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(draws) if size is None else draws


def _check_tau(tau):
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise InputError(f"mixing coefficient must lie in [0, 1], got {tau}")
    return tau


def mixup_inputs(x_a: np.ndarray, x_b: np.ndarray, tau: float) -> np.ndarray:
    x_a, x_b = np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise InputError(f"cannot mix inputs of shapes {x_a.shape} and {x_b.shape}")
    return mix(x_a, x_b, _check_tau(tau))


def mixup_explanations(g_a: np.ndarray, g_b: np.ndarray, tau: float) -> np.ndarray:
    g_a, g_b = np.asarray(g_a, dtype=np.float64), np.asarray(g_b, dtype=np.float64)
    if g_a.shape != g_b.shape:
        raise InputError(f"cannot mix explanations of shapes {g_a.shape} and {g_b.shape}")
    return mix(g_a, g_b, _check_tau(tau))


def _as_distribution(values: np.ndarray) -> np.ndarray:
    magnitudes = np.abs(values)
    if not np.any(magnitudes):
        raise DegenerateDistributionError("cannot normalize an all-zero attribution into a distribution")
    floored = magnitudes + KL_FLOOR
    return floored / floored.sum()


def consistency_discrepancy(g_mixed_sample: np.ndarray, mixed_explanations: np.ndarray, kind: str = 'l1') -> float:
    """l1 is symmetric; kl is KL(mixed sample || mixed explanations) and is not."""
    a, b = np.asarray(g_mixed_sample, dtype=np.float64), np.asarray(mixed_explanations, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"cannot compare explanations of shapes {a.shape} and {b.shape}")
    if kind == 'l1':
        return float(np.mean(np.abs(a - b)))
    if kind == 'kl':
        p, q = _as_distribution(a), _as_distribution(b)
        return float(np.sum(p * (np.log(p) - np.log(q))))
    raise InputError(f"discrepancy must be one of {DISCREPANCIES}, got '{kind}'")


def sparsity_penalty(g: np.ndarray) -> float:
    return float(np.mean(np.abs(g)))


# graph forms

def append_consistency(builder: GraphBuilder, g_mixed_sample: int, mixed_explanations: int, kind: str) -> tuple[int, int]:
    """Consistency node and a node counting the pairs left out of it.

    KL compares attribution distributions, so a pair where either side has no attribution mass
    (a rectified Grad-CAM map can be all zero) is left out and the mean runs over the others.
    """
    if kind == 'l1':
        return builder.mean(builder.abs(builder.sub(g_mixed_sample, mixed_explanations))), builder.constant(0.0)
    shape = builder.shape_of(g_mixed_sample)
    rows, features = shape[0], int(np.prod(shape[1:], dtype=np.int64))
    floor = builder.constant(KL_FLOOR)
    one = builder.constant(1.0)

    def distribution(magnitudes: int) -> int:
        floored = builder.add(magnitudes, floor)
        return builder.div(floored, builder.sum(floored, axes=1, keepdims=True))

    p_mass = builder.reshape(builder.abs(g_mixed_sample), (rows, features))
    q_mass = builder.reshape(builder.abs(mixed_explanations), (rows, features))
    kept = builder.mul(builder.nonzero_rows(p_mass), builder.nonzero_rows(q_mass))
    p, q = distribution(p_mass), distribution(q_mass)
    per_row = builder.sum(builder.mul(p, builder.sub(builder.log(p), builder.log(q))), axes=1)
    n_kept = builder.sum(kept)
    # an all-degenerate batch divides zero by one
    denominator = builder.add(n_kept, builder.sub(one, builder.step(n_kept)))
    consistency = builder.div(builder.sum(builder.mul(per_row, kept)), denominator)
    return consistency, builder.sub(builder.constant(float(rows)), n_kept)


def append_sparsity(builder: GraphBuilder, g: int) -> int:
    return builder.mean(builder.abs(g))


# pairing

def predict_targets(model: Model, task: TaskSpec, x: np.ndarray) -> np.ndarray:
    return predict_classes(model, x) if task.is_classification else forward(model, x)[:, 0]


def _pool(per_env_batches: list[EnvironmentDataset]) -> list[tuple[int, int]]:
    return [(env_index, sample) for env_index, env in enumerate(per_env_batches) for sample in range(len(env))]


def _greedy_pairs(candidates: list[tuple[int, int]], compatible) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    remaining = list(candidates)
    pairs = []
    while remaining:
        first = remaining.pop(0)
        for position, second in enumerate(remaining):
            if second[0] != first[0] and compatible(first, second):
                pairs.append((first, remaining.pop(position)))
                break
    return pairs


def pair_batch(
        per_env_batches: list[EnvironmentDataset],
        task: TaskSpec,
        delta: float,
        rng: np.random.Generator,
        pair_by: str = 'label',
        model: Optional[Model] = None,
) -> list[MixPair]:
    """Pair samples across environments.

    Classification pairs share a label (or a predicted class with ``pair_by='prediction'``),
    regression pairs have targets at most ``delta`` apart. Samples left without a partner are
    simply not paired.
    """
    if len(per_env_batches) < 2:
        raise InputError(f"pairing needs at least 2 environments, got {len(per_env_batches)}")
    if pair_by not in PAIR_BY:
        raise InputError(f"pair_by must be one of {PAIR_BY}, got '{pair_by}'")
    if pair_by == 'prediction' and model is None:
        raise InputError("pairing by prediction needs a model")
    envs = per_env_batches
    if pair_by == 'prediction':
        keys = [predict_targets(model, task, env.samples) for env in envs]
    else:
        keys = [env.targets for env in envs]
    pool = _pool(envs)
    if task.is_classification:
        matched = []
        for label in np.unique(np.concatenate(keys)):
            group = [member for member in pool if keys[member[0]][member[1]] == label]
            order = rng.permutation(len(group))
            matched += _greedy_pairs([group[index] for index in order], lambda first, second: True)
    else:
        order = rng.permutation(len(pool))
        matched = _greedy_pairs(
            [pool[index] for index in order],
            lambda first, second: abs(float(keys[first[0]][first[1]]) - float(keys[second[0]][second[1]])) <= delta,
        )
    pairs = []
    for (env_a, index_a), (env_b, index_b) in matched:
        if task.is_classification:
            label = int(keys[env_a][index_a])
        else:
            label = (float(envs[env_a].targets[index_a]), float(envs[env_b].targets[index_b]))
        pairs.append(MixPair(envs[env_a].samples[index_a], envs[env_b].samples[index_b], label, envs[env_a].env_id, envs[env_b].env_id))
    return pairs


# loss graph

def task_targets(task: TaskSpec, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets)
    if not task.is_classification:
        return targets.astype(np.float64).reshape(-1, 1)
    matrix = np.zeros((len(targets), task.n_classes))
    matrix[np.arange(len(targets)), targets.astype(np.int64)] = 1.0
    return matrix


def explained_outputs(task: TaskSpec, pairs: list[MixPair]) -> np.ndarray:
    # regression explains the single output
    if not task.is_classification:
        return np.ones((len(pairs), 1))
    return task_targets(task, np.array([pair.label for pair in pairs], dtype=np.int64))


def append_task_loss(builder: GraphBuilder, task: TaskSpec, logits: int, targets: int) -> int:
    if task.is_classification:
        return builder.mean(builder.cross_entropy(logits, targets))
    return builder.mean(builder.squared_error(logits, targets))


def _broadcastable(builder: GraphBuilder, tau: int, like: int) -> int:
    rank = len(builder.shape_of(like))
    return builder.reshape(tau, (builder.shape_of(tau)[0],) + (1,) * (rank - 1))


class LossGraphKey:
    """Everything the structure of a loss graph depends on."""

    def __init__(self, spec: ModelSpec, task: TaskSpec, n_samples: int, n_pairs: int, discrepancy: str, explainer: str, detach_cam_weights: bool):
        self.values = (spec, task, n_samples, n_pairs, discrepancy, explainer, detach_cam_weights)

    def __hash__(self):
        return hash(self.values)

    def __eq__(self, other):
        return isinstance(other, LossGraphKey) and self.values == other.values


_loss_graphs: dict[LossGraphKey, ComputeGraph] = {}


def dre_loss_graph(
        spec: ModelSpec,
        task: TaskSpec,
        n_samples: int,
        n_pairs: int,
        discrepancy: str = 'l1',
        explainer: str = 'input_gradient',
        detach_cam_weights: bool = False,
) -> ComputeGraph:
    """Loss graph with outputs task, consistency, sparsity, total, degenerate and d[total]/d[<parameter>].

    Inputs: x, y (task targets), lambda, gamma, parameters and, when n_pairs > 0, xa, xb,
    tau (one coefficient per pair) and explained (selects the explained output per pair).
    """
    key = LossGraphKey(spec, task, n_samples, n_pairs, discrepancy, explainer, detach_cam_weights)
    if key in _loss_graphs:
        return _loss_graphs[key]
    builder = GraphBuilder()
    parameters = declare_parameters(builder, spec)
    x = builder.input('x', (n_samples,) + spec.input_shape)
    y = builder.input('y', (n_samples, task.output_dim))
    consistency_weight = builder.input('lambda', ())
    sparsity_weight = builder.input('gamma', ())
    task_loss = append_task_loss(builder, task, build_forward(builder, spec, x, parameters).logits, y)
    if n_pairs > 0:
        x_a = builder.input('xa', (n_pairs,) + spec.input_shape)
        x_b = builder.input('xb', (n_pairs,) + spec.input_shape)
        tau = builder.input('tau', (n_pairs,))
        explained = builder.input('explained', (n_pairs, task.output_dim))
        g_a, _ = append_explanation(builder, spec, x_a, explained, parameters, explainer, detach_cam_weights)
        g_b, _ = append_explanation(builder, spec, x_b, explained, parameters, explainer, detach_cam_weights)
        # one tau node feeds both the input mixture and the explanation mixture
        x_mixed = builder.mix(x_a, x_b, _broadcastable(builder, tau, x_a))
        g_mixed_sample, _ = append_explanation(builder, spec, x_mixed, explained, parameters, explainer, detach_cam_weights)
        mixed_explanations = builder.mix(g_a, g_b, _broadcastable(builder, tau, g_a))
        consistency, degenerate = append_consistency(builder, g_mixed_sample, mixed_explanations, discrepancy)
        sparsity = builder.add(append_sparsity(builder, g_a), append_sparsity(builder, g_b))
    else:
        consistency = builder.constant(0.0)
        sparsity = builder.constant(0.0)
        degenerate = builder.constant(0.0)
    total = builder.add(
        builder.add(task_loss, builder.mul(consistency_weight, consistency)),
        builder.mul(sparsity_weight, sparsity),
    )
    for name, node in [('task', task_loss), ('consistency', consistency), ('sparsity', sparsity), ('total', total), ('degenerate', degenerate)]:
        builder.output(name, node)
    gradients = append_gradients(builder, total, [parameters[name] for name, _ in parameter_shapes(spec)])
    for name, _ in parameter_shapes(spec):
        builder.output(gradient_name('total', name), gradients[parameters[name]])
    graph = builder.freeze()
    logging.getLogger(__name__).debug(f"built loss graph for {n_samples} samples and {n_pairs} pairs: {len(graph.nodes)} nodes")
    _loss_graphs[key] = graph
    return graph


class LossEvaluation:
    breakdown: LossBreakdown
    gradients: dict[str, np.ndarray]
    n_pairs: int
    n_degenerate: int

    def __init__(self, breakdown: LossBreakdown, gradients: dict[str, np.ndarray], n_pairs: int, n_degenerate: int = 0):
        self.breakdown = breakdown
        self.gradients = gradients
        self.n_pairs = n_pairs
        self.n_degenerate = n_degenerate


def loss_bindings(model: Model, task: TaskSpec, x: np.ndarray, y: np.ndarray, config: MixConfig, pairs: list[MixPair], taus: np.ndarray) -> dict[str, np.ndarray]:
    bindings = model.params.as_dict()
    bindings['x'] = x
    bindings['y'] = y
    bindings['lambda'] = np.float64(config.consistency_weight)
    bindings['gamma'] = np.float64(config.sparsity_weight)
    if pairs:
        bindings['xa'] = np.stack([pair.x_a for pair in pairs])
        bindings['xb'] = np.stack([pair.x_b for pair in pairs])
        bindings['tau'] = np.asarray(taus, dtype=np.float64)
        bindings['explained'] = explained_outputs(task, pairs)
    return bindings


def evaluate_loss(
        model: Model,
        task: TaskSpec,
        x: np.ndarray,
        y: np.ndarray,
        config: MixConfig,
        pairs: list[MixPair],
        taus: np.ndarray,
        explainer: str = 'input_gradient',
        detach_cam_weights: bool = False,
) -> LossEvaluation:
    graph = dre_loss_graph(model.spec, task, x.shape[0], len(pairs), config.discrepancy, explainer, detach_cam_weights)
    values = evaluate(graph, loss_bindings(model, task, x, y, config, pairs, taus))
    breakdown = LossBreakdown(values['task'], values['consistency'], values['sparsity'], values['total'])
    gradients = {name: values[gradient_name('total', name)] for name in model.params.names()}
    return LossEvaluation(breakdown, gradients, len(pairs), int(round(float(values['degenerate']))))


def dre_loss(
        model: Model,
        per_env_batches: list[EnvironmentDataset],
        config: MixConfig,
        task: TaskSpec,
        rng: np.random.Generator,
        explainer: str = 'input_gradient',
        detach_cam_weights: bool = False,
        pair_by: str = 'label',
) -> LossEvaluation:
    """Task loss over every sample plus the weighted consistency and sparsity terms over pairs."""
    x = np.concatenate([env.samples for env in per_env_batches])
    targets = np.concatenate([env.targets for env in per_env_batches])
    delta = config.resolve_delta(targets) if not task.is_classification else 0.0
    pairs = pair_batch(per_env_batches, task, delta, rng, pair_by, model)
    taus = sample_tau(config.alpha, rng, size=len(pairs))
    return evaluate_loss(model, task, x, task_targets(task, targets), config, pairs, taus, explainer, detach_cam_weights)
