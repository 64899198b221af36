import logging
from typing import Optional

import numpy as np
from scipy.ndimage import correlate

from const import (
    BLUR_SIGMA,
    BLUR_SIZE,
    DEC_PAIRS,
    IAUC_MAX_STEPS,
    IAUC_MIN_LOGIT,
    IAUC_SAMPLES,
    MEAN_PIN_STEPS,
    SC_SAMPLES,
)
from dre_objective import (
    MixConfig,
    consistency_discrepancy,
    mixup_explanations,
    mixup_inputs,
    pair_batch,
    sample_tau,
)
from errors import (
    DegenerateAttributionError,
    DegenerateBaselineError,
    DegenerateDistributionError,
    EmptyPairsError,
    InputError,
)
from explainers import check_explainer, explain_batch, rank_features
from loader.environment import DatasetBundle, EnvironmentDataset, TaskSpec
from models import Model, forward, predict_classes

REFERENCE_KINDS = ['blur', 'feature_mean']
EXPLAIN_CHUNK = 100


class InsertionCurve:
    fractions: np.ndarray
    scores: np.ndarray

    def __init__(self, fractions: np.ndarray, scores: np.ndarray):
        assert len(fractions) == len(scores), "one score per inserted fraction"
        self.fractions = fractions
        self.scores = scores

    def area(self) -> float:
        widths = np.diff(self.fractions)
        return float(np.sum(widths * (self.scores[1:] + self.scores[:-1]) / 2.0))


class MetricReport:
    method: str
    test_env: str
    seed: int
    task: TaskSpec
    dec_raw: float
    dec_relative: Optional[float]
    n_dec_pairs: int
    iauc: Optional[float]
    iauc_id: Optional[float]
    iauc_count: int
    iauc_skipped: int
    sc: float
    sc_id: float
    task_metric: float
    task_metric_id: float
    curve: Optional[InsertionCurve]

    def __init__(self, method: str, test_env: str, seed: int, task: TaskSpec):
        self.method = method
        self.test_env = test_env
        self.seed = seed
        self.task = task
        self.dec_raw = np.nan
        self.dec_relative = None
        self.n_dec_pairs = 0
        self.iauc = None
        self.iauc_id = None
        self.iauc_count = 0
        self.iauc_skipped = 0
        self.sc = np.nan
        self.sc_id = np.nan
        self.task_metric = np.nan
        self.task_metric_id = np.nan
        self.curve = None

    @property
    def task_metric_name(self) -> str:
        return 'accuracy' if self.task.is_classification else 'mae'

    def as_row(self) -> dict:
        row = {
            'method': self.method,
            'test_env': self.test_env,
            'seed': self.seed,
            'dec_raw': self.dec_raw,
            'dec_relative': np.nan if self.dec_relative is None else self.dec_relative,
            'n_dec_pairs': self.n_dec_pairs,
        }
        if self.task.is_classification:
            row.update({
                'iauc': np.nan if self.iauc is None else self.iauc,
                'iauc_id': np.nan if self.iauc_id is None else self.iauc_id,
                'iauc_count': self.iauc_count,
                'iauc_skipped': self.iauc_skipped,
            })
        row.update({
            'sc': self.sc,
            'sc_id': self.sc_id,
            self.task_metric_name: self.task_metric,
            f"{self.task_metric_name}_id": self.task_metric_id,
        })
        return row


class MetricOptions:
    explainer: str
    n_dec_pairs: int
    iauc_samples: int
    iauc_steps: int
    sc_samples: int
    mix: MixConfig

    def __init__(
            self,
            explainer: str = 'input_gradient',
            n_dec_pairs: int = DEC_PAIRS,
            iauc_samples: int = IAUC_SAMPLES,
            iauc_steps: int = IAUC_MAX_STEPS,
            sc_samples: int = SC_SAMPLES,
            mix: Optional[MixConfig] = None,
    ):
        if min(n_dec_pairs, iauc_samples, sc_samples) < 1:
            raise InputError("metric sample counts must be positive")
        if iauc_steps < 2:
            raise InputError(f"insertion curves need at least 2 steps, got {iauc_steps}")
        self.explainer = explainer
        self.n_dec_pairs = int(n_dec_pairs)
        self.iauc_samples = int(iauc_samples)
        self.iauc_steps = int(iauc_steps)
        self.sc_samples = int(sc_samples)
        self.mix = mix or MixConfig()


def explain_in_chunks(model: Model, x: np.ndarray, method: str, targets: Optional[np.ndarray] = None) -> np.ndarray:
    if targets is None:
        targets = predict_classes(model, x)
    chunks = [
        explain_batch(model, x[start:start + EXPLAIN_CHUNK], method, targets[start:start + EXPLAIN_CHUNK])
        for start in range(0, len(x), EXPLAIN_CHUNK)
    ]
    return np.concatenate(chunks)


def explained_targets(task: TaskSpec, env: EnvironmentDataset) -> np.ndarray:
    return env.targets.astype(np.int64) if task.is_classification else np.zeros(len(env), dtype=np.int64)


def subsample(env: EnvironmentDataset, count: int, rng: np.random.Generator, env_id: Optional[str] = None) -> EnvironmentDataset:
    indices = np.sort(rng.choice(len(env), size=min(count, len(env)), replace=False))
    chosen = env.subset(indices)
    return EnvironmentDataset(env_id or env.env_id, chosen.samples, chosen.targets)


def dec_metric(
        model: Model,
        id_env: EnvironmentDataset,
        ood_env: EnvironmentDataset,
        n_pairs: int,
        mix_config: MixConfig,
        rng: np.random.Generator,
        task: TaskSpec,
        explainer: str = 'input_gradient',
) -> tuple[float, int]:
    """Mean discrepancy between explanations of OOD/ID mixtures and mixtures of their explanations.

    Returns the mean and the number of pairs it was taken over. Under KL, pairs whose explanation is all
    zero have no distribution to compare and are left out.
    """
    if len(id_env) == 0 or len(ood_env) == 0:
        raise InputError("DEC needs nonempty in-distribution and out-of-distribution samples")
    if n_pairs < 1:
        raise InputError(f"DEC needs at least one pair, got {n_pairs}")
    check_explainer(model.spec, explainer)
    # pool from both sides is twice the pair budget so that labels can still be matched
    ood = subsample(ood_env, 2 * n_pairs, rng, 'ood')
    in_distribution = subsample(id_env, 2 * n_pairs, rng, 'id')
    delta = 0.0 if task.is_classification else mix_config.resolve_delta(np.concatenate([ood.targets, in_distribution.targets]))
    pairs = pair_batch([ood, in_distribution], task, delta, rng)[:n_pairs]
    if not pairs:
        raise EmptyPairsError(f"no pairs between '{ood_env.env_id}' and '{id_env.env_id}'")
    taus = sample_tau(mix_config.alpha, rng, size=len(pairs))
    x_a = np.stack([pair.x_a for pair in pairs])
    x_b = np.stack([pair.x_b for pair in pairs])
    targets = np.array([pair.label if task.is_classification else 0 for pair in pairs], dtype=np.int64)
    tau_rows = taus.reshape((-1,) + (1,) * (x_a.ndim - 1))
    g_a = explain_in_chunks(model, x_a, explainer, targets)
    g_b = explain_in_chunks(model, x_b, explainer, targets)
    g_mixed_sample = explain_in_chunks(model, mixup_inputs(x_a, x_b, tau_rows), explainer, targets)
    mixed_explanations = mixup_explanations(g_a, g_b, taus.reshape((-1,) + (1,) * (g_a.ndim - 1)))
    values = []
    for mixed_sample, mixed_explanation in zip(g_mixed_sample, mixed_explanations):
        try:
            values.append(consistency_discrepancy(mixed_sample, mixed_explanation, mix_config.discrepancy))
        except DegenerateDistributionError:
            continue
    if not values:
        raise DegenerateDistributionError(f"every explanation between '{ood_env.env_id}' and '{id_env.env_id}' is all zero")
    return float(np.mean(values)), len(values)


def normalize_dec(reports: list[MetricReport], baseline_reports: list[MetricReport]) -> list[float]:
    if not baseline_reports:
        raise DegenerateBaselineError("no baseline reports to normalize against")
    baseline = float(np.mean([report.dec_raw for report in baseline_reports]))
    if not baseline > 0:
        raise DegenerateBaselineError(f"baseline DEC must be positive, got {baseline}")
    for report in reports:
        report.dec_relative = report.dec_raw / baseline
    pinned = pin_mean([report.dec_relative for report in baseline_reports], 1.0)
    for report, value in zip(baseline_reports, pinned):
        report.dec_relative = float(value)
    return [report.dec_relative for report in reports]


def pin_mean(values: list[float], target: float) -> np.ndarray:
    """Move the largest of nonnegative ``values`` by whole ulps until ``np.mean`` returns exactly ``target``.

    Each nudge moves the rounded sum by at most one ulp, so the loop cannot step over the target.
    """
    values = np.array(values, dtype=np.float64)
    largest = int(np.argmax(values))
    values[largest] += (target - float(np.mean(values))) * len(values)
    for _ in range(MEAN_PIN_STEPS):
        mean = float(np.mean(values))
        if mean == target:
            break
        values[largest] = np.nextafter(values[largest], np.inf if mean < target else -np.inf)
    return values


def iauc(
        model: Model,
        x: np.ndarray,
        target: int,
        attribution: np.ndarray,
        reference: np.ndarray,
        n_steps: int,
) -> tuple[Optional[float], Optional[InsertionCurve]]:
    """Insert features from ``x`` onto ``reference`` in descending attribution order.

    Returns (None, None) when the target logit of the full input is too small to normalize by.
    """
    x, reference, attribution = np.asarray(x, dtype=np.float64), np.asarray(reference, dtype=np.float64), np.asarray(attribution)
    if reference.shape != x.shape:
        raise InputError(f"reference of shape {reference.shape} does not match input {x.shape}")
    if attribution.shape != x.shape and attribution.shape != x.shape[1:]:
        raise InputError(f"attribution of shape {attribution.shape} does not cover input {x.shape}")
    if n_steps < 2:
        raise InputError(f"insertion curves need at least 2 steps, got {n_steps}")
    order = rank_features(attribution).order
    unit_count = order.size
    canvases = np.empty((n_steps + 1,) + x.shape)
    for k in range(n_steps + 1):
        inserted = np.zeros(unit_count, dtype=bool)
        inserted[order[:int(np.floor(k * unit_count / n_steps + 0.5))]] = True
        # spatial masks cover every channel
        canvases[k] = np.where(inserted.reshape(attribution.shape), x, reference)
    logits = forward(model, canvases)[:, target]
    full = logits[-1]
    if full <= IAUC_MIN_LOGIT:
        return None, None
    curve = InsertionCurve(np.arange(n_steps + 1) / n_steps, logits / full)
    return curve.area(), curve


def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def make_reference(x: np.ndarray, kind: str, training_samples: Optional[np.ndarray] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == 'blur':
        if x.ndim < 3:
            raise InputError(f"blur references need images, got shape {x.shape}")
        kernel = gaussian_kernel().reshape((1,) * (x.ndim - 2) + (BLUR_SIZE, BLUR_SIZE))
        return correlate(x, kernel, mode='reflect')
    if kind == 'feature_mean':
        if training_samples is None:
            raise InputError("feature_mean references need the training samples")
        means = np.asarray(training_samples, dtype=np.float64).mean(axis=0)
        return np.broadcast_to(means, x.shape).copy()
    raise InputError(f"reference kind must be one of {REFERENCE_KINDS}, got '{kind}'")


def reference_kind(sample_shape: tuple[int, ...]) -> str:
    return 'blur' if len(sample_shape) == 3 else 'feature_mean'


def importance_target(true_importance: np.ndarray, attribution_shape: tuple[int, ...]) -> np.ndarray:
    if true_importance.shape == attribution_shape:
        return true_importance
    if true_importance.shape[1:] == attribution_shape:
        return true_importance.max(axis=0)
    raise InputError(f"true importance of shape {true_importance.shape} does not match attributions {attribution_shape}")


def scientific_consistency(
        model: Model,
        env: EnvironmentDataset,
        explainer: str,
        true_importance: np.ndarray,
        targets: Optional[np.ndarray] = None,
) -> float:
    true_importance = np.asarray(true_importance, dtype=np.float64)
    if not np.any(true_importance):
        raise InputError("true importance is all zero")
    attributions = explain_in_chunks(model, env.samples, explainer, targets)
    importance = np.abs(attributions).mean(axis=0)
    if not np.any(importance):
        raise DegenerateAttributionError(f"attributions on '{env.env_id}' are all zero")
    reference = importance_target(true_importance, importance.shape).reshape(-1)
    importance = importance.reshape(-1)
    return float(importance @ reference / (np.linalg.norm(importance) * np.linalg.norm(reference)))


def task_metric(model: Model, env: EnvironmentDataset, task: TaskSpec) -> float:
    if task.is_classification:
        return float(np.mean(predict_classes(model, env.samples) == env.targets))
    return float(np.mean(np.abs(forward(model, env.samples)[:, 0] - env.targets)))


def metric_improves(task: TaskSpec, candidate: float, best: float) -> bool:
    return candidate > best if task.is_classification else candidate < best


def insertion_scores(
        model: Model,
        env: EnvironmentDataset,
        task: TaskSpec,
        options: MetricOptions,
        reference_samples: np.ndarray,
        rng: np.random.Generator,
) -> tuple[Optional[float], int, int, Optional[InsertionCurve]]:
    """Mean iAUC over a sample of ``env`` for the correct class, with evaluated and skipped counts."""
    chosen = subsample(env, options.iauc_samples, rng)
    targets = explained_targets(task, chosen)
    attributions = explain_in_chunks(model, chosen.samples, options.explainer, targets)
    kind = reference_kind(env.feature_shape)
    references = make_reference(chosen.samples, kind, reference_samples)
    n_steps = max(2, min(attributions[0].size, options.iauc_steps))
    areas, curves, skipped = [], [], 0
    for index in range(len(chosen)):
        area, curve = iauc(model, chosen.samples[index], int(targets[index]), attributions[index], references[index], n_steps)
        if area is None:
            skipped += 1
            continue
        areas.append(area)
        curves.append(curve.scores)
    if not areas:
        return None, 0, skipped, None
    mean_curve = InsertionCurve(np.arange(n_steps + 1) / n_steps, np.mean(curves, axis=0))
    return float(np.mean(areas)), len(areas), skipped, mean_curve


def evaluate_model(
        model: Model,
        bundle: DatasetBundle,
        train_envs: list[EnvironmentDataset],
        validation: EnvironmentDataset,
        options: MetricOptions,
        method: str,
        seed: int,
        logger: logging.Logger = logging.getLogger(__name__),
) -> MetricReport:
    """Metric suite on the held-out environment, with in-distribution counterparts on ``validation``."""
    task = bundle.task
    test_env = bundle.test_env
    report = MetricReport(method, test_env.env_id, seed, task)
    rng = np.random.default_rng(seed)
    report.dec_raw, report.n_dec_pairs = dec_metric(model, validation, test_env, options.n_dec_pairs, options.mix, rng, task, options.explainer)
    reference_samples = np.concatenate([env.samples for env in train_envs])
    if task.is_classification:
        report.iauc, report.iauc_count, report.iauc_skipped, report.curve = insertion_scores(model, test_env, task, options, reference_samples, rng)
        report.iauc_id, _, skipped_id, _ = insertion_scores(model, validation, task, options, reference_samples, rng)
        if report.iauc_skipped or skipped_id:
            logger.info(f"iAUC skipped {report.iauc_skipped} OOD and {skipped_id} ID samples with non-positive full-input logits")
    for attribute, env in [('sc', test_env), ('sc_id', validation)]:
        chosen = subsample(env, options.sc_samples, rng)
        setattr(report, attribute, scientific_consistency(model, chosen, options.explainer, bundle.true_importance))
    report.task_metric = task_metric(model, test_env, task)
    report.task_metric_id = task_metric(model, validation, task)
    logger.info(
        f"{method} on {test_env.env_id} (seed {seed}): DEC {report.dec_raw:.6g}, SC {report.sc:.4f}, "
        f"{report.task_metric_name} {report.task_metric:.4f}"
    )
    return report
