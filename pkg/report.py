import os

import pandas as pd

from const import ABLATION_METHODS, BASELINE_METHOD
from errors import DegenerateBaselineError
from explainers import Attribution, dump_attribution_csv, dump_attribution_pgm, explain_batch
from loader.environment import EnvironmentDataset, TaskSpec
from metrics import InsertionCurve, MetricReport, normalize_dec
from models import Model, predict_classes

FLOAT_FORMAT = '%.17g'
AVERAGE_ENV = 'avg'


def artifact_name(kind: str, method: str, test_env: str, seed: int, ext: str, suffix: str = '') -> str:
    return f"{kind}_{method}_{test_env}_s{seed}{suffix}.{ext}"


def artifact_path(output_dir: str, kind: str, method: str, test_env: str, seed: int, ext: str, suffix: str = '') -> str:
    return os.path.join(output_dir, artifact_name(kind, method, test_env, seed, ext, suffix))


def normalize_by_test_env(reports: list[MetricReport], baseline_method: str = BASELINE_METHOD):
    """Rescale raw DEC per test environment by the mean of the baseline method over seeds."""
    for test_env in dict.fromkeys(report.test_env for report in reports):
        cell = [report for report in reports if report.test_env == test_env]
        baseline = [report for report in cell if report.method == baseline_method]
        if not baseline:
            raise DegenerateBaselineError(f"no {baseline_method} reports for test environment '{test_env}' to normalize DEC by")
        normalize_dec(cell, baseline)


def metrics_frame(reports: list[MetricReport]) -> pd.DataFrame:
    return pd.DataFrame([report.as_row() for report in reports])


def write_metrics_csv(reports: list[MetricReport], path: str):
    metrics_frame(reports).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_curve_csv(curve: InsertionCurve, path: str):
    pd.DataFrame({'fraction': curve.fractions, 'score': curve.scores}).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def task_columns(task: TaskSpec) -> tuple[str, str]:
    name = 'accuracy' if task.is_classification else 'mae'
    return name, f"{name}_id"


def summary_values(metrics: pd.DataFrame, task: TaskSpec) -> pd.DataFrame:
    """Seed means per (method, test_env) plus an average row per method over test environments."""
    candidates = ['dec_raw', 'dec_relative', 'iauc', 'iauc_id', 'sc', 'sc_id', *task_columns(task)]
    columns = [column for column in candidates if column in metrics.columns]
    per_env = metrics.groupby(['method', 'test_env'], sort=False)[columns].mean().reset_index()
    average = per_env.groupby('method', sort=False)[columns].mean().reset_index()
    average.insert(1, 'test_env', AVERAGE_ENV)
    return pd.concat([per_env, average], ignore_index=True)


def summary_long(values: pd.DataFrame) -> pd.DataFrame:
    return values.melt(id_vars=['method', 'test_env'], var_name='metric', value_name='value')


def method_table(values: pd.DataFrame, task: TaskSpec) -> pd.DataFrame:
    shown = ['dec_relative', 'iauc', task_columns(task)[0]] if task.is_classification else ['dec_relative', 'sc', task_columns(task)[0]]
    table = values.pivot(index='method', columns='test_env', values=shown)
    environments = [env for env in dict.fromkeys(values['test_env']) if env != AVERAGE_ENV] + [AVERAGE_ENV]
    table = table.reindex(columns=pd.MultiIndex.from_product([shown, environments]))
    return table.reindex(list(dict.fromkeys(values['method'])))


def ablation_table(values: pd.DataFrame, task: TaskSpec) -> pd.DataFrame:
    variants = [BASELINE_METHOD, 'dre'] + list(ABLATION_METHODS)
    average = values[(values['test_env'] == AVERAGE_ENV) & values['method'].isin(variants)]
    shown = ['dec_relative', 'iauc' if task.is_classification else 'sc', task_columns(task)[0]]
    present = [method for method in variants if method in set(average['method'])]
    return average.set_index('method').reindex(present)[shown]


def robustness_table(values: pd.DataFrame, task: TaskSpec) -> pd.DataFrame:
    average = values[values['test_env'] == AVERAGE_ENV].set_index('method')
    pairs = [('sc_id', 'sc'), task_columns(task)[::-1]]
    if task.is_classification:
        pairs.insert(0, ('iauc_id', 'iauc'))
    table = pd.DataFrame(index=average.index)
    for in_distribution, out_of_distribution in pairs:
        table[in_distribution] = average[in_distribution]
        table[out_of_distribution] = average[out_of_distribution]
        table[f"{out_of_distribution}_drop"] = average[in_distribution] - average[out_of_distribution]
    return table


def render_summary(values: pd.DataFrame, task: TaskSpec, methods: list[str]) -> str:
    def formatted(table: pd.DataFrame) -> str:
        return table.to_string(float_format=lambda value: f"{value:.3f}", na_rep='-')

    sections = [
        f"Methods (DEC relative to {BASELINE_METHOD}, means over seeds)",
        formatted(method_table(values, task)),
    ]
    if any(method in ABLATION_METHODS for method in methods):
        sections += ['', 'Ablation (average over test environments)', formatted(ablation_table(values, task))]
    sections += ['', 'In-distribution vs out-of-distribution (average over test environments)', formatted(robustness_table(values, task))]
    return '\n'.join(sections) + '\n'


def write_summary(reports: list[MetricReport], task: TaskSpec, methods: list[str], output_dir: str) -> pd.DataFrame:
    values = summary_values(metrics_frame(reports), task)
    summary_long(values).to_csv(os.path.join(output_dir, 'summary.csv'), index=False, float_format=FLOAT_FORMAT)
    with open(os.path.join(output_dir, 'summary.txt'), 'w', encoding='utf-8') as summary:
        summary.write(render_summary(values, task, methods))
    return values


def dump_attributions(model: Model, env: EnvironmentDataset, explainer: str, count: int, output_dir: str, method: str, seed: int) -> list[str]:
    if count == 0:
        return []
    samples = env.samples[:count]
    values = explain_batch(model, samples, explainer)
    targets = predict_classes(model, samples)
    written = []
    for index in range(len(samples)):
        attribution = Attribution(values[index], explainer, int(targets[index]))
        suffix = f"_i{index}"
        csv_path = artifact_path(output_dir, 'attr', method, env.env_id, seed, 'csv', suffix)
        dump_attribution_csv(attribution, csv_path)
        written.append(csv_path)
        if attribution.values.ndim >= 2:
            pgm_path = artifact_path(output_dir, 'attr', method, env.env_id, seed, 'pgm', suffix)
            dump_attribution_pgm(attribution, pgm_path)
            written.append(pgm_path)
    return written

