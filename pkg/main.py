import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from config import RunConfig, load_run_config, write_run_config
from const import EXIT_INPUT_ERROR, EXIT_NUMERIC_ERROR, EXIT_OK, LOG_FILE
from errors import InputError, NumericError
from explainers import dump_attribution_csv, dump_attribution_pgm, explain
from loader.bundle_loader import bundle_hash, load_bundle, save_bundle
from loader.environment import DatasetBundle, leave_one_out_rotations
from loader.environment_generator import generate
from logger import create_logger
from metrics import MetricReport, evaluate_model
from models import load_model, save_model
from report import (
    artifact_path,
    dump_attributions,
    normalize_by_test_env,
    write_curve_csv,
    write_metrics_csv,
    write_summary,
)
from trainer import HyperParams, check_compatible, merge, split_environments, train, write_history_csv

ROTATIONS = ['leave_one_out', 'held_out']


def resolve_seed(config: RunConfig, seed: Optional[int]) -> int:
    return config.seeds[0] if seed is None else seed


def resolve_hyper(config: RunConfig, seed: int, method: Optional[str]) -> HyperParams:
    return config.hyper.with_method(method or config.hyper.method).with_seed(seed)


def prepare_output_dir(output_dir: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    return output_dir


def cmd_generate(config_path: str, output: Optional[str] = None, seed: Optional[int] = None, logger: logging.Logger = logging.getLogger(__name__)) -> tuple[str, str]:
    config = load_run_config(config_path)
    seed = resolve_seed(config, seed)
    path = output or os.path.join(prepare_output_dir(config.output_dir), f"bundle_{config.generator.kind}_s{seed}.bundle")
    save_bundle(generate(config.generator, seed), path)
    digest = bundle_hash(path)
    logger.info(f"Wrote bundle {path} (sha256 {digest})")
    return path, digest


def cmd_train(
        bundle_path: str,
        config_path: str,
        seed: Optional[int] = None,
        method: Optional[str] = None,
        output_dir: Optional[str] = None,
        logger: logging.Logger = logging.getLogger(__name__),
) -> tuple[str, str]:
    config = load_run_config(config_path)
    bundle = load_bundle(bundle_path)
    seed = resolve_seed(config, seed)
    hyper = resolve_hyper(config, seed, method)
    output_dir = prepare_output_dir(output_dir or config.output_dir)
    model, history = train(bundle, config.model.spec_for(bundle), hyper, logger)
    checkpoint = artifact_path(output_dir, 'checkpoint', hyper.method, bundle.test_env.env_id, seed, 'params')
    history_path = artifact_path(output_dir, 'history', hyper.method, bundle.test_env.env_id, seed, 'csv')
    save_model(model, checkpoint)
    write_history_csv(history, history_path)
    write_run_config(config, artifact_path(output_dir, 'run_config', hyper.method, bundle.test_env.env_id, seed, 'yaml'), seed, hyper.method)
    logger.info(f"Wrote {checkpoint} and {history_path}")
    return checkpoint, history_path


def evaluate_cell(model, bundle: DatasetBundle, config: RunConfig, hyper: HyperParams, output_dir: str, logger: logging.Logger) -> MetricReport:
    check_compatible(bundle, model.spec)
    train_envs, val_envs = split_environments(bundle, hyper.train_fraction, hyper.seed)
    report = evaluate_model(model, bundle, train_envs, merge(val_envs, 'validation'), config.metrics, hyper.method, hyper.seed, logger)
    if report.curve is not None:
        write_curve_csv(report.curve, artifact_path(output_dir, 'curve', hyper.method, bundle.test_env.env_id, hyper.seed, 'csv'))
    dump_attributions(model, bundle.test_env, config.metrics.explainer, config.dump_samples, output_dir, hyper.method, hyper.seed)
    return report


def cmd_eval(
        checkpoint: str,
        bundle_path: str,
        config_path: str,
        seed: Optional[int] = None,
        method: Optional[str] = None,
        output_dir: Optional[str] = None,
        logger: logging.Logger = logging.getLogger(__name__),
) -> str:
    config = load_run_config(config_path)
    bundle = load_bundle(bundle_path)
    seed = resolve_seed(config, seed)
    hyper = resolve_hyper(config, seed, method)
    output_dir = prepare_output_dir(output_dir or config.output_dir)
    report = evaluate_cell(load_model(checkpoint), bundle, config, hyper, output_dir, logger)
    path = artifact_path(output_dir, 'metrics', hyper.method, bundle.test_env.env_id, seed, 'csv')
    write_metrics_csv([report], path)
    write_run_config(config, artifact_path(output_dir, 'run_config', hyper.method, bundle.test_env.env_id, seed, 'yaml'), seed, hyper.method)
    logger.info(f"Wrote {path}")
    return path


def cmd_explain(
        checkpoint: str,
        bundle_path: str,
        env_id: Optional[str],
        index: int,
        explainer: str,
        target: Optional[int],
        output_dir: str,
        label: str = 'model',
        logger: logging.Logger = logging.getLogger(__name__),
) -> list[str]:
    bundle = load_bundle(bundle_path)
    model = load_model(checkpoint)
    check_compatible(bundle, model.spec)
    env = bundle.environment(env_id) if env_id else bundle.test_env
    if not 0 <= index < len(env):
        raise InputError(f"sample index {index} outside environment '{env.env_id}' of {len(env)} samples")
    attribution = explain(model, env.samples[index], explainer, target)
    output_dir = prepare_output_dir(output_dir)
    written = [artifact_path(output_dir, 'attr', label, env.env_id, 0, 'csv', f"_i{index}")]
    dump_attribution_csv(attribution, written[0])
    if attribution.values.ndim >= 2:
        written.append(artifact_path(output_dir, 'attr', label, env.env_id, 0, 'pgm', f"_i{index}"))
        dump_attribution_pgm(attribution, written[1])
    logger.info(f"Explained sample {index} of {env.env_id} for output {attribution.target}: {written}")
    return written


class BenchmarkCell:
    """One (test environment, method, seed) run of a benchmark."""

    def __init__(self, bundle: DatasetBundle, config: RunConfig, method: str, seed: int, output_dir: str):
        self.bundle = bundle
        self.config = config
        self.method = method
        self.seed = seed
        self.output_dir = output_dir


def run_cell(cell: BenchmarkCell) -> MetricReport:
    logger = logging.getLogger(__name__)
    hyper = resolve_hyper(cell.config, cell.seed, cell.method)
    test_env = cell.bundle.test_env.env_id
    model, history = train(cell.bundle, cell.config.model.spec_for(cell.bundle), hyper, logger)
    save_model(model, artifact_path(cell.output_dir, 'checkpoint', cell.method, test_env, cell.seed, 'params'))
    write_history_csv(history, artifact_path(cell.output_dir, 'history', cell.method, test_env, cell.seed, 'csv'))
    return evaluate_cell(model, cell.bundle, cell.config, hyper, cell.output_dir, logger)


def benchmark_cells(config: RunConfig, bundles: dict[int, DatasetBundle], rotation: str, output_dir: str) -> list[BenchmarkCell]:
    cells = []
    for seed in config.seeds:
        rotations = list(leave_one_out_rotations(bundles[seed])) if rotation == 'leave_one_out' else [bundles[seed]]
        for rotated in rotations:
            cells += [BenchmarkCell(rotated, config, method, seed, output_dir) for method in config.methods]
    return cells


def cmd_benchmark(
        config_path: str,
        bundle_path: Optional[str] = None,
        workers: int = 1,
        rotation: str = 'leave_one_out',
        output_dir: Optional[str] = None,
        seed: Optional[int] = None,
        logger: logging.Logger = logging.getLogger(__name__),
) -> list[MetricReport]:
    if rotation not in ROTATIONS:
        raise InputError(f"rotation must be one of {ROTATIONS}, got '{rotation}'")
    if workers < 1:
        raise InputError(f"worker count must be positive, got {workers}")
    config = load_run_config(config_path)
    if seed is not None:
        config.seeds = [seed]
    output_dir = prepare_output_dir(output_dir or config.output_dir)
    # one bundle per seed unless a fixed bundle is given
    bundles = {seed: load_bundle(bundle_path) if bundle_path else generate(config.generator, seed) for seed in config.seeds}
    cells = benchmark_cells(config, bundles, rotation, output_dir)
    logger.info(f"Benchmark of {len(cells)} cells with {workers} worker(s): methods {config.methods}, seeds {config.seeds}")
    if workers == 1:
        reports = [run_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            reports = list(executor.map(run_cell, cells))
    normalize_by_test_env(reports)
    write_metrics_csv(reports, os.path.join(output_dir, 'metrics.csv'))
    task = next(iter(bundles.values())).task
    write_summary(reports, task, config.methods, output_dir)
    write_run_config(config, os.path.join(output_dir, 'run_config.yaml'))
    logger.info(f"Wrote metrics.csv, summary.csv, summary.txt and run_config.yaml to {output_dir}")
    return reports


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='drelab', description='Distributionally robust explanations laboratory')
    parser.add_argument('--verbose', action='store_true', help='Log at debug level')
    parser.add_argument('--log-file', default=LOG_FILE, help='Log file path')
    verbs = parser.add_subparsers(dest='verb', required=True)

    generate_parser = verbs.add_parser('generate', help='Generate a multi-environment dataset bundle')
    generate_parser.add_argument('--config', required=True)
    generate_parser.add_argument('--output', help='Bundle path (default: inside the output directory)')
    generate_parser.add_argument('--seed', type=int)

    train_parser = verbs.add_parser('train', help='Train one model on a bundle')
    train_parser.add_argument('--bundle', required=True)
    train_parser.add_argument('--config', required=True)
    train_parser.add_argument('--seed', type=int)
    train_parser.add_argument('--method')
    train_parser.add_argument('--output-dir')

    eval_parser = verbs.add_parser('eval', help='Evaluate a checkpoint on the held-out environment')
    eval_parser.add_argument('--checkpoint', required=True)
    eval_parser.add_argument('--bundle', required=True)
    eval_parser.add_argument('--config', required=True)
    eval_parser.add_argument('--seed', type=int)
    eval_parser.add_argument('--method', help='Method label used in file names')
    eval_parser.add_argument('--output-dir')

    explain_parser = verbs.add_parser('explain', help='Dump the attribution of a single sample')
    explain_parser.add_argument('--checkpoint', required=True)
    explain_parser.add_argument('--bundle', required=True)
    explain_parser.add_argument('--env', help='Environment id (default: the test environment)')
    explain_parser.add_argument('--index', type=int, default=0)
    explain_parser.add_argument('--explainer', default='input_gradient')
    explain_parser.add_argument('--target', type=int, help='Explained output (default: predicted class)')
    explain_parser.add_argument('--method', default='model', help='Label used in file names')
    explain_parser.add_argument('--output-dir', default='.')

    benchmark_parser = verbs.add_parser('benchmark', help='Leave-one-environment-out benchmark over methods and seeds')
    benchmark_parser.add_argument('--config', required=True)
    benchmark_parser.add_argument('--bundle', help='Use this bundle for every seed instead of generating one per seed')
    benchmark_parser.add_argument('--workers', type=int, default=1)
    benchmark_parser.add_argument('--rotation', choices=ROTATIONS, default='leave_one_out')
    benchmark_parser.add_argument('--seed', type=int)
    benchmark_parser.add_argument('--output-dir')
    return parser


def run(args: argparse.Namespace, logger: logging.Logger):
    if args.verb == 'generate':
        _, digest = cmd_generate(args.config, args.output, args.seed, logger)
        print(digest)
    elif args.verb == 'train':
        cmd_train(args.bundle, args.config, args.seed, args.method, args.output_dir, logger)
    elif args.verb == 'eval':
        cmd_eval(args.checkpoint, args.bundle, args.config, args.seed, args.method, args.output_dir, logger)
    elif args.verb == 'explain':
        cmd_explain(args.checkpoint, args.bundle, args.env, args.index, args.explainer, args.target, args.output_dir, args.method, logger)
    else:
        cmd_benchmark(args.config, args.bundle, args.workers, args.rotation, args.output_dir, args.seed, logger)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = create_logger(args.log_file, logging.DEBUG if args.verbose else logging.INFO)
    try:
        run(args, logger)
    except InputError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except NumericError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
