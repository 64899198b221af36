from typing import Any, Callable, Optional

import yaml

from const import DUMP_SAMPLES, METHODS
from dre_objective import MixConfig
from errors import ConfigError, InputError
from loader.environment import DatasetBundle, GeneratorConfig
from metrics import MetricOptions
from models import ModelSpec
from trainer import HyperParams, all_methods

GENERATOR_FIELDS = {
    'kind': str, 'n_classes': int, 'd_core': int, 'd_spur': int, 'd_noise': int, 'image_size': int,
    'train_rhos': list, 'test_rho': float, 'samples_per_env': int, 'noise_sigma': float, 'env_shift': float,
    'teacher_seed': int,
}
MODEL_FIELDS = {'kind': str, 'hidden': list, 'activation': str, 'kernel_size': int}
HYPER_FIELDS = {
    'method': str, 'learning_rate': float, 'batch_size': int, 'steps': int, 'beta1': float, 'beta2': float,
    'eps': float, 'clip_norm': float, 'val_every': int, 'mixup_alpha': float, 'explainer': str,
    'detach_cam_weights': bool, 'pair_by': str, 'train_fraction': float, 'mix': dict,
}
MIX_FIELDS = {'alpha': float, 'discrepancy': str, 'lambda': float, 'gamma': float, 'delta': float}
METRIC_FIELDS = {
    'explainer': str, 'n_dec_pairs': int, 'iauc_samples': int, 'iauc_steps': int, 'sc_samples': int, 'dump_samples': int,
}
TOP_LEVEL_FIELDS = {
    'generator': dict, 'model': dict, 'hyper': dict, 'metrics': dict, 'output_dir': str, 'seeds': list, 'methods': list,
}
REQUIRED = {
    '': ['generator', 'model', 'output_dir', 'seeds'],
    'generator': ['kind'],
    'model': ['kind', 'hidden'],
}


def _convert(value: Any, kind: type, field: str) -> Any:
    if value is None and kind is float and field.endswith(('clip_norm', 'delta')):
        return None
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind in (str, bool, list, dict) and isinstance(value, kind):
        return value
    raise ConfigError(field, f"config field '{field}' must be of type {kind.__name__}, got {value!r}")


def read_section(raw: Any, schema: dict[str, type], prefix: str) -> dict[str, Any]:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix or 'root', f"config section '{prefix or 'root'}' must be a mapping")
    section = {}
    for key, value in raw.items():
        field = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError(field, f"unknown config field '{field}'")
        section[key] = _convert(value, schema[key], field)
    for key in REQUIRED.get(prefix, []):
        if key not in section:
            raise ConfigError(f"{prefix}.{key}" if prefix else key)
    return section


def _build(field: str, factory: Callable, **kwargs):
    try:
        return factory(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{field}.{e.field}", str(e))
    except (InputError, TypeError, ValueError) as e:
        raise ConfigError(field, f"invalid '{field}' section: {e}")


class ModelTemplate:
    """Model settings of a run; input shape and output width come from the bundle."""
    kind: str
    hidden: list[int]
    activation: str
    kernel_size: int

    def __init__(self, kind: str, hidden: list, activation: str = 'relu', kernel_size: int = 3):
        self.kind = kind
        self.hidden = [int(width) for width in hidden]
        self.activation = activation
        self.kernel_size = kernel_size

    def spec_for(self, bundle: DatasetBundle) -> ModelSpec:
        return ModelSpec(self.kind, self.hidden, self.activation, bundle.feature_shape, bundle.task.output_dim, self.kernel_size)

    def as_dict(self) -> dict:
        return {'kind': self.kind, 'hidden': list(self.hidden), 'activation': self.activation, 'kernel_size': self.kernel_size}


class RunConfig:
    generator: GeneratorConfig
    model: ModelTemplate
    hyper: HyperParams
    metrics: MetricOptions
    dump_samples: int
    output_dir: str
    seeds: list[int]
    methods: list[str]

    def __init__(self, generator: GeneratorConfig, model: ModelTemplate, hyper: HyperParams, metrics: MetricOptions, output_dir: str, seeds: list[int], methods: Optional[list[str]] = None, dump_samples: int = DUMP_SAMPLES):
        if not seeds:
            raise ConfigError('seeds', "the seed list must not be empty")
        if any(not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 for seed in seeds):
            raise ConfigError('seeds', f"seeds must be nonnegative integers, got {seeds}")
        methods = list(methods or METHODS)
        unknown = [method for method in methods if method not in all_methods()]
        if unknown:
            raise ConfigError('methods', f"unknown methods {unknown}, choose from {all_methods()}")
        if dump_samples < 0:
            raise ConfigError('metrics.dump_samples', f"dump count must be nonnegative, got {dump_samples}")
        self.generator = generator
        self.model = model
        self.hyper = hyper
        self.metrics = metrics
        self.output_dir = output_dir
        self.seeds = list(seeds)
        self.methods = methods
        self.dump_samples = dump_samples

    def as_dict(self) -> dict:
        hyper = self.hyper
        return {
            'generator': self.generator.as_dict(),
            'model': self.model.as_dict(),
            'hyper': {
                'method': hyper.method, 'learning_rate': hyper.learning_rate, 'batch_size': hyper.batch_size,
                'steps': hyper.steps, 'beta1': hyper.beta1, 'beta2': hyper.beta2, 'eps': hyper.eps,
                'clip_norm': hyper.clip_norm, 'val_every': hyper.val_every, 'mixup_alpha': hyper.mixup_alpha,
                'explainer': hyper.explainer, 'detach_cam_weights': hyper.detach_cam_weights,
                'pair_by': hyper.pair_by, 'train_fraction': hyper.train_fraction,
                'mix': {
                    'alpha': hyper.mix.alpha, 'discrepancy': hyper.mix.discrepancy,
                    'lambda': hyper.mix.consistency_weight, 'gamma': hyper.mix.sparsity_weight,
                    'delta': hyper.mix.delta,
                },
            },
            'metrics': {
                'explainer': self.metrics.explainer, 'n_dec_pairs': self.metrics.n_dec_pairs,
                'iauc_samples': self.metrics.iauc_samples, 'iauc_steps': self.metrics.iauc_steps,
                'sc_samples': self.metrics.sc_samples, 'dump_samples': self.dump_samples,
            },
            'output_dir': self.output_dir,
            'seeds': list(self.seeds),
            'methods': list(self.methods),
        }


def parse_run_config(raw: Any) -> RunConfig:
    top = read_section(raw, TOP_LEVEL_FIELDS, '')
    generator = _build('generator', GeneratorConfig, **read_section(top['generator'], GENERATOR_FIELDS, 'generator'))
    model = ModelTemplate(**read_section(top['model'], MODEL_FIELDS, 'model'))
    hyper_fields = read_section(top.get('hyper'), HYPER_FIELDS, 'hyper')
    mix_fields = read_section(hyper_fields.pop('mix', None), MIX_FIELDS, 'hyper.mix')
    if 'lambda' in mix_fields:
        mix_fields['consistency_weight'] = mix_fields.pop('lambda')
    if 'gamma' in mix_fields:
        mix_fields['sparsity_weight'] = mix_fields.pop('gamma')
    mix = _build('hyper.mix', MixConfig, **mix_fields)
    hyper = _build('hyper', HyperParams, mix=mix, **hyper_fields)
    metric_fields = read_section(top.get('metrics'), METRIC_FIELDS, 'metrics')
    dump_samples = metric_fields.pop('dump_samples', DUMP_SAMPLES)
    metrics = _build('metrics', MetricOptions, mix=mix, **metric_fields)
    return RunConfig(generator, model, hyper, metrics, top['output_dir'], top['seeds'], top.get('methods'), dump_samples)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding='utf-8') as config_file:
            raw = yaml.safe_load(config_file)
    except OSError as e:
        raise ConfigError('path', f"cannot read config '{path}': {e}")
    except yaml.YAMLError as e:
        raise ConfigError('syntax', f"config '{path}' is not valid YAML: {e}")
    return parse_run_config(raw)


def write_run_config(config: RunConfig, path: str, seed: Optional[int] = None, method: Optional[str] = None):
    resolved = config.as_dict()
    if seed is not None:
        resolved['seed'] = seed
    if method is not None:
        resolved['hyper']['method'] = method
    with open(path, 'w', encoding='utf-8') as config_file:
        yaml.safe_dump(resolved, config_file, sort_keys=False)
