import hashlib
import logging

import numpy as np

from const import BUNDLE_MAGIC, BUNDLE_VERSION
from errors import InputError, ParseError
from loader.environment import (
    DatasetBundle,
    EnvironmentDataset,
    TaskSpec,
)
from loader.loader_util import (
    HeaderLine,
    format_shape,
    parse_key_values,
    parse_shape,
    read_container,
    require,
    write_container,
)

ENV_ROLES = ['train', 'test']


def save_bundle(bundle: DatasetBundle, path: str):
    task = bundle.task
    header = [
        f"task kind={task.kind} classes={task.n_classes}",
        f"generator kind={bundle.generator_kind}",
        f"features shape={format_shape(bundle.feature_shape)}",
    ]
    arrays = [bundle.true_importance]
    for env in bundle.environments:
        role = 'test' if env is bundle.test_env else 'train'
        header.append(f"env id={env.env_id} role={role} samples={len(env)}")
        arrays += [env.samples, env.targets.astype(np.float64)]
    write_container(path, BUNDLE_MAGIC, BUNDLE_VERSION, header, arrays)
    logging.debug(f"Wrote bundle with {len(bundle.environments)} environments to {path}")


def _parse_count(text: str, header_line: HeaderLine) -> int:
    if not text.isdigit():
        raise ParseError(f"expected a sample count, found '{text}'", line=header_line.number)
    return int(text)


def _parse_task(header_line: HeaderLine) -> TaskSpec:
    pairs = parse_key_values(header_line, 'task')
    try:
        return TaskSpec(require(pairs, 'kind', header_line), _parse_count(require(pairs, 'classes', header_line), header_line))
    except InputError as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"invalid task record: {e}", line=header_line.number)


def load_bundle(path: str) -> DatasetBundle:
    header, payload = read_container(path, BUNDLE_MAGIC, BUNDLE_VERSION)
    if len(header) < 5:
        raise ParseError("bundle header lacks task, generator, features or environment records", line=len(header) + 2)
    task = _parse_task(header[0])
    generator_kind = require(parse_key_values(header[1], 'generator'), 'kind', header[1])
    feature_shape = parse_shape(require(parse_key_values(header[2], 'features'), 'shape', header[2]), header[2].number)
    env_records = []
    for line in header[3:]:
        pairs = parse_key_values(line, 'env')
        role = require(pairs, 'role', line)
        if role not in ENV_ROLES:
            raise ParseError(f"environment role must be one of {ENV_ROLES}, got '{role}'", line=line.number)
        env_records.append((require(pairs, 'id', line), role, _parse_count(require(pairs, 'samples', line), line), line))
    if [role for _, role, _, _ in env_records].count('test') != 1:
        raise ParseError("bundle must hold exactly one test environment", line=header[3].number)
    importance = payload.take(feature_shape)
    train_envs, test_env = [], None
    for env_id, role, count, line in env_records:
        samples = payload.take((count,) + feature_shape)
        targets = payload.take((count,))
        if task.is_classification:
            if np.any(targets != np.round(targets)) or np.any(targets < 0) or np.any(targets >= task.n_classes):
                raise ParseError(f"environment '{env_id}' holds invalid class ids", line=line.number)
            targets = targets.astype(np.int64)
        env = EnvironmentDataset(env_id, samples, targets)
        if role == 'test':
            test_env = env
        else:
            train_envs.append(env)
    payload.finish()
    try:
        return DatasetBundle(generator_kind, task, train_envs, test_env, importance)
    except InputError as e:
        raise ParseError(f"inconsistent bundle: {e}")


def bundle_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as bundle_file:
        for chunk in iter(lambda: bundle_file.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
