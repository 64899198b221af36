import contextlib
import io
import logging
import os
import tempfile
import unittest

import pandas as pd
import yaml

from const import EXIT_INPUT_ERROR, EXIT_OK
from logger import create_logger
from main import main

SMALL_CONFIG = {
    'generator': {'kind': 'tabular_cls', 'd_core': 2, 'd_spur': 2, 'd_noise': 1, 'train_rhos': [0.9, 0.8], 'test_rho': -0.9, 'samples_per_env': 40},
    'model': {'kind': 'mlp', 'hidden': [4], 'activation': 'softplus'},
    'hyper': {'steps': 6, 'batch_size': 8, 'val_every': 3},
    'metrics': {'n_dec_pairs': 5, 'iauc_samples': 3, 'iauc_steps': 5, 'sc_samples': 10, 'dump_samples': 1},
    'seeds': [0],
    'methods': ['erm', 'dre'],
}


class TestMain(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.log_file = os.path.join(self.directory.name, 'drelab.log')

    def tearDown(self):
        create_logger(None, logging.CRITICAL)
        self.directory.cleanup()

    def path(self, *parts):
        return os.path.join(self.directory.name, *parts)

    def write_config(self, name='run.yaml', **changes):
        raw = dict(SMALL_CONFIG, output_dir=self.path('out'))
        raw.update(changes)
        with open(self.path(name), 'w', encoding='utf-8') as config_file:
            yaml.safe_dump(raw, config_file)
        return self.path(name)

    def run_main(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            code = main(['--log-file', self.log_file, *argv])
        return code, stdout.getvalue(), stderr.getvalue()

    def generate(self, config, name='bundle.bin'):
        code, stdout, _ = self.run_main('generate', '--config', config, '--output', self.path(name))
        self.assertEqual(EXIT_OK, code)
        return self.path(name), stdout.strip().splitlines()[-1]

    def read_bytes(self, path):
        with open(path, 'rb') as artifact:
            return artifact.read()

    def test_generate_prints_stable_hash(self):
        config = self.write_config()
        first_path, first = self.generate(config, 'first.bin')
        _, second = self.generate(config, 'second.bin')
        self.assertEqual(64, len(first))
        self.assertEqual(first, second)
        self.assertTrue(os.path.exists(first_path))

    def test_generate_seed_changes_bundle(self):
        config = self.write_config()
        _, first = self.generate(config)
        code, stdout, _ = self.run_main('generate', '--config', config, '--output', self.path('other.bin'), '--seed', '5')
        self.assertEqual(EXIT_OK, code)
        self.assertNotEqual(first, stdout.strip().splitlines()[-1])

    def test_missing_config_field(self):
        generator = dict(SMALL_CONFIG['generator'])
        del generator['kind']
        code, _, stderr = self.run_main('generate', '--config', self.write_config(generator=generator))
        self.assertEqual(EXIT_INPUT_ERROR, code)
        self.assertIn('generator.kind', stderr)
        with open(self.log_file, encoding='utf-8') as log:
            self.assertIn('generator.kind', log.read())

    def test_train_writes_checkpoint_and_history(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        code, _, _ = self.run_main('train', '--bundle', bundle, '--config', config, '--method', 'erm')
        self.assertEqual(EXIT_OK, code)
        self.assertTrue(os.path.exists(self.path('out', 'checkpoint_erm_test_s0.params')))
        history = pd.read_csv(self.path('out', 'history_erm_test_s0.csv'))
        self.assertEqual(['step', 'task', 'consistency', 'sparsity', 'total', 'val_metric'], history.columns.tolist())
        self.assertEqual([0.0] * 6, history['consistency'].tolist())
        self.assertEqual([0.0] * 6, history['sparsity'].tolist())

    def test_train_and_eval_record_the_resolved_config(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        code, _, _ = self.run_main('train', '--bundle', bundle, '--config', config, '--method', 'erm', '--seed', '3')
        self.assertEqual(EXIT_OK, code)
        with open(self.path('out', 'run_config_erm_test_s3.yaml'), encoding='utf-8') as resolved_file:
            resolved = yaml.safe_load(resolved_file)
        self.assertEqual(3, resolved['seed'])
        self.assertEqual('erm', resolved['hyper']['method'])
        self.assertEqual(1.0, resolved['generator']['env_shift'])
        code, _, _ = self.run_main(
            'eval', '--checkpoint', self.path('out', 'checkpoint_erm_test_s3.params'), '--bundle', bundle, '--config', config,
            '--seed', '3', '--method', 'erm', '--output-dir', self.path('evaluated'),
        )
        self.assertEqual(EXIT_OK, code)
        self.assertTrue(os.path.exists(self.path('evaluated', 'run_config_erm_test_s3.yaml')))

    def test_eval_is_reproducible(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        self.assertEqual(EXIT_OK, self.run_main('train', '--bundle', bundle, '--config', config)[0])
        checkpoint = self.path('out', 'checkpoint_dre_test_s0.params')
        for output in ('first', 'second'):
            code, _, _ = self.run_main('eval', '--checkpoint', checkpoint, '--bundle', bundle, '--config', config, '--output-dir', self.path(output))
            self.assertEqual(EXIT_OK, code)
        first = self.read_bytes(self.path('first', 'metrics_dre_test_s0.csv'))
        self.assertEqual(first, self.read_bytes(self.path('second', 'metrics_dre_test_s0.csv')))
        self.assertTrue(os.path.exists(self.path('first', 'curve_dre_test_s0.csv')))
        metrics = pd.read_csv(self.path('first', 'metrics_dre_test_s0.csv'))
        self.assertEqual(['test'], metrics['test_env'].tolist())

    def test_eval_rejects_incompatible_bundle(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        self.assertEqual(EXIT_OK, self.run_main('train', '--bundle', bundle, '--config', config, '--method', 'erm')[0])
        wider = self.write_config('wider.yaml', generator=dict(SMALL_CONFIG['generator'], d_noise=3))
        other_bundle, _ = self.generate(wider, 'wider.bin')
        code, _, stderr = self.run_main(
            'eval', '--checkpoint', self.path('out', 'checkpoint_erm_test_s0.params'), '--bundle', other_bundle, '--config', config,
        )
        self.assertEqual(EXIT_INPUT_ERROR, code)
        self.assertIn('does not fit', stderr)

    def test_explain_writes_attribution(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        self.assertEqual(EXIT_OK, self.run_main('train', '--bundle', bundle, '--config', config, '--method', 'erm')[0])
        code, _, _ = self.run_main(
            'explain', '--checkpoint', self.path('out', 'checkpoint_erm_test_s0.params'), '--bundle', bundle,
            '--env', 'env1', '--index', '3', '--output-dir', self.path('explained'),
        )
        self.assertEqual(EXIT_OK, code)
        attribution = pd.read_csv(self.path('explained', 'attr_model_env1_s0_i3.csv'))
        self.assertEqual(list(range(5)), attribution['feature'].tolist())

    def test_explain_rejects_bad_index(self):
        config = self.write_config()
        bundle, _ = self.generate(config)
        self.assertEqual(EXIT_OK, self.run_main('train', '--bundle', bundle, '--config', config, '--method', 'erm')[0])
        code, _, _ = self.run_main('explain', '--checkpoint', self.path('out', 'checkpoint_erm_test_s0.params'), '--bundle', bundle, '--index', '400')
        self.assertEqual(EXIT_INPUT_ERROR, code)

    def test_benchmark_is_deterministic(self):
        config = self.write_config()
        for output in ('first', 'second'):
            code, _, _ = self.run_main('benchmark', '--config', config, '--output-dir', self.path(output))
            self.assertEqual(EXIT_OK, code)
        first = self.read_bytes(self.path('first', 'metrics.csv'))
        self.assertEqual(first, self.read_bytes(self.path('second', 'metrics.csv')))
        metrics = pd.read_csv(self.path('first', 'metrics.csv'))
        self.assertEqual(6, len(metrics))
        self.assertEqual({'env0', 'env1', 'test'}, set(metrics['test_env']))
        erm = metrics[metrics['method'] == 'erm']
        for test_env in ('env0', 'env1', 'test'):
            self.assertAlmostEqual(1.0, erm[erm['test_env'] == test_env]['dec_relative'].mean(), places=12)
        for name in ('summary.csv', 'summary.txt', 'run_config.yaml', 'history_dre_env1_s0.csv'):
            self.assertTrue(os.path.exists(self.path('first', name)), name)

    def test_benchmark_on_held_out_environment(self):
        config = self.write_config(methods=['erm', 'mixup'])
        code, _, _ = self.run_main('benchmark', '--config', config, '--rotation', 'held_out', '--output-dir', self.path('held'))
        self.assertEqual(EXIT_OK, code)
        metrics = pd.read_csv(self.path('held', 'metrics.csv'))
        self.assertEqual(['erm', 'mixup'], metrics['method'].tolist())
        self.assertEqual(['test', 'test'], metrics['test_env'].tolist())


if __name__ == '__main__':
    unittest.main()
