import logging
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from dre_objective import MixConfig
from errors import InputError, NumericError, TrainingDivergedError, UnsupportedModelError
from loader.environment import GeneratorConfig
from loader.environment_generator import generate
from models import ModelSpec, ParameterSet
from trainer import (
    HISTORY_COLUMNS,
    HyperParams,
    TrainState,
    adam_step,
    all_methods,
    clip_gradients,
    train,
    write_history_csv,
)

QUIET = logging.getLogger('test_trainer')
QUIET.addHandler(logging.NullHandler())
QUIET.propagate = False


def small_bundle(kind='tabular_cls', **overrides):
    settings = dict(kind=kind, d_core=2, d_spur=2, d_noise=1, train_rhos=[0.9, 0.8], test_rho=-0.9, samples_per_env=40)
    settings.update(overrides)
    return generate(GeneratorConfig(**settings), 0)


def small_spec(bundle, hidden=(4,), activation='relu'):
    return ModelSpec('mlp', hidden, activation, bundle.feature_shape, bundle.task.output_dim)


class TestAdamStep(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        params = ParameterSet({'w': np.array([1.0, -2.0]), 'b': np.array([0.5])})
        grads = {'w': np.ones(2), 'b': np.ones(1)}
        updated = adam_step(params, grads, TrainState(params, 0), 0.1)
        np.testing.assert_allclose(updated['w'], [0.9, -2.1], rtol=0, atol=1e-8)
        np.testing.assert_allclose(updated['b'], [0.4], rtol=0, atol=1e-8)

    def test_zero_gradients_leave_parameters(self):
        params = ParameterSet({'w': np.array([1.0, -2.0])})
        state = TrainState(params, 0)
        updated = adam_step(params, {'w': np.zeros(2)}, state, 0.1)
        self.assertEqual(params, updated)
        self.assertEqual(1, state.step)

    def test_non_finite_gradient_names_parameter(self):
        params = ParameterSet({'w': np.zeros(2), 'b': np.zeros(1)})
        with self.assertRaises(NumericError) as context:
            adam_step(params, {'w': np.zeros(2), 'b': np.array([np.nan])}, TrainState(params, 0), 0.1)
        self.assertEqual('b', context.exception.parameter)

    def test_misshapen_gradient(self):
        params = ParameterSet({'w': np.zeros(2)})
        with self.assertRaises(InputError):
            adam_step(params, {'w': np.zeros(3)}, TrainState(params, 0), 0.1)

    def test_identical_runs(self):
        rng = np.random.default_rng(0)
        grads = [{'w': rng.normal(size=3)} for _ in range(5)]
        trajectories = []
        for _ in range(2):
            params = ParameterSet({'w': np.zeros(3)})
            state = TrainState(params, 0)
            for grad in grads:
                params = adam_step(params, grad, state, 0.01)
            trajectories.append(params)
        self.assertEqual(trajectories[0], trajectories[1])


class TestClipGradients(unittest.TestCase):
    def test_global_norm(self):
        clipped = clip_gradients({'a': np.array([3.0]), 'b': np.array([4.0])}, 1.0)
        self.assertAlmostEqual(0.6, float(clipped['a'][0]), places=15)
        self.assertAlmostEqual(0.8, float(clipped['b'][0]), places=15)

    def test_small_and_disabled(self):
        small = {'a': np.array([0.3])}
        self.assertIs(small, clip_gradients(small, 1.0))
        large = {'a': np.array([300.0])}
        self.assertIs(large, clip_gradients(large, None))


class TestHyperParams(unittest.TestCase):
    def test_invalid_values(self):
        for kwargs in ({'steps': 0}, {'learning_rate': 0.0}, {'method': 'irm'}, {'clip_norm': -1.0}, {'val_every': 0}):
            with self.assertRaises(InputError):
                HyperParams(**kwargs)

    def test_ablations_override_weights(self):
        hyper = HyperParams(mix=MixConfig(consistency_weight=2.0, sparsity_weight=0.5))
        self.assertEqual((2.0, 0.5), (hyper.effective_mix().consistency_weight, hyper.effective_mix().sparsity_weight))
        no_sparsity = hyper.with_method('dre-no-sparsity').effective_mix()
        self.assertEqual((2.0, 0.0), (no_sparsity.consistency_weight, no_sparsity.sparsity_weight))
        no_consistency = hyper.with_method('dre-no-consistency').effective_mix()
        self.assertEqual((0.0, 0.5), (no_consistency.consistency_weight, no_consistency.sparsity_weight))

    def test_methods(self):
        self.assertEqual(['erm', 'mixup', 'dre', 'dre-no-sparsity', 'dre-no-consistency'], all_methods())
        self.assertTrue(HyperParams(method='dre-no-sparsity').uses_pairs)
        self.assertFalse(HyperParams(method='mixup').uses_pairs)

    def test_with_seed_keeps_settings(self):
        hyper = HyperParams(method='mixup', steps=7, seed=1).with_seed(4)
        self.assertEqual(('mixup', 7, 4), (hyper.method, hyper.steps, hyper.seed))


class TestTrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.bundle = small_bundle()
        cls.spec = small_spec(cls.bundle)

    def run_method(self, method, **kwargs):
        settings = dict(method=method, steps=15, batch_size=8, val_every=5, seed=3)
        settings.update(kwargs)
        return train(self.bundle, self.spec, HyperParams(**settings), QUIET)

    def test_history_has_one_row_per_step(self):
        _, history = self.run_method('dre')
        self.assertEqual(15, len(history))
        self.assertEqual([5, 10, 15], [step for step, _ in history.validations()])
        self.assertEqual(HISTORY_COLUMNS, history.frame().columns.tolist())

    def test_bit_reproducible(self):
        first_model, first_history = self.run_method('dre')
        second_model, second_history = self.run_method('dre')
        self.assertEqual(first_model.params, second_model.params)
        pd.testing.assert_frame_equal(first_history.frame(), second_history.frame())

    def test_zero_weight_dre_follows_erm(self):
        erm_model, erm_history = self.run_method('erm', val_every=100)
        dre_model, dre_history = self.run_method('dre', val_every=100, mix=MixConfig(consistency_weight=0.0, sparsity_weight=0.0))
        self.assertEqual(erm_model.params, dre_model.params)
        self.assertEqual(erm_history.frame()['total'].tolist(), dre_history.frame()['total'].tolist())
        self.assertEqual(erm_history.frame()['task'].tolist(), dre_history.frame()['task'].tolist())

    def test_erm_history_has_zero_regularizers(self):
        _, history = self.run_method('erm')
        frame = history.frame()
        self.assertEqual([0.0] * 15, frame['consistency'].tolist())
        self.assertEqual([0.0] * 15, frame['sparsity'].tolist())
        self.assertEqual(frame['task'].tolist(), frame['total'].tolist())

    def test_selection_is_never_worse_than_final(self):
        for method in ('erm', 'mixup', 'dre'):
            _, history = self.run_method(method)
            final_metric = history.validations()[-1][1]
            self.assertGreaterEqual(history.selected_metric, final_metric, method)
            self.assertIn(history.selected_step, [5, 10, 15])

    def test_divergence_reports_step(self):
        with self.assertRaises(TrainingDivergedError) as context:
            with np.errstate(over='ignore', invalid='ignore'):
                self.run_method('erm', learning_rate=1e308, clip_norm=None)
        self.assertGreaterEqual(context.exception.step, 1)

    def test_incompatible_model(self):
        with self.assertRaises(InputError):
            train(self.bundle, ModelSpec('mlp', [4], 'relu', [3], 2), HyperParams(steps=1), QUIET)

    def test_grad_cam_needs_conv_model(self):
        with self.assertRaises(UnsupportedModelError):
            train(self.bundle, self.spec, HyperParams(steps=1, explainer='grad_cam'), QUIET)

    def test_regression(self):
        bundle = small_bundle('tabular_reg')
        model, history = train(bundle, small_spec(bundle, activation='softplus'), HyperParams(steps=10, batch_size=8, val_every=5), QUIET)
        self.assertEqual(1, model.spec.output_dim)
        self.assertTrue(np.all(np.isfinite(history.frame()['total'])))

    def test_images_through_grad_cam(self):
        bundle = small_bundle('tiny_image_cls', image_size=8, samples_per_env=12)
        spec = ModelSpec('cnn', [2], 'softplus', bundle.feature_shape, bundle.task.output_dim)
        _, history = train(bundle, spec, HyperParams(steps=3, batch_size=4, val_every=3, explainer='grad_cam'), QUIET)
        self.assertEqual(3, len(history))
        self.assertTrue(np.all(np.isfinite(history.frame()['consistency'])))

    def test_kl_over_rectified_grad_cam_maps(self):
        bundle = small_bundle('tiny_image_cls', image_size=8, samples_per_env=24)
        spec = ModelSpec('cnn', [4, 4], 'relu', bundle.feature_shape, bundle.task.output_dim)
        hyper = HyperParams(steps=30, batch_size=4, val_every=10, explainer='grad_cam', mix=MixConfig(discrepancy='kl'))
        _, history = train(bundle, spec, hyper, QUIET)
        self.assertEqual(30, len(history))
        self.assertTrue(np.all(np.isfinite(history.frame()['consistency'])))
        self.assertGreaterEqual(history.degenerate_pairs, 0)

    def test_history_csv(self):
        _, history = self.run_method('mixup', steps=5)
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'history.csv')
            write_history_csv(history, path)
            frame = pd.read_csv(path, float_precision='round_trip')
        self.assertEqual(HISTORY_COLUMNS, frame.columns.tolist())
        self.assertEqual(history.frame()['total'].tolist(), frame['total'].tolist())


if __name__ == '__main__':
    unittest.main()
