import os
import tempfile
import unittest

import numpy as np
from scipy.signal import correlate2d
from scipy.special import softmax

from errors import InputError, ParseError, VersionError
from models import (
    Model,
    ModelSpec,
    ParameterSet,
    build_model,
    forward,
    load_model,
    parameter_shapes,
    predict_classes,
    save_model,
)


def dense_forward(model: Model, x: np.ndarray) -> np.ndarray:
    hidden = x
    for index in range(len(model.spec.hidden)):
        affine = hidden @ model.params[f"layer{index}.weight"] + model.params[f"layer{index}.bias"]
        hidden = np.maximum(affine, 0.0) if model.spec.activation == 'relu' else np.logaddexp(0.0, affine)
    return hidden @ model.params['head.weight'] + model.params['head.bias']


def conv_forward(model: Model, x: np.ndarray) -> np.ndarray:
    hidden = x
    for index, channels in enumerate(model.spec.hidden):
        weight = model.params[f"conv{index}.weight"]
        bias = model.params[f"conv{index}.bias"]
        output = np.zeros((hidden.shape[0], channels) + hidden.shape[2:])
        for n in range(hidden.shape[0]):
            for k in range(channels):
                output[n, k] = bias[k] + sum(correlate2d(hidden[n, c], weight[k, c], mode='same') for c in range(hidden.shape[1]))
        hidden = np.maximum(output, 0.0)
    return hidden.mean(axis=(2, 3)) @ model.params['head.weight'] + model.params['head.bias']


class TestModelSpec(unittest.TestCase):
    def test_invalid_kind(self):
        with self.assertRaises(InputError):
            ModelSpec('rnn', [4], 'relu', [3], 2)

    def test_invalid_activation(self):
        with self.assertRaises(InputError):
            ModelSpec('mlp', [4], 'tanh', [3], 2)

    def test_output_dimension_must_be_positive(self):
        with self.assertRaises(InputError):
            ModelSpec('mlp', [4], 'relu', [3], 0)

    def test_cnn_needs_conv_layer(self):
        with self.assertRaises(InputError):
            ModelSpec('cnn', [], 'relu', [2, 8, 8], 2)

    def test_cnn_needs_image_input(self):
        with self.assertRaises(InputError):
            ModelSpec('cnn', [4], 'relu', [8], 2)

    def test_linear_model_has_only_a_head(self):
        spec = ModelSpec('linear', [], 'relu', [3], 1)
        self.assertEqual([('head.weight', (3, 1)), ('head.bias', (1,))], parameter_shapes(spec))

    def test_hidden_layers_match_kind(self):
        with self.assertRaises(InputError):
            ModelSpec('mlp', [], 'relu', [3], 2)
        with self.assertRaises(InputError):
            ModelSpec('linear', [4], 'relu', [3], 2)
        with self.assertRaises(InputError):
            ModelSpec('linear', [], 'relu', [2, 8, 8], 2)

    def test_equality(self):
        self.assertEqual(ModelSpec('mlp', [4, 8], 'relu', [3], 2), ModelSpec('mlp', (4, 8), 'relu', (3,), 2))
        self.assertNotEqual(ModelSpec('mlp', [4, 8], 'relu', [3], 2), ModelSpec('mlp', [4, 8], 'softplus', [3], 2))


class TestBuildModel(unittest.TestCase):
    def test_same_seed_gives_identical_parameters(self):
        spec = ModelSpec('mlp', [8], 'relu', [4], 2)
        self.assertEqual(build_model(spec, 0).params, build_model(spec, 0).params)
        self.assertNotEqual(build_model(spec, 0).params, build_model(spec, 1).params)

    def test_cnn_head_shape(self):
        model = build_model(ModelSpec('cnn', [4, 6], 'relu', [2, 8, 8], 3), 0)
        self.assertEqual((6, 3), model.params['head.weight'].shape)
        self.assertEqual((6, 4, 3, 3), model.params['conv1.weight'].shape)

    def test_weights_within_fan_in_bound(self):
        model = build_model(ModelSpec('cnn', [4, 6], 'relu', [2, 8, 8], 3), 7)
        bounds = {
            'conv0.weight': np.sqrt(6.0 / (2 * 9)), 'conv1.weight': np.sqrt(6.0 / (4 * 9)), 'head.weight': np.sqrt(6.0 / 6),
        }
        for name, bound in bounds.items():
            self.assertTrue(np.all(np.abs(model.params[name]) <= bound), name)
        self.assertEqual(0.0, float(np.abs(model.params['conv0.bias']).max()))

    def test_mismatched_parameters_are_rejected(self):
        spec = ModelSpec('linear', [], 'relu', [3], 1)
        with self.assertRaises(InputError):
            Model(spec, ParameterSet({'head.weight': np.zeros((2, 1)), 'head.bias': np.zeros(1)}))

    def test_non_finite_parameters_are_rejected(self):
        spec = ModelSpec('linear', [], 'relu', [2], 1)
        with self.assertRaises(InputError):
            Model(spec, ParameterSet({'head.weight': [[np.nan], [1.0]], 'head.bias': [0.0]}))


class TestForward(unittest.TestCase):
    def test_zero_parameters_give_zero_logits(self):
        spec = ModelSpec('mlp', [5], 'softplus', [3], 2)
        params = ParameterSet({name: np.zeros(shape) for name, shape in parameter_shapes(spec)})
        logits = forward(Model(spec, params), np.random.default_rng(0).normal(size=(4, 3)))
        self.assertEqual([[0.0, 0.0]] * 4, logits.tolist())

    def test_identity_linear_layer(self):
        spec = ModelSpec('linear', [], 'relu', [3], 3)
        model = Model(spec, ParameterSet({'head.weight': np.eye(3), 'head.bias': np.zeros(3)}))
        x = np.array([[1.5, -2.0, 0.25], [0.0, 3.0, -1.0]])
        self.assertEqual(x.tolist(), forward(model, x).tolist())

    def test_single_sample_and_batch(self):
        model = build_model(ModelSpec('mlp', [6], 'relu', [4], 2), 3)
        x = np.random.default_rng(1).normal(size=(3, 4))
        self.assertEqual((2,), forward(model, x[0]).shape)
        self.assertEqual((3, 2), forward(model, x).shape)

    def test_batch_consistency(self):
        model = build_model(ModelSpec('mlp', [6, 5], 'softplus', [4], 3), 2)
        x = np.random.default_rng(2).normal(size=(2, 4))
        stacked = forward(model, x)
        # row and batch products may take different BLAS kernels
        np.testing.assert_allclose(stacked[0], forward(model, x[0]), rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(stacked[1], forward(model, x[1]), rtol=1e-14, atol=1e-15)

    def test_mlp_matches_dense_reference(self):
        for activation in ('relu', 'softplus'):
            model = build_model(ModelSpec('mlp', [7, 4], activation, [5], 3), 4)
            x = np.random.default_rng(4).normal(size=(6, 5))
            np.testing.assert_allclose(forward(model, x), dense_forward(model, x), rtol=1e-12, atol=1e-12)

    def test_cnn_matches_correlation_reference(self):
        model = build_model(ModelSpec('cnn', [3, 4], 'relu', [2, 6, 6], 2), 5)
        x = np.random.default_rng(5).normal(size=(2, 2, 6, 6))
        np.testing.assert_allclose(forward(model, x), conv_forward(model, x), rtol=1e-12, atol=1e-12)

    def test_softmax_is_translation_invariant(self):
        model = build_model(ModelSpec('mlp', [4], 'relu', [3], 3), 6)
        x = np.random.default_rng(6).normal(size=(5, 3))
        shifted = model.params.as_dict()
        shifted['head.bias'] = shifted['head.bias'] + 2.5
        logits = forward(model, x)
        shifted_logits = forward(model.with_params(ParameterSet(shifted)), x)
        self.assertFalse(np.array_equal(logits, shifted_logits))
        np.testing.assert_allclose(softmax(logits, axis=1), softmax(shifted_logits, axis=1), rtol=1e-12, atol=1e-15)

    def test_wrong_input_shape(self):
        model = build_model(ModelSpec('mlp', [4], 'relu', [3], 2), 0)
        with self.assertRaises(InputError):
            forward(model, np.zeros((2, 4)))

    def test_predict_classes(self):
        spec = ModelSpec('linear', [], 'relu', [2], 2)
        model = Model(spec, ParameterSet({'head.weight': np.eye(2), 'head.bias': np.zeros(2)}))
        self.assertEqual([1, 0], predict_classes(model, np.array([[0.0, 1.0], [2.0, -1.0]])).tolist())


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, 'model.params')

    def tearDown(self):
        self.directory.cleanup()

    def test_round_trip(self):
        for spec in (ModelSpec('mlp', [6, 3], 'softplus', [4], 2), ModelSpec('cnn', [2], 'relu', [2, 8, 8], 3, 5)):
            model = build_model(spec, 9)
            save_model(model, self.path)
            restored = load_model(self.path)
            self.assertEqual(model.spec, restored.spec)
            self.assertEqual(model.params, restored.params)

    def test_linear_model_header(self):
        model = Model(ModelSpec('linear', [], 'relu', [2], 1), ParameterSet({'head.weight': [[3.0], [1.0]], 'head.bias': [0.0]}))
        save_model(model, self.path)
        with open(self.path, 'rb') as checkpoint:
            header = checkpoint.read().split(b'\nend\n')[0].decode('utf-8')
        self.assertIn('kind=linear hidden=none', header)
        self.assertEqual(model.params, load_model(self.path).params)

    def test_truncated_payload(self):
        save_model(build_model(ModelSpec('mlp', [4], 'relu', [3], 2), 0), self.path)
        with open(self.path, 'rb') as checkpoint:
            content = checkpoint.read()
        with open(self.path, 'wb') as checkpoint:
            checkpoint.write(content[:-5])
        with self.assertRaises(ParseError) as context:
            load_model(self.path)
        self.assertIsNotNone(context.exception.offset)

    def test_version_mismatch(self):
        save_model(build_model(ModelSpec('mlp', [4], 'relu', [3], 2), 0), self.path)
        with open(self.path, 'rb') as checkpoint:
            lines = checkpoint.read().split(b'\n', 1)
        magic = lines[0].split(b' ')[0]
        with open(self.path, 'wb') as checkpoint:
            checkpoint.write(magic + b' 999\n' + lines[1])
        with self.assertRaises(VersionError):
            load_model(self.path)

    def test_missing_file(self):
        with self.assertRaises(InputError):
            load_model(os.path.join(self.directory.name, 'absent.params'))


if __name__ == '__main__':
    unittest.main()
