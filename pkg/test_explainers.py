import os
import tempfile
import unittest

import numpy as np
import pandas as pd
from scipy.signal import correlate2d

from autodiff import GraphBuilder, finite_difference_check
from errors import InputError, UnsupportedModelError
from explainers import (
    Attribution,
    append_explanation,
    dump_attribution_csv,
    dump_attribution_pgm,
    explain_batch,
    grad_cam,
    input_gradient,
    rank_features,
)
from models import Model, ModelSpec, ParameterSet, build_model, declare_parameters, forward


def linear_model(weight) -> Model:
    weight = np.asarray(weight, dtype=np.float64)
    spec = ModelSpec('linear', [], 'relu', [weight.shape[0]], weight.shape[1])
    return Model(spec, ParameterSet({'head.weight': weight, 'head.bias': np.zeros(weight.shape[1])}))


def reference_grad_cam(model: Model, x: np.ndarray, target: int) -> np.ndarray:
    """Grad-CAM of a conv-GAP-linear network written out by hand."""
    hidden = x
    for index, channels in enumerate(model.spec.hidden):
        weight = model.params[f"conv{index}.weight"]
        bias = model.params[f"conv{index}.bias"]
        output = np.stack([
            bias[k] + sum(correlate2d(hidden[c], weight[k, c], mode='same') for c in range(hidden.shape[0]))
            for k in range(channels)
        ])
        hidden = np.maximum(output, 0.0)
    height, width = hidden.shape[1:]
    # the logit is linear in the pooled activations
    channel_weights = model.params['head.weight'][:, target] / (height * width)
    return np.maximum(np.tensordot(channel_weights, hidden, axes=1), 0.0)


class TestInputGradient(unittest.TestCase):
    def test_linear_model_attribution_is_weight_column(self):
        model = linear_model([[3.0, -1.0], [1.0, 2.0], [0.5, 0.0]])
        for x in ([0.0, 0.0, 0.0], [4.0, -2.0, 1.0]):
            attribution = input_gradient(model, np.array(x), target=1)
            self.assertEqual([-1.0, 2.0, 0.0], attribution.values.tolist())
            self.assertEqual(1, attribution.target)
            self.assertEqual('input_gradient', attribution.method)

    def test_default_target_is_predicted_class(self):
        model = linear_model([[1.0, -1.0], [0.0, 0.0]])
        self.assertEqual(0, input_gradient(model, np.array([2.0, 0.0])).target)
        self.assertEqual(1, input_gradient(model, np.array([-2.0, 0.0])).target)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        model = build_model(ModelSpec('mlp', [6, 5], 'softplus', [4], 3), 1)
        step = 1e-5
        for _ in range(10):
            x = rng.normal(size=4)
            attribution = input_gradient(model, x, target=2)
            numeric = np.zeros(4)
            for index in range(4):
                shift = np.zeros(4)
                shift[index] = step
                numeric[index] = (forward(model, x + shift)[2] - forward(model, x - shift)[2]) / (2 * step)
            np.testing.assert_allclose(attribution.values, numeric, rtol=1e-5, atol=1e-9)

    def test_invalid_target(self):
        model = linear_model([[1.0, 0.0], [0.0, 1.0]])
        with self.assertRaises(InputError):
            input_gradient(model, np.zeros(2), target=2)

    def test_batch_rows_are_independent(self):
        model = build_model(ModelSpec('mlp', [5], 'relu', [3], 2), 2)
        x = np.random.default_rng(2).normal(size=(4, 3))
        batch = explain_batch(model, x, 'input_gradient', np.array([0, 1, 1, 0]))
        for index, target in enumerate([0, 1, 1, 0]):
            np.testing.assert_allclose(batch[index], input_gradient(model, x[index], target).values, rtol=1e-14, atol=1e-15)

    def test_is_deterministic(self):
        model = build_model(ModelSpec('mlp', [5], 'relu', [3], 2), 3)
        x = np.array([0.3, -1.2, 0.8])
        self.assertEqual(input_gradient(model, x, 0).values.tobytes(), input_gradient(model, x, 0).values.tobytes())

    def test_parameter_gradient_of_attribution_norm(self):
        spec = ModelSpec('mlp', [5], 'softplus', [3], 2)
        model = build_model(spec, 4)
        rng = np.random.default_rng(4)
        builder = GraphBuilder()
        x = builder.input('x', (6, 3))
        targets = builder.input('targets', (6, 2))
        parameters = declare_parameters(builder, spec)
        attribution, _ = append_explanation(builder, spec, x, targets, parameters, 'input_gradient')
        builder.output('norm', builder.sum(builder.abs(attribution)))
        bindings = model.params.as_dict()
        bindings['x'] = rng.normal(size=(6, 3))
        bindings['targets'] = np.eye(2)[[0, 1, 0, 1, 1, 0]]
        report = finite_difference_check(builder.freeze(), 'norm', list(parameters), 1e-5, bindings)
        self.assertLess(report.max_relative_error, 1e-4)


class TestGradCam(unittest.TestCase):
    def test_rejects_dense_models(self):
        model = build_model(ModelSpec('mlp', [4], 'relu', [3], 2), 0)
        with self.assertRaises(UnsupportedModelError):
            grad_cam(model, np.zeros(3))

    def test_zero_head_gives_zero_map(self):
        model = build_model(ModelSpec('cnn', [3], 'relu', [2, 6, 6], 2), 0)
        params = model.params.as_dict()
        params['head.weight'] = np.zeros_like(params['head.weight'])
        attribution = grad_cam(model.with_params(ParameterSet(params)), np.random.default_rng(0).normal(size=(2, 6, 6)), 0)
        self.assertEqual(0.0, float(np.abs(attribution.values).max()))

    def test_map_follows_bright_patch(self):
        spec = ModelSpec('cnn', [1], 'relu', [1, 8, 8], 1, kernel_size=1)
        params = {
            'conv0.weight': np.ones((1, 1, 1, 1)), 'conv0.bias': np.zeros(1),
            'head.weight': np.ones((1, 1)), 'head.bias': np.zeros(1),
        }
        image = np.zeros((1, 8, 8))
        image[0, 2:5, 3:6] = 1.0
        attribution = grad_cam(Model(spec, ParameterSet(params)), image, 0)
        self.assertEqual((8, 8), attribution.values.shape)
        self.assertEqual((image[0] > 0).tolist(), (attribution.values > 0).tolist())

    def test_matches_reference_implementation(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            model = build_model(ModelSpec('cnn', [3, 4], 'relu', [2, 6, 6], 3), seed)
            x = rng.normal(size=(2, 6, 6))
            for target in range(3):
                attribution = grad_cam(model, x, target)
                np.testing.assert_allclose(attribution.values, reference_grad_cam(model, x, target), rtol=0, atol=1e-10)

    def test_map_is_nonnegative(self):
        model = build_model(ModelSpec('cnn', [4], 'softplus', [2, 8, 8], 2), 3)
        maps = explain_batch(model, np.random.default_rng(3).normal(size=(5, 2, 8, 8)), 'grad_cam')
        self.assertEqual((5, 8, 8), maps.shape)
        self.assertTrue(np.all(maps >= 0.0))

    def test_detached_weights_keep_forward_values(self):
        model = build_model(ModelSpec('cnn', [3], 'relu', [2, 6, 6], 2), 5)
        x = np.random.default_rng(5).normal(size=(2, 6, 6))
        self.assertEqual(grad_cam(model, x, 1).values.tobytes(), grad_cam(model, x, 1, detach_weights=True).values.tobytes())


class TestRankFeatures(unittest.TestCase):
    def test_descending_magnitude(self):
        ranking = rank_features(Attribution(np.array([0.1, -0.5, 0.3]), 'input_gradient', 0))
        self.assertEqual([1, 2, 0], ranking.order.tolist())

    def test_ties_keep_index_order(self):
        self.assertEqual([0, 1, 2, 3], rank_features(np.full(4, 0.2)).order.tolist())
        self.assertEqual([1, 0, 2], rank_features(np.array([0.5, -0.7, -0.5])).order.tolist())

    def test_pairwise_order(self):
        values = np.random.default_rng(8).normal(size=30).round(1)
        order = rank_features(values).order.tolist()
        self.assertEqual(list(range(30)), sorted(order))
        for earlier in range(30):
            for later in range(earlier + 1, 30):
                first, second = order[earlier], order[later]
                self.assertTrue(
                    abs(values[first]) > abs(values[second]) or (abs(values[first]) == abs(values[second]) and first < second)
                )

    def test_images_rank_flattened_positions(self):
        self.assertEqual([3, 0, 1, 2], rank_features(np.array([[0.5, 0.1], [0.0, -2.0]])).order.tolist())


class TestAttributionDumps(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def test_tabular_csv(self):
        path = os.path.join(self.directory.name, 'attr.csv')
        dump_attribution_csv(Attribution(np.array([0.25, -1.0, 1e-17]), 'input_gradient', 0), path)
        frame = pd.read_csv(path, float_precision='round_trip')
        self.assertEqual(['feature', 'value'], frame.columns.tolist())
        self.assertEqual([0.25, -1.0, 1e-17], frame['value'].tolist())

    def test_image_csv(self):
        path = os.path.join(self.directory.name, 'attr.csv')
        dump_attribution_csv(Attribution(np.arange(6.0).reshape(2, 3), 'grad_cam', 1), path)
        frame = pd.read_csv(path, float_precision='round_trip')
        self.assertEqual(['row', 'col0', 'col1', 'col2'], frame.columns.tolist())
        self.assertEqual([3.0, 4.0, 5.0], frame.iloc[1, 1:].tolist())

    def test_pgm_scaling(self):
        path = os.path.join(self.directory.name, 'attr.pgm')
        dump_attribution_pgm(Attribution(np.array([[0.0, 1.0, 2.0, 4.0], [4.0, 4.0, 4.0, 4.0], [0.0, 0.0, 0.0, 0.0]]), 'grad_cam', 0), path)
        with open(path, 'rb') as image:
            content = image.read()
        header = b'P5\n4 3\n255\n'
        self.assertEqual(header, content[:len(header)])
        pixels = list(content[len(header):])
        self.assertEqual(12, len(pixels))
        self.assertEqual([0, 64, 128, 255], pixels[:4])

    def test_pgm_puts_channels_side_by_side(self):
        path = os.path.join(self.directory.name, 'attr.pgm')
        dump_attribution_pgm(Attribution(np.ones((2, 3, 3)), 'input_gradient', 0), path)
        with open(path, 'rb') as image:
            self.assertTrue(image.read().startswith(b'P5\n6 3\n255\n'))

    def test_pgm_rejects_vectors(self):
        with self.assertRaises(InputError):
            dump_attribution_pgm(Attribution(np.ones(3), 'input_gradient', 0), os.path.join(self.directory.name, 'x.pgm'))


if __name__ == '__main__':
    unittest.main()
