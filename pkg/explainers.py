from typing import Optional

import numpy as np
import pandas as pd

from autodiff import ComputeGraph, GraphBuilder, append_gradients, evaluate
from const import EXPLAINERS
from errors import InputError, UnsupportedModelError
from models import (
    ForwardTrace,
    Model,
    ModelSpec,
    build_forward,
    declare_parameters,
    forward,
    predict_classes,
)


class Attribution:
    values: np.ndarray
    method: str
    target: int

    def __init__(self, values: np.ndarray, method: str, target: int):
        self.values = values
        self.method = method
        self.target = target


class FeatureRanking:
    order: np.ndarray

    def __init__(self, order: np.ndarray):
        self.order = order

    def __len__(self):
        return len(self.order)


def check_explainer(spec: ModelSpec, method: str):
    if method not in EXPLAINERS:
        raise InputError(f"explainer must be one of {EXPLAINERS}, got '{method}'")
    if method == 'grad_cam' and spec.kind != 'cnn':
        raise UnsupportedModelError(f"grad_cam needs a cnn with a last conv layer, model is '{spec.kind}'")


def attribution_shape(spec: ModelSpec, method: str) -> tuple[int, ...]:
    return spec.input_shape if method == 'input_gradient' else spec.input_shape[1:]


def explained_scalar(builder: GraphBuilder, trace: ForwardTrace, targets: int) -> int:
    return builder.sum(builder.mul(trace.logits, targets))


def append_explanation(
        builder: GraphBuilder,
        spec: ModelSpec,
        x: int,
        targets: int,
        parameters: dict[str, int],
        method: str,
        detach_cam_weights: bool = False,
) -> tuple[int, ForwardTrace]:
    """Append g(x) for a batch; ``targets`` selects the explained output of every row.

    Rows do not interact, so differentiating the summed selected outputs yields per-row
    explanations.
    """
    check_explainer(spec, method)
    trace = build_forward(builder, spec, x, parameters)
    scalar = explained_scalar(builder, trace, targets)
    if method == 'input_gradient':
        return append_gradients(builder, scalar, [x])[x], trace
    activations = trace.last_conv
    batch, channels, height, width = builder.shape_of(activations)
    weights = builder.global_avg_pool(append_gradients(builder, scalar, [activations])[activations])
    if detach_cam_weights:
        weights = builder.stop_gradient(weights)
    weighted = builder.mul(builder.reshape(weights, (batch, channels, 1, 1)), activations)
    cam = builder.relu(builder.sum(weighted, axes=1, keepdims=True))
    factor = spec.input_shape[1] // height
    upsampled = builder.upsample(cam, factor)
    return builder.reshape(upsampled, (batch,) + spec.input_shape[1:]), trace


_explanation_graphs: dict[tuple, ComputeGraph] = {}


def explanation_graph(spec: ModelSpec, batch_size: int, method: str, detach_cam_weights: bool = False) -> ComputeGraph:
    key = (spec, batch_size, method, detach_cam_weights)
    if key not in _explanation_graphs:
        builder = GraphBuilder()
        x = builder.input('x', (batch_size,) + spec.input_shape)
        targets = builder.input('targets', (batch_size, spec.output_dim))
        attribution, trace = append_explanation(builder, spec, x, targets, declare_parameters(builder, spec), method, detach_cam_weights)
        builder.output('attribution', attribution)
        builder.output('logits', trace.logits)
        _explanation_graphs[key] = builder.freeze()
    return _explanation_graphs[key]


def target_matrix(spec: ModelSpec, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= spec.output_dim):
        raise InputError(f"explained output index out of range for output dimension {spec.output_dim}")
    matrix = np.zeros((len(targets), spec.output_dim))
    matrix[np.arange(len(targets)), targets] = 1.0
    return matrix


def explain_batch(model: Model, x: np.ndarray, method: str, targets: Optional[np.ndarray] = None, detach_cam_weights: bool = False) -> np.ndarray:
    check_explainer(model.spec, method)
    x = np.asarray(x, dtype=np.float64)
    if targets is None:
        targets = predict_classes(model, x)
    bindings = model.params.as_dict()
    bindings['x'] = x
    bindings['targets'] = target_matrix(model.spec, targets)
    graph = explanation_graph(model.spec, x.shape[0], method, detach_cam_weights)
    return evaluate(graph, bindings, ['attribution'])['attribution']


def _explain_one(model: Model, x: np.ndarray, method: str, target: Optional[int], detach_cam_weights: bool = False) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.spec.input_shape:
        raise InputError(f"expected one sample of shape {model.spec.input_shape}, got {x.shape}")
    if target is None:
        target = int(np.argmax(forward(model, x)))
    values = explain_batch(model, x[None], method, np.array([target]), detach_cam_weights)[0]
    return Attribution(values, method, int(target))


def input_gradient(model: Model, x: np.ndarray, target: Optional[int] = None) -> Attribution:
    return _explain_one(model, x, 'input_gradient', target)


def grad_cam(model: Model, x: np.ndarray, target: Optional[int] = None, detach_weights: bool = False) -> Attribution:
    return _explain_one(model, x, 'grad_cam', target, detach_weights)


def explain(model: Model, x: np.ndarray, method: str, target: Optional[int] = None) -> Attribution:
    return _explain_one(model, x, method, target)


def rank_features(attribution) -> FeatureRanking:
    # stable sort keeps ascending index order among equal magnitudes
    values = attribution.values if isinstance(attribution, Attribution) else np.asarray(attribution)
    return FeatureRanking(np.argsort(-np.abs(values.reshape(-1)), kind='stable'))


def dump_attribution_csv(attribution: Attribution, path: str):
    values = attribution.values
    if values.ndim == 1:
        frame = pd.DataFrame({'feature': np.arange(values.size), 'value': values})
    else:
        grid = values.reshape(-1, values.shape[-1])
        frame = pd.DataFrame(grid, columns=[f"col{index}" for index in range(grid.shape[1])])
        frame.insert(0, 'row', np.arange(grid.shape[0]))
    frame.to_csv(path, index=False, float_format='%.17g')


def to_gray_levels(image: np.ndarray) -> np.ndarray:
    low, high = float(image.min()), float(image.max())
    if high == low:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - low) / (high - low) * 255.0).astype(np.uint8)


def dump_attribution_pgm(attribution: Attribution, path: str):
    values = attribution.values
    if values.ndim == 3:
        # channels side by side
        values = np.concatenate(list(values), axis=1)
    if values.ndim != 2:
        raise InputError(f"PGM dumps need an image attribution, got shape {attribution.values.shape}")
    pixels = to_gray_levels(values)
    with open(path, 'wb') as image:
        image.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode('ascii'))
        image.write(pixels.tobytes())
