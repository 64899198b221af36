"""Primitive catalog of the differentiation engine.

Every primitive carries a shape rule, a numpy forward and a vector-Jacobian rule. The
vector-Jacobian rule does not compute numbers: it appends primitive nodes to a graph builder,
which is what makes gradients differentiable again.

Vector-Jacobian rules have the signature ``vjp(builder, node_id, adjoint_id, needs)`` and return
one adjoint node id (or None for "no contribution") per parent. ``needs[i]`` tells the rule
whether parent ``i`` lies on a differentiated path, so rules can skip work.
"""
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import InputError

Shape = tuple[int, ...]


class Primitive:
    name: str
    infer: Callable
    forward: Callable
    vjp: Optional[Callable]

    def __init__(self, name: str, infer: Callable, forward: Callable, vjp: Optional[Callable] = None):
        self.name = name
        self.infer = infer
        self.forward = forward
        self.vjp = vjp


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(primitive: Primitive) -> Primitive:
    PRIMITIVES[primitive.name] = primitive
    return primitive


def lookup(name: str) -> Primitive:
    primitive = PRIMITIVES.get(name)
    if primitive is None:
        raise InputError(f"unknown op '{name}'")
    return primitive


def broadcast_shapes(*shapes: Shape) -> Shape:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise InputError(f"shapes {' and '.join(str(shape) for shape in shapes)} do not broadcast")


def sum_to_shape(value: np.ndarray, shape: Shape) -> np.ndarray:
    leading = value.ndim - len(shape)
    if leading > 0:
        value = value.sum(axis=tuple(range(leading)))
    axes = tuple(axis for axis, extent in enumerate(shape) if extent == 1 and value.shape[axis] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    return value.reshape(shape)


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    matrix = np.zeros((n_in * factor, n_in))
    for out_index in range(n_in * factor):
        source = min(max((out_index + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        low = int(np.floor(source))
        high = min(low + 1, n_in - 1)
        fraction = source - low
        matrix[out_index, low] += 1.0 - fraction
        matrix[out_index, high] += fraction
    return matrix


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2:]
    padded = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(np.einsum('nchwij,kcij->nkhw', windows, w))


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, kernel: Shape) -> np.ndarray:
    kh, kw = kernel
    padded = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(np.einsum('nkhw,nchwij->kcij', g, windows))


def flip_kernel(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mix(a: np.ndarray, c: np.ndarray, t) -> np.ndarray:
    # coincident operands come back unchanged, whatever t is
    mixed = t * a + (1.0 - t) * c
    return np.where(a == c, np.broadcast_to(a, mixed.shape), mixed)


def _unbroadcast(builder, adjoint: int, shape: Shape) -> int:
    if builder.shape_of(adjoint) == shape:
        return adjoint
    return builder.sum_to(adjoint, shape)


def _reduced_axes(shape: Shape, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(len(shape)))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    return tuple(sorted(axis % len(shape) for axis in axes))


def _reduced_shape(shape: Shape, axes, keepdims: bool) -> Shape:
    reduced = _reduced_axes(shape, axes)
    if keepdims:
        return tuple(1 if axis in reduced else extent for axis, extent in enumerate(shape))
    return tuple(extent for axis, extent in enumerate(shape) if axis not in reduced)


def _require_rank(shape: Shape, rank: int, what: str):
    if len(shape) != rank:
        raise InputError(f"{what} expects rank {rank}, got shape {shape}")


def _same_shape(shapes, attrs) -> Shape:
    if len(set(shapes)) != 1:
        raise InputError(f"operands must share a shape, got {shapes}")
    return shapes[0]


def _elementwise(shapes, attrs) -> Shape:
    return broadcast_shapes(*shapes)


def _unary(shapes, attrs) -> Shape:
    return shapes[0]


# arithmetic

def _add_vjp(b, node_id, g, needs):
    a, c = b.nodes[node_id].parents
    return [
        _unbroadcast(b, g, b.shape_of(a)) if needs[0] else None,
        _unbroadcast(b, g, b.shape_of(c)) if needs[1] else None,
    ]


def _subtract_vjp(b, node_id, g, needs):
    a, c = b.nodes[node_id].parents
    return [
        _unbroadcast(b, g, b.shape_of(a)) if needs[0] else None,
        _unbroadcast(b, b.neg(g), b.shape_of(c)) if needs[1] else None,
    ]


def _multiply_vjp(b, node_id, g, needs):
    a, c = b.nodes[node_id].parents
    return [
        _unbroadcast(b, b.mul(g, c), b.shape_of(a)) if needs[0] else None,
        _unbroadcast(b, b.mul(g, a), b.shape_of(c)) if needs[1] else None,
    ]


def _divide_vjp(b, node_id, g, needs):
    a, c = b.nodes[node_id].parents
    return [
        _unbroadcast(b, b.div(g, c), b.shape_of(a)) if needs[0] else None,
        _unbroadcast(b, b.neg(b.div(b.mul(g, node_id), c)), b.shape_of(c)) if needs[1] else None,
    ]


def _divide_forward(values, attrs):
    return values[0] / values[1]


register_primitive(Primitive('add', _elementwise, lambda v, a: v[0] + v[1], _add_vjp))
register_primitive(Primitive('subtract', _elementwise, lambda v, a: v[0] - v[1], _subtract_vjp))
register_primitive(Primitive('multiply', _elementwise, lambda v, a: v[0] * v[1], _multiply_vjp))
register_primitive(Primitive('divide', _elementwise, _divide_forward, _divide_vjp))
register_primitive(Primitive('negate', _unary, lambda v, a: -v[0], lambda b, n, g, needs: [b.neg(g)]))
register_primitive(Primitive(
    'scale', _unary, lambda v, a: v[0] * a['factor'],
    lambda b, n, g, needs: [b.scale(g, b.nodes[n].attrs['factor'])],
))


def _matmul_infer(shapes, attrs) -> Shape:
    left, right = shapes
    _require_rank(left, 2, 'matmul')
    _require_rank(right, 2, 'matmul')
    if left[1] != right[0]:
        raise InputError(f"matmul inner extents differ: {left} @ {right}")
    return (left[0], right[1])


def _matmul_vjp(b, node_id, g, needs):
    left, right = b.nodes[node_id].parents
    return [
        b.matmul(g, b.transpose(right)) if needs[0] else None,
        b.matmul(b.transpose(left), g) if needs[1] else None,
    ]


register_primitive(Primitive(
    'matmul', _matmul_infer,
    lambda v, a: np.ascontiguousarray(np.einsum('ik,kj->ij', v[0], v[1])),
    _matmul_vjp,
))


# shape plumbing

def _transpose_infer(shapes, attrs) -> Shape:
    axes = attrs['axes']
    if sorted(axes) != list(range(len(shapes[0]))):
        raise InputError(f"invalid transpose axes {axes} for shape {shapes[0]}")
    return tuple(shapes[0][axis] for axis in axes)


def _transpose_vjp(b, node_id, g, needs):
    inverse = tuple(int(axis) for axis in np.argsort(b.nodes[node_id].attrs['axes']))
    return [b.transpose(g, inverse)]


def _reshape_infer(shapes, attrs) -> Shape:
    target = tuple(attrs['shape'])
    if int(np.prod(target, dtype=np.int64)) != int(np.prod(shapes[0], dtype=np.int64)):
        raise InputError(f"cannot reshape {shapes[0]} into {target}")
    return target


def _broadcast_to_infer(shapes, attrs) -> Shape:
    target = tuple(attrs['shape'])
    if broadcast_shapes(shapes[0], target) != target:
        raise InputError(f"cannot broadcast {shapes[0]} to {target}")
    return target


def _sum_to_infer(shapes, attrs) -> Shape:
    target = tuple(attrs['shape'])
    if broadcast_shapes(shapes[0], target) != shapes[0]:
        raise InputError(f"cannot sum {shapes[0]} down to {target}")
    return target


register_primitive(Primitive(
    'transpose', _transpose_infer,
    lambda v, a: np.ascontiguousarray(v[0].transpose(a['axes'])), _transpose_vjp,
))
register_primitive(Primitive(
    'reshape', _reshape_infer, lambda v, a: v[0].reshape(a['shape']),
    lambda b, n, g, needs: [b.reshape(g, b.shape_of(b.nodes[n].parents[0]))],
))
register_primitive(Primitive(
    'broadcast_to', _broadcast_to_infer,
    lambda v, a: np.ascontiguousarray(np.broadcast_to(v[0], a['shape'])),
    lambda b, n, g, needs: [b.sum_to(g, b.shape_of(b.nodes[n].parents[0]))],
))
register_primitive(Primitive(
    'sum_to', _sum_to_infer, lambda v, a: sum_to_shape(v[0], tuple(a['shape'])),
    lambda b, n, g, needs: [b.broadcast_to(g, b.shape_of(b.nodes[n].parents[0]))],
))


# reductions

def _reduce_infer(shapes, attrs) -> Shape:
    return _reduced_shape(shapes[0], attrs.get('axes'), attrs.get('keepdims', False))


def _spread(b, node_id, g):
    node = b.nodes[node_id]
    source_shape = b.shape_of(node.parents[0])
    kept = _reduced_shape(source_shape, node.attrs.get('axes'), True)
    return b.broadcast_to(b.reshape(g, kept), source_shape)


def _reduce_count(source_shape: Shape, axes) -> int:
    return int(np.prod([source_shape[axis] for axis in _reduced_axes(source_shape, axes)], dtype=np.int64))


def _mean_vjp(b, node_id, g, needs):
    node = b.nodes[node_id]
    count = _reduce_count(b.shape_of(node.parents[0]), node.attrs.get('axes'))
    return [b.scale(_spread(b, node_id, g), 1.0 / count)]


def _axes_arg(attrs):
    axes = attrs.get('axes')
    return axes if axes is None or isinstance(axes, int) else tuple(axes)


register_primitive(Primitive(
    'sum', _reduce_infer,
    lambda v, a: np.asarray(v[0].sum(axis=_axes_arg(a), keepdims=a.get('keepdims', False)), dtype=np.float64),
    lambda b, n, g, needs: [_spread(b, n, g)],
))
register_primitive(Primitive(
    'mean', _reduce_infer,
    lambda v, a: np.asarray(v[0].mean(axis=_axes_arg(a), keepdims=a.get('keepdims', False)), dtype=np.float64),
    _mean_vjp,
))


def _gap_infer(shapes, attrs) -> Shape:
    _require_rank(shapes[0], 4, 'global_avg_pool')
    return shapes[0][:2]


def _gap_vjp(b, node_id, g, needs):
    source_shape = b.shape_of(b.nodes[node_id].parents[0])
    n, c, h, w = source_shape
    spread = b.broadcast_to(b.reshape(g, (n, c, 1, 1)), source_shape)
    return [b.scale(spread, 1.0 / (h * w))]


register_primitive(Primitive(
    'global_avg_pool', _gap_infer, lambda v, a: v[0].mean(axis=(2, 3)), _gap_vjp,
))


# pointwise nonlinearities

register_primitive(Primitive('step', _unary, lambda v, a: (v[0] > 0).astype(np.float64), lambda b, n, g, needs: [None]))
register_primitive(Primitive('sign', _unary, lambda v, a: np.sign(v[0]), lambda b, n, g, needs: [None]))
register_primitive(Primitive('stop_gradient', _unary, lambda v, a: v[0], lambda b, n, g, needs: [None]))
register_primitive(Primitive(
    'relu', _unary, lambda v, a: np.maximum(v[0], 0.0),
    lambda b, n, g, needs: [b.mul(g, b.step(b.nodes[n].parents[0]))],
))
register_primitive(Primitive(
    'abs', _unary, lambda v, a: np.abs(v[0]),
    lambda b, n, g, needs: [b.mul(g, b.sign(b.nodes[n].parents[0]))],
))
register_primitive(Primitive(
    'softplus', _unary, lambda v, a: np.logaddexp(0.0, v[0]),
    lambda b, n, g, needs: [b.mul(g, b.sigmoid(b.nodes[n].parents[0]))],
))
register_primitive(Primitive(
    'sigmoid', _unary, lambda v, a: expit(v[0]),
    lambda b, n, g, needs: [b.mul(g, b.sub(n, b.mul(n, n)))],
))
register_primitive(Primitive(
    'log', _unary, lambda v, a: np.log(v[0]),
    lambda b, n, g, needs: [b.div(g, b.nodes[n].parents[0])],
))


# softmax family, last axis

def _softmax_vjp(b, node_id, g, needs):
    weighted = b.sum(b.mul(g, node_id), axes=-1, keepdims=True)
    return [b.mul(node_id, b.sub(g, weighted))]


def _log_softmax_vjp(b, node_id, g, needs):
    probabilities = b.softmax(b.nodes[node_id].parents[0])
    return [b.sub(g, b.mul(probabilities, b.sum(g, axes=-1, keepdims=True)))]


def _cross_entropy_infer(shapes, attrs) -> Shape:
    logits, targets = shapes
    _require_rank(logits, 2, 'cross_entropy')
    if logits != targets:
        raise InputError(f"cross_entropy logits {logits} and targets {targets} differ")
    return (logits[0],)


def _cross_entropy_forward(values, attrs):
    logits, targets = values
    return -(targets * log_softmax(logits)).sum(axis=-1)


def _cross_entropy_vjp(b, node_id, g, needs):
    logits, targets = b.nodes[node_id].parents
    column = b.reshape(g, (b.shape_of(g)[0], 1))
    adjoints = [None, None]
    if needs[0]:
        mass = b.sum(targets, axes=-1, keepdims=True)
        adjoints[0] = b.mul(column, b.sub(b.mul(b.softmax(logits), mass), targets))
    if needs[1]:
        adjoints[1] = b.neg(b.mul(column, b.log_softmax(logits)))
    return adjoints


register_primitive(Primitive('softmax', _unary, lambda v, a: softmax(v[0]), _softmax_vjp))
register_primitive(Primitive('log_softmax', _unary, lambda v, a: log_softmax(v[0]), _log_softmax_vjp))
register_primitive(Primitive('cross_entropy', _cross_entropy_infer, _cross_entropy_forward, _cross_entropy_vjp))


def _squared_error_vjp(b, node_id, g, needs):
    a, c = b.nodes[node_id].parents
    twice = b.scale(b.mul(g, b.sub(a, c)), 2.0)
    return [twice if needs[0] else None, b.neg(twice) if needs[1] else None]


register_primitive(Primitive(
    'squared_error', _same_shape, lambda v, a: (v[0] - v[1]) ** 2, _squared_error_vjp,
))


# convolution, stride 1, zero padding keeps the spatial extent

def _conv2d_infer(shapes, attrs) -> Shape:
    x, w = shapes
    _require_rank(x, 4, 'conv2d input')
    _require_rank(w, 4, 'conv2d kernel')
    if x[1] != w[1]:
        raise InputError(f"conv2d channel mismatch: input {x}, kernel {w}")
    if w[2] % 2 == 0 or w[3] % 2 == 0:
        raise InputError(f"conv2d kernel extents must be odd, got {w}")
    return (x[0], w[0], x[2], x[3])


def _conv2d_vjp(b, node_id, g, needs):
    x, w = b.nodes[node_id].parents
    return [
        b.conv2d(g, b.flip_kernel(w)) if needs[0] else None,
        b.conv2d_weight_grad(x, g, b.shape_of(w)[2:]) if needs[1] else None,
    ]


def _flip_kernel_infer(shapes, attrs) -> Shape:
    _require_rank(shapes[0], 4, 'flip_kernel')
    k, c, kh, kw = shapes[0]
    return (c, k, kh, kw)


def _weight_grad_infer(shapes, attrs) -> Shape:
    x, g = shapes
    _require_rank(x, 4, 'conv2d_weight_grad input')
    _require_rank(g, 4, 'conv2d_weight_grad adjoint')
    if x[0] != g[0] or x[2:] != g[2:]:
        raise InputError(f"conv2d_weight_grad shapes disagree: {x} and {g}")
    return (g[1], x[1]) + tuple(attrs['kernel'])


def _weight_grad_vjp(b, node_id, h, needs):
    x, g = b.nodes[node_id].parents
    return [
        b.conv2d(g, b.flip_kernel(h)) if needs[0] else None,
        b.conv2d(x, h) if needs[1] else None,
    ]


register_primitive(Primitive('conv2d', _conv2d_infer, lambda v, a: conv2d(v[0], v[1]), _conv2d_vjp))
register_primitive(Primitive(
    'flip_kernel', _flip_kernel_infer, lambda v, a: flip_kernel(v[0]),
    lambda b, n, g, needs: [b.flip_kernel(g)],
))
register_primitive(Primitive(
    'conv2d_weight_grad', _weight_grad_infer,
    lambda v, a: conv2d_weight_grad(v[0], v[1], tuple(a['kernel'])), _weight_grad_vjp,
))


# bilinear upsampling as a fixed linear operator

def _upsample_infer(shapes, attrs) -> Shape:
    _require_rank(shapes[0], 4, 'upsample')
    factor = attrs['factor']
    n, c, h, w = shapes[0]
    return (n, c, h * factor, w * factor)


def _upsample_forward(values, attrs):
    x = values[0]
    factor = attrs['factor']
    rows = bilinear_matrix(x.shape[2], factor)
    cols = bilinear_matrix(x.shape[3], factor)
    return np.ascontiguousarray(np.einsum('Hh,nchw,Ww->ncHW', rows, x, cols))


def _upsample_transpose_infer(shapes, attrs) -> Shape:
    _require_rank(shapes[0], 4, 'upsample_transpose')
    factor = attrs['factor']
    n, c, h, w = shapes[0]
    if h % factor or w % factor:
        raise InputError(f"upsample_transpose extent {shapes[0]} not divisible by {factor}")
    return (n, c, h // factor, w // factor)


def _upsample_transpose_forward(values, attrs):
    g = values[0]
    factor = attrs['factor']
    rows = bilinear_matrix(g.shape[2] // factor, factor)
    cols = bilinear_matrix(g.shape[3] // factor, factor)
    return np.ascontiguousarray(np.einsum('Hh,ncHW,Ww->nchw', rows, g, cols))


register_primitive(Primitive(
    'upsample', _upsample_infer, _upsample_forward,
    lambda b, n, g, needs: [b.upsample_transpose(g, b.nodes[n].attrs['factor'])],
))
register_primitive(Primitive(
    'upsample_transpose', _upsample_transpose_infer, _upsample_transpose_forward,
    lambda b, n, g, needs: [b.upsample(g, b.nodes[n].attrs['factor'])],
))


# mixing and masks

def _mix_forward(values, attrs):
    return mix(*values)


def _mix_vjp(b, node_id, g, needs):
    a, c, t = b.nodes[node_id].parents
    adjoints = [None, None, None]
    if needs[0]:
        adjoints[0] = _unbroadcast(b, b.mul(g, t), b.shape_of(a))
    if needs[1]:
        adjoints[1] = _unbroadcast(b, b.mul(g, b.sub(b.constant(1.0), t)), b.shape_of(c))
    if needs[2]:
        adjoints[2] = _unbroadcast(b, b.mul(g, b.sub(a, c)), b.shape_of(t))
    return adjoints


def _mix_infer(shapes, attrs) -> Shape:
    if shapes[0] != shapes[1]:
        raise InputError(f"mixed operands differ in shape: {shapes[0]} and {shapes[1]}")
    return broadcast_shapes(*shapes)


def _nonzero_rows_infer(shapes, attrs) -> Shape:
    if len(shapes[0]) != 2:
        raise InputError(f"nonzero_rows expects a (rows, features) operand, got {shapes[0]}")
    return (shapes[0][0],)


def _nonzero_rows_forward(values, attrs):
    return np.any(values[0] != 0.0, axis=1).astype(np.float64)


register_primitive(Primitive('mix', _mix_infer, _mix_forward, _mix_vjp))
register_primitive(Primitive('nonzero_rows', _nonzero_rows_infer, _nonzero_rows_forward, lambda b, n, g, needs: [None]))
