import logging
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from autodiff.primitives import PRIMITIVES, Shape, lookup
from errors import InputError, NumericError, UnsupportedOpError

NodeRef = Union[int, str]


class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict
    shape: Shape
    name: Optional[str]

    def __init__(self, op: str, parents: tuple[int, ...], attrs: dict, shape: Shape, name: Optional[str] = None):
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.shape = shape
        self.name = name


class ComputeGraph:
    """Immutable, topologically ordered operation graph.

    Node ids are positions in ``nodes``; every parent id is smaller than its child id.
    """
    nodes: tuple[Node, ...]
    inputs: dict[str, int]
    outputs: dict[str, int]

    def __init__(self, nodes: Iterable[Node], inputs: Mapping[str, int], outputs: Mapping[str, int]):
        self.nodes = tuple(nodes)
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)
        self._plans: dict[tuple[int, ...], list[int]] = {}
        self.validate()

    def validate(self):
        for node_id, node in enumerate(self.nodes):
            assert all(parent < node_id for parent in node.parents), f"node #{node_id} precedes a parent"
        for name, node_id in self.outputs.items():
            assert 0 <= node_id < len(self.nodes), f"output '{name}' names a missing node"

    def shape_of(self, node_id: int) -> Shape:
        return self.nodes[node_id].shape

    def resolve(self, ref: NodeRef) -> int:
        if isinstance(ref, str):
            if ref in self.outputs:
                return self.outputs[ref]
            if ref in self.inputs:
                return self.inputs[ref]
            raise InputError(f"graph has no output or input named '{ref}'")
        if not 0 <= ref < len(self.nodes):
            raise InputError(f"graph has no node #{ref}")
        return ref

    def label(self, node_id: int) -> str:
        node = self.nodes[node_id]
        if node.name:
            return node.name
        for name, output_id in self.outputs.items():
            if output_id == node_id:
                return name
        return f"#{node_id}"

    def describe(self, node_id: int) -> str:
        return f"node #{node_id} ({self.nodes[node_id].op}, {self.label(node_id)})"

    def plan(self, targets: tuple[int, ...]) -> list[int]:
        if targets not in self._plans:
            required = set()
            pending = list(targets)
            while pending:
                node_id = pending.pop()
                if node_id not in required:
                    required.add(node_id)
                    pending.extend(self.nodes[node_id].parents)
            self._plans[targets] = sorted(required)
        return self._plans[targets]

    def thaw(self) -> 'GraphBuilder':
        return GraphBuilder(self)


class GraphBuilder:
    nodes: list[Node]
    inputs: dict[str, int]
    outputs: dict[str, int]

    def __init__(self, graph: Optional[ComputeGraph] = None):
        self.nodes = list(graph.nodes) if graph is not None else []
        self.inputs = dict(graph.inputs) if graph is not None else {}
        self.outputs = dict(graph.outputs) if graph is not None else {}
        self._scalars: dict[float, int] = {}

    def shape_of(self, node_id: int) -> Shape:
        return self.nodes[node_id].shape

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, name: str, shape: Shape) -> int:
        if name in self.inputs:
            raise InputError(f"input '{name}' declared twice")
        shape = tuple(int(extent) for extent in shape)
        if any(extent <= 0 for extent in shape):
            raise InputError(f"input '{name}' has non-positive extent in {shape}")
        node_id = self._append(Node('input', (), {}, shape, name))
        self.inputs[name] = node_id
        return node_id

    def constant(self, value) -> int:
        array = np.array(value, dtype=np.float64)
        if array.ndim == 0:
            key = float(array)
            if key not in self._scalars:
                self._scalars[key] = self._append(Node('constant', (), {'value': array}, ()))
            return self._scalars[key]
        return self._append(Node('constant', (), {'value': array}, array.shape))

    def apply(self, op: str, *parents: int, **attrs) -> int:
        primitive = lookup(op)
        shapes = [self.nodes[parent].shape for parent in parents]
        try:
            shape = tuple(primitive.infer(shapes, attrs))
        except InputError as e:
            raise InputError(f"node #{len(self.nodes)} ({op}): {e}") from e
        return self._append(Node(op, tuple(parents), attrs, shape))

    def output(self, name: str, node_id: int) -> int:
        self.outputs[name] = node_id
        return node_id

    def freeze(self) -> ComputeGraph:
        return ComputeGraph(self.nodes, self.inputs, self.outputs)

    def add(self, a: int, b: int) -> int:
        return self.apply('add', a, b)

    def sub(self, a: int, b: int) -> int:
        return self.apply('subtract', a, b)

    def mul(self, a: int, b: int) -> int:
        return self.apply('multiply', a, b)

    def div(self, a: int, b: int) -> int:
        return self.apply('divide', a, b)

    def neg(self, x: int) -> int:
        return self.apply('negate', x)

    def scale(self, x: int, factor: float) -> int:
        return self.apply('scale', x, factor=float(factor))

    def matmul(self, a: int, b: int) -> int:
        return self.apply('matmul', a, b)

    def transpose(self, x: int, axes: Optional[tuple[int, ...]] = None) -> int:
        if axes is None:
            axes = tuple(reversed(range(len(self.shape_of(x)))))
        return self.apply('transpose', x, axes=tuple(axes))

    def reshape(self, x: int, shape: Shape) -> int:
        if tuple(shape) == self.shape_of(x):
            return x
        return self.apply('reshape', x, shape=tuple(shape))

    def broadcast_to(self, x: int, shape: Shape) -> int:
        if tuple(shape) == self.shape_of(x):
            return x
        return self.apply('broadcast_to', x, shape=tuple(shape))

    def sum_to(self, x: int, shape: Shape) -> int:
        if tuple(shape) == self.shape_of(x):
            return x
        return self.apply('sum_to', x, shape=tuple(shape))

    def sum(self, x: int, axes=None, keepdims: bool = False) -> int:
        return self.apply('sum', x, axes=axes, keepdims=keepdims)

    def mean(self, x: int, axes=None, keepdims: bool = False) -> int:
        return self.apply('mean', x, axes=axes, keepdims=keepdims)

    def relu(self, x: int) -> int:
        return self.apply('relu', x)

    def softplus(self, x: int) -> int:
        return self.apply('softplus', x)

    def sigmoid(self, x: int) -> int:
        return self.apply('sigmoid', x)

    def step(self, x: int) -> int:
        return self.apply('step', x)

    def sign(self, x: int) -> int:
        return self.apply('sign', x)

    def abs(self, x: int) -> int:
        return self.apply('abs', x)

    def log(self, x: int) -> int:
        return self.apply('log', x)

    def softmax(self, x: int) -> int:
        return self.apply('softmax', x)

    def log_softmax(self, x: int) -> int:
        return self.apply('log_softmax', x)

    def cross_entropy(self, logits: int, targets: int) -> int:
        return self.apply('cross_entropy', logits, targets)

    def squared_error(self, a: int, b: int) -> int:
        return self.apply('squared_error', a, b)

    def conv2d(self, x: int, w: int) -> int:
        return self.apply('conv2d', x, w)

    def flip_kernel(self, w: int) -> int:
        return self.apply('flip_kernel', w)

    def conv2d_weight_grad(self, x: int, g: int, kernel: Shape) -> int:
        return self.apply('conv2d_weight_grad', x, g, kernel=tuple(kernel))

    def global_avg_pool(self, x: int) -> int:
        return self.apply('global_avg_pool', x)

    def upsample(self, x: int, factor: int) -> int:
        if factor == 1:
            return x
        return self.apply('upsample', x, factor=int(factor))

    def upsample_transpose(self, x: int, factor: int) -> int:
        if factor == 1:
            return x
        return self.apply('upsample_transpose', x, factor=int(factor))

    def stop_gradient(self, x: int) -> int:
        return self.apply('stop_gradient', x)

    def mix(self, a: int, b: int, t: int) -> int:
        return self.apply('mix', a, b, t)

    def nonzero_rows(self, x: int) -> int:
        return self.apply('nonzero_rows', x)


def _bind(graph: ComputeGraph, node_id: int, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    node = graph.nodes[node_id]
    if node.name not in bindings:
        raise InputError(f"{graph.describe(node_id)} is not bound")
    value = np.asarray(bindings[node.name], dtype=np.float64)
    if value.shape != node.shape:
        raise InputError(f"{graph.describe(node_id)} expects shape {node.shape}, got {value.shape}")
    return value


def evaluate(graph: ComputeGraph, bindings: Mapping[str, np.ndarray], outputs: Optional[Iterable[str]] = None) -> dict[str, np.ndarray]:
    names = list(graph.outputs) if outputs is None else list(outputs)
    missing = [name for name in names if name not in graph.outputs]
    if missing:
        raise InputError(f"graph has no outputs named {missing}")
    targets = tuple(graph.outputs[name] for name in names)
    values: dict[int, np.ndarray] = {}
    for node_id in graph.plan(targets):
        node = graph.nodes[node_id]
        if node.op == 'input':
            value = _bind(graph, node_id, bindings)
        elif node.op == 'constant':
            value = node.attrs['value']
        else:
            value = PRIMITIVES[node.op].forward([values[parent] for parent in node.parents], node.attrs)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value at {graph.describe(node_id)}", node=graph.label(node_id))
        values[node_id] = value
    return {name: values[graph.outputs[name]] for name in names}


def _relevant_nodes(nodes: list[Node], scalar: int, wrt: set[int]) -> set[int]:
    ancestors = set()
    pending = [scalar]
    while pending:
        node_id = pending.pop()
        if node_id not in ancestors:
            ancestors.add(node_id)
            pending.extend(nodes[node_id].parents)
    influenced = set()
    for node_id in range(scalar + 1):
        if node_id in wrt or any(parent in influenced for parent in nodes[node_id].parents):
            influenced.add(node_id)
    return ancestors & influenced


def append_gradients(builder: GraphBuilder, scalar: int, wrt: Iterable[int]) -> dict[int, int]:
    """Append reverse-mode gradient nodes of ``scalar`` with respect to ``wrt``.

    Returns a mapping from each wrt node id to the node id holding its gradient. The appended
    nodes are ordinary primitives, so the result can itself be differentiated.
    """
    if builder.shape_of(scalar) != ():
        raise InputError(f"can only differentiate a scalar, node #{scalar} has shape {builder.shape_of(scalar)}")
    wrt = list(dict.fromkeys(wrt))
    for node_id in wrt:
        if not 0 <= node_id < len(builder.nodes):
            raise InputError(f"cannot differentiate with respect to missing node #{node_id}")
    wrt_set = set(wrt)
    relevant = _relevant_nodes(builder.nodes, scalar, wrt_set)
    contributions: dict[int, list[int]] = {scalar: [builder.constant(1.0)]}
    gradients: dict[int, int] = {}
    for node_id in range(scalar, -1, -1):
        if node_id not in relevant or node_id not in contributions:
            continue
        parts = contributions.pop(node_id)
        adjoint = parts[0]
        for part in parts[1:]:
            adjoint = builder.add(adjoint, part)
        if node_id in wrt_set:
            gradients[node_id] = adjoint
        node = builder.nodes[node_id]
        if node.op in ('input', 'constant'):
            continue
        primitive = PRIMITIVES[node.op]
        if primitive.vjp is None:
            raise UnsupportedOpError(node.op)
        needs = [parent in relevant for parent in node.parents]
        if not any(needs):
            continue
        for parent, parent_adjoint in zip(node.parents, primitive.vjp(builder, node_id, adjoint, needs)):
            if parent_adjoint is not None and parent in relevant:
                contributions.setdefault(parent, []).append(parent_adjoint)
    for node_id in wrt:
        if node_id not in gradients:
            gradients[node_id] = builder.constant(np.zeros(builder.shape_of(node_id)))
    logging.getLogger(__name__).debug(f"appended gradients of #{scalar}: graph has {len(builder.nodes)} nodes")
    return gradients


def gradient_name(of: str, wrt: str) -> str:
    return f"d[{of}]/d[{wrt}]"


def derive(graph: ComputeGraph, scalar_output: NodeRef, wrt: Iterable[NodeRef]) -> ComputeGraph:
    scalar = graph.resolve(scalar_output)
    wrt_ids = [graph.resolve(ref) for ref in wrt]
    builder = graph.thaw()
    gradients = append_gradients(builder, scalar, wrt_ids)
    scalar_label = graph.label(scalar)
    for node_id in wrt_ids:
        builder.output(gradient_name(scalar_label, graph.label(node_id)), gradients[node_id])
    return builder.freeze()
