from typing import (
    Iterable,
    Optional,
)

import numpy as np

from autodiff import ComputeGraph, GraphBuilder, evaluate
from const import PARAMS_MAGIC, PARAMS_VERSION
from errors import InputError, ParseError
from loader.loader_util import (
    format_shape,
    parse_key_values,
    parse_shape,
    read_container,
    require,
    write_container,
)

MODEL_KINDS = ['linear', 'mlp', 'cnn']
# kinds taking a feature vector
DENSE_KINDS = ('linear', 'mlp')
ACTIVATIONS = ['relu', 'softplus']
# hidden field of a linear model
NO_HIDDEN = 'none'


class ModelSpec:
    kind: str
    hidden: tuple[int, ...]
    activation: str
    input_shape: tuple[int, ...]
    output_dim: int
    kernel_size: int

    def __init__(self, kind: str, hidden: Iterable[int], activation: str, input_shape: Iterable[int], output_dim: int, kernel_size: int = 3):
        self.kind = kind
        self.hidden = tuple(int(width) for width in hidden)
        self.activation = activation
        self.input_shape = tuple(int(extent) for extent in input_shape)
        self.output_dim = int(output_dim)
        self.kernel_size = int(kernel_size)
        self.validate()

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise InputError(f"model kind must be one of {MODEL_KINDS}, got '{self.kind}'")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}, got '{self.activation}'")
        if any(width <= 0 for width in self.hidden):
            raise InputError(f"hidden widths must be positive, got {self.hidden}")
        if self.output_dim < 1:
            raise InputError(f"output dimension must be at least 1, got {self.output_dim}")
        if any(extent <= 0 for extent in self.input_shape):
            raise InputError(f"input shape must be positive, got {self.input_shape}")
        if self.kind in DENSE_KINDS and len(self.input_shape) != 1:
            raise InputError(f"{self.kind} input must be a feature vector, got shape {self.input_shape}")
        if self.kind == 'linear' and self.hidden:
            raise InputError(f"a linear model has no hidden layers, got {self.hidden}")
        if self.kind == 'mlp' and not self.hidden:
            raise InputError("an mlp needs at least one hidden layer, use kind linear for none")
        if self.kind == 'cnn':
            if len(self.input_shape) != 3:
                raise InputError(f"cnn input must be (channels, height, width), got {self.input_shape}")
            if not self.hidden:
                raise InputError("a cnn needs at least one conv layer")
            if self.kernel_size % 2 == 0:
                raise InputError(f"cnn kernel size must be odd, got {self.kernel_size}")

    def to_header(self) -> str:
        return (
            f"spec kind={self.kind} hidden={format_shape(self.hidden) or NO_HIDDEN} activation={self.activation} "
            f"input={format_shape(self.input_shape)} output={self.output_dim} kernel={self.kernel_size}"
        )

    def __key(self):
        return (self.kind, self.hidden, self.activation, self.input_shape, self.output_dim, self.kernel_size)

    def __hash__(self):
        return hash(self.__key())

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return self.__key() == other.__key()
        return NotImplemented

    def __repr__(self):
        return f"ModelSpec({self.to_header()[5:]})"


class ParameterSet:
    _tensors: dict[str, np.ndarray]

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors = {name: np.array(value, dtype=np.float64) for name, value in tensors.items()}

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __len__(self):
        return len(self._tensors)

    def copy(self) -> 'ParameterSet':
        return ParameterSet(self._tensors)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._tensors)

    def __eq__(self, other):
        if isinstance(other, type(self)):
            return self.names() == other.names() and all(
                self[name].shape == other[name].shape and self[name].tobytes() == other[name].tobytes() for name in self.names()
            )
        return NotImplemented

    __hash__ = None


class Model:
    spec: ModelSpec
    params: ParameterSet

    def __init__(self, spec: ModelSpec, params: ParameterSet):
        expected = parameter_shapes(spec)
        found = [(name, value.shape) for name, value in params.items()]
        if found != expected:
            raise InputError(f"parameters {found} do not match spec {spec}: expected {expected}")
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise InputError(f"parameter '{name}' holds non-finite values")
        self.spec = spec
        self.params = params

    def with_params(self, params: ParameterSet) -> 'Model':
        return Model(self.spec, params)


class ForwardTrace:
    logits: int
    last_conv: Optional[int]
    parameters: dict[str, int]

    def __init__(self, logits: int, last_conv: Optional[int], parameters: dict[str, int]):
        self.logits = logits
        self.last_conv = last_conv
        self.parameters = parameters


def parameter_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    if spec.kind in DENSE_KINDS:
        width = spec.input_shape[0]
        for index, hidden in enumerate(spec.hidden):
            shapes.append((f"layer{index}.weight", (width, hidden)))
            shapes.append((f"layer{index}.bias", (hidden,)))
            width = hidden
    else:
        width = spec.input_shape[0]
        for index, channels in enumerate(spec.hidden):
            shapes.append((f"conv{index}.weight", (channels, width, spec.kernel_size, spec.kernel_size)))
            shapes.append((f"conv{index}.bias", (channels,)))
            width = channels
    shapes.append(('head.weight', (width, spec.output_dim)))
    shapes.append(('head.bias', (spec.output_dim,)))
    return shapes


def fan_in(shape: tuple[int, ...]) -> int:
    # dense weights are (in, out), kernels are (out, in, kh, kw)
    return shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))


def build_model(spec: ModelSpec, seed: int) -> Model:
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(spec):
        if name.endswith('.bias'):
            tensors[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in(shape))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, ParameterSet(tensors))


def declare_parameters(builder: GraphBuilder, spec: ModelSpec) -> dict[str, int]:
    return {name: builder.input(name, shape) for name, shape in parameter_shapes(spec)}


def _activate(builder: GraphBuilder, spec: ModelSpec, node: int) -> int:
    return builder.relu(node) if spec.activation == 'relu' else builder.softplus(node)


def build_forward(builder: GraphBuilder, spec: ModelSpec, x: int, parameters: dict[str, int]) -> ForwardTrace:
    batch_shape = builder.shape_of(x)
    if batch_shape[1:] != spec.input_shape:
        raise InputError(f"input batch {batch_shape} does not match model input {spec.input_shape}")
    hidden = x
    last_conv = None
    if spec.kind in DENSE_KINDS:
        for index in range(len(spec.hidden)):
            affine = builder.add(builder.matmul(hidden, parameters[f"layer{index}.weight"]), parameters[f"layer{index}.bias"])
            hidden = _activate(builder, spec, affine)
    else:
        for index, channels in enumerate(spec.hidden):
            bias = builder.reshape(parameters[f"conv{index}.bias"], (1, channels, 1, 1))
            hidden = _activate(builder, spec, builder.add(builder.conv2d(hidden, parameters[f"conv{index}.weight"]), bias))
        last_conv = hidden
        hidden = builder.global_avg_pool(hidden)
    logits = builder.add(builder.matmul(hidden, parameters['head.weight']), parameters['head.bias'])
    return ForwardTrace(logits, last_conv, parameters)


_forward_graphs: dict[tuple, ComputeGraph] = {}


def forward_graph(spec: ModelSpec, batch_size: int) -> ComputeGraph:
    key = (spec, batch_size)
    if key not in _forward_graphs:
        builder = GraphBuilder()
        x = builder.input('x', (batch_size,) + spec.input_shape)
        trace = build_forward(builder, spec, x, declare_parameters(builder, spec))
        builder.output('logits', trace.logits)
        _forward_graphs[key] = builder.freeze()
    return _forward_graphs[key]


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == model.spec.input_shape
    batch = x[None] if single else x
    if batch.shape[1:] != model.spec.input_shape or batch.shape[0] == 0:
        raise InputError(f"input of shape {x.shape} does not match model input {model.spec.input_shape}")
    bindings = model.params.as_dict()
    bindings['x'] = batch
    logits = evaluate(forward_graph(model.spec, batch.shape[0]), bindings, ['logits'])['logits']
    return logits[0] if single else logits


def predict_classes(model: Model, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x), axis=1)


def save_model(model: Model, path: str):
    header = [model.spec.to_header(), f"tensors {len(model.params)}"]
    header += [f"{name} {format_shape(value.shape)}" for name, value in model.params.items()]
    write_container(path, PARAMS_MAGIC, PARAMS_VERSION, header, [value for _, value in model.params.items()])


def _parse_hidden(text: str, line: int) -> tuple[int, ...]:
    return () if text == NO_HIDDEN else parse_shape(text, line)


def _parse_spec(header_line) -> ModelSpec:
    pairs = parse_key_values(header_line, 'spec')
    try:
        return ModelSpec(
            kind=require(pairs, 'kind', header_line),
            hidden=_parse_hidden(require(pairs, 'hidden', header_line), header_line.number),
            activation=require(pairs, 'activation', header_line),
            input_shape=parse_shape(require(pairs, 'input', header_line), header_line.number),
            output_dim=int(require(pairs, 'output', header_line)),
            kernel_size=int(pairs.get('kernel', '3')),
        )
    except (ValueError, InputError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"invalid model spec: {e}", line=header_line.number)


def load_model(path: str) -> Model:
    header, payload = read_container(path, PARAMS_MAGIC, PARAMS_VERSION)
    if len(header) < 2:
        raise ParseError("checkpoint header lacks spec and tensor count", line=len(header) + 2)
    spec = _parse_spec(header[0])
    count_fields = header[1].fields()
    if len(count_fields) != 2 or count_fields[0] != 'tensors' or not count_fields[1].isdigit():
        raise ParseError(f"expected 'tensors <count>', found '{header[1].text}'", line=header[1].number)
    count = int(count_fields[1])
    if len(header) != count + 2:
        raise ParseError(f"header announces {count} tensors, lists {len(header) - 2}", line=header[1].number)
    shapes = []
    for line in header[2:]:
        fields = line.fields()
        if len(fields) != 2:
            raise ParseError(f"expected '<name> <shape>', found '{line.text}'", line=line.number)
        shapes.append((fields[0], parse_shape(fields[1], line.number)))
    tensors = {name: payload.take(shape) for name, shape in shapes}
    payload.finish()
    return Model(spec, ParameterSet(tensors))
