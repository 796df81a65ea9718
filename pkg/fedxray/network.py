from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

# a ParamVector is a model or a model update; a Gradient shares its layout
ParamVector = np.ndarray
Gradient = np.ndarray
Tensor = np.ndarray

Shape = Tuple[int, ...]


class DimensionError(ValueError):
    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


class NumericError(ArithmeticError):
    def __init__(self, message):
        self.message = message
        super().__init__(self.message)


@dataclass(frozen=True)
class Conv2d:
    """Cross-correlation, no padding. Weight (out, in, k, k) then bias (out,)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise DimensionError(f"Conv2d expects ({self.in_channels}, H, W), got {shape}")
        _, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise DimensionError(f"Conv2d kernel {self.kernel} does not fit {shape}")
        return (self.out_channels, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def param_shapes(self) -> List[Shape]:
        return [(self.out_channels, self.in_channels, self.kernel, self.kernel), (self.out_channels,)]


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def param_shapes(self) -> List[Shape]:
        return []


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int | None = None  # None pools without overlap

    @property
    def step(self) -> int:
        return self.kernel if self.stride is None else self.stride

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3:
            raise DimensionError(f"MaxPool2d expects (C, H, W), got {shape}")
        c, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise DimensionError(f"MaxPool2d kernel {self.kernel} does not fit {shape}")
        return (c, (h - self.kernel) // self.step + 1, (w - self.kernel) // self.step + 1)

    def param_shapes(self) -> List[Shape]:
        return []


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)

    def param_shapes(self) -> List[Shape]:
        return []


@dataclass(frozen=True)
class FullyConnected:
    """Weight (out, in) then bias (out,)."""

    in_dim: int
    out_dim: int

    def output_shape(self, shape: Shape) -> Shape:
        if shape != (self.in_dim,):
            raise DimensionError(f"FullyConnected expects ({self.in_dim},), got {shape}")
        return (self.out_dim,)

    def param_shapes(self) -> List[Shape]:
        return [(self.out_dim, self.in_dim), (self.out_dim,)]


@dataclass(frozen=True)
class Softmax:
    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 1:
            raise DimensionError(f"Softmax expects a vector, got {shape}")
        return shape

    def param_shapes(self) -> List[Shape]:
        return []


Layer = Conv2d | ReLU | MaxPool2d | Flatten | FullyConnected | Softmax

LAYER_TYPES: Dict[str, type] = {
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "flatten": Flatten,
    "fc": FullyConnected,
    "softmax": Softmax,
}


@dataclass(frozen=True)
class NetworkSpec:
    """
    layers: ordered layer descriptors, the last one a Softmax over num_classes outputs
    input_shape: (channels, height, width)
    num_classes: M
    dtype: float64 for training and tests, float32 allowed for benchmark builds

    Parameter layout of a ParamVector: layer order, weight before bias, row-major.
    """

    layers: Tuple[Layer, ...]
    input_shape: Shape
    num_classes: int
    name: str = "custom"
    dtype: str = field(default="float64", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.layers) == 0 or not isinstance(self.layers[-1], Softmax):
            raise DimensionError(f"{self.name}: final layer must be Softmax")
        if any(isinstance(layer, Softmax) for layer in self.layers[:-1]):
            raise DimensionError(f"{self.name}: Softmax is only allowed as the final layer")
        if self.output_shapes[-1] != (self.num_classes,):
            raise DimensionError(
                f"{self.name}: network outputs {self.output_shapes[-1]}, expected ({self.num_classes},)"
            )

    @cached_property
    def output_shapes(self) -> List[Shape]:
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    @cached_property
    def param_shapes(self) -> List[List[Shape]]:
        return [layer.param_shapes() for layer in self.layers]

    @cached_property
    def num_params(self) -> int:
        """zeta"""
        return int(sum(np.prod(s) for shapes in self.param_shapes for s in shapes))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        layers = []
        for entry in data["layers"]:
            entry = dict(entry)
            kind = entry.pop("type")
            if kind not in LAYER_TYPES:
                raise DimensionError(f"unknown layer type {kind!r}, expected one of {sorted(LAYER_TYPES)}")
            layers.append(LAYER_TYPES[kind](**entry))
        num_classes = data.get("num_classes")
        if num_classes is None:
            # infer M from the last parameterised layer
            num_classes = next(layer.out_dim for layer in reversed(layers) if isinstance(layer, FullyConnected))
        return cls(
            layers=tuple(layers),
            input_shape=tuple(data["input_shape"]),
            num_classes=int(num_classes),
            name=data.get("name", "custom"),
            dtype=data.get("dtype", "float64"),
        )


def probe_net(size: int = 5, num_classes: int = 10) -> NetworkSpec:
    """Conv3x3 stride 1 -> ReLU -> MaxPool3x3 stride 1 -> FC -> Softmax on a size x size input."""
    pooled = size - 4
    return NetworkSpec(
        layers=(
            Conv2d(1, 1, 3, 1),
            ReLU(),
            MaxPool2d(3, 1),
            Flatten(),
            FullyConnected(pooled * pooled, num_classes),
            Softmax(),
        ),
        input_shape=(1, size, size),
        num_classes=num_classes,
        name="probe-net",
    )


def lenet_lite(input_shape: Shape = (1, 28, 28), num_classes: int = 10) -> NetworkSpec:
    c, h, w = input_shape
    conv1 = Conv2d(c, 8, 3)
    conv2 = Conv2d(8, 16, 3)
    shape = MaxPool2d(2).output_shape(conv1.output_shape(tuple(input_shape)))
    shape = MaxPool2d(2).output_shape(conv2.output_shape(shape))
    return NetworkSpec(
        layers=(
            conv1,
            ReLU(),
            MaxPool2d(2),
            conv2,
            ReLU(),
            MaxPool2d(2),
            Flatten(),
            FullyConnected(int(np.prod(shape)), num_classes),
            Softmax(),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        name="lenet-lite",
    )


def single_fc(
    in_dim: int, num_classes: int, dtype: str = "float64", input_shape: Shape | None = None
) -> NetworkSpec:
    """Flatten -> FC -> Softmax; input_shape defaults to (1, 1, in_dim)."""
    input_shape = (1, 1, in_dim) if input_shape is None else tuple(input_shape)
    if int(np.prod(input_shape)) != in_dim:
        raise DimensionError(f"input shape {input_shape} does not hold {in_dim} features")
    return NetworkSpec(
        layers=(Flatten(), FullyConnected(in_dim, num_classes), Softmax()),
        input_shape=input_shape,
        num_classes=num_classes,
        name="single-fc",
        dtype=dtype,
    )


# every preset is built from (input_shape, num_classes)
PRESETS: Dict[str, Callable[[Shape, int], NetworkSpec]] = {
    "probe-net": lambda input_shape, num_classes: probe_net(input_shape[-1], num_classes),
    "lenet-lite": lenet_lite,
    "single-fc": lambda input_shape, num_classes: single_fc(
        int(np.prod(input_shape)), num_classes, input_shape=input_shape
    ),
}


def check_params(params: ParamVector, spec: NetworkSpec) -> ParamVector:
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise DimensionError(f"{spec.name} expects {spec.num_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NumericError(f"non-finite values in parameters for {spec.name}")
    return params


def flatten_params(spec: NetworkSpec, weights: List[List[np.ndarray]]) -> ParamVector:
    if len(weights) != len(spec.layers):
        raise DimensionError(f"expected weights for {len(spec.layers)} layers, got {len(weights)}")
    pieces = []
    for arrays, shapes in zip(weights, spec.param_shapes):
        if len(arrays) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} arrays for a layer, got {len(arrays)}")
        for array, shape in zip(arrays, shapes):
            array = np.asarray(array)
            if array.shape != shape:
                raise DimensionError(f"weight shape {array.shape} != {shape}")
            pieces.append(array.ravel())
    if not pieces:
        return np.zeros(0, dtype=spec.dtype)
    return np.concatenate(pieces).astype(spec.dtype, copy=False)


def unflatten_params(spec: NetworkSpec, params: ParamVector) -> List[List[np.ndarray]]:
    """Per layer, the list of its arrays (empty for parameter-free layers)."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise DimensionError(f"{spec.name} expects {spec.num_params} parameters, got shape {params.shape}")
    weights = []
    offset = 0
    for shapes in spec.param_shapes:
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(params[offset : offset + size].reshape(shape))
            offset += size
        weights.append(arrays)
    return weights


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for shapes in spec.param_shapes:
        arrays = []
        for i, shape in enumerate(shapes):
            if i == 0:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                arrays.append(rng.uniform(-bound, bound, size=shape))
            else:
                arrays.append(np.zeros(shape))
        weights.append(arrays)
    return flatten_params(spec, weights)
