"""Minimal neural-network engine.

Networks are fixed stacks of dense, convolution and flatten layers evaluated
on float64 numpy arrays whose first axis is the batch. A recorded forward pass
returns a tape that ``backward`` consumes exactly once to produce gradients
with respect to every parameter and to the network input.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .const import (
    DEFAULT_ADAM_BETA1,
    DEFAULT_ADAM_BETA2,
    DEFAULT_ADAM_EPSILON,
    DEFAULT_LEARNING_RATE,
    DEFAULT_OMEGA_0,
    PARAMS_MAGIC,
    PARAMS_VERSION,
)
from .exceptions import CheckpointError, NonFiniteError, ShapeMismatchError, TapeReuseError

_LOGGER = logging.getLogger(__name__)

ACT_SINE = "sine"
ACT_RELU = "relu"
ACT_IDENTITY = "identity"
ACTIVATIONS = (ACT_SINE, ACT_RELU, ACT_IDENTITY)


@dataclass(frozen=True, kw_only=True)
class Dense:
    """Fully connected layer; weights are stored (in_features, out_features)."""

    in_features: int
    out_features: int
    activation: str = ACT_IDENTITY
    omega_0: float = DEFAULT_OMEGA_0


@dataclass(frozen=True, kw_only=True)
class Conv2D:
    """Stride-1 same-padded convolution over NHWC arrays.

    Weights are stored (kernel, kernel, in_channels, out_channels).
    """

    in_channels: int
    out_channels: int
    kernel: int = 3
    activation: str = ACT_RELU
    omega_0: float = DEFAULT_OMEGA_0


@dataclass(frozen=True, kw_only=True)
class Flatten:
    """Collapse every non-batch axis into one."""


Layer = Union[Dense, Conv2D, Flatten]


def _layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeMismatchError(
                f"dense layer expects ({layer.in_features},) input, got {shape}"
            )
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if layer.kernel < 1 or layer.kernel % 2 == 0:
            raise ShapeMismatchError(f"conv kernel must be odd, got {layer.kernel}")
        if len(shape) != 3 or shape[2] != layer.in_channels:
            raise ShapeMismatchError(
                f"conv layer expects (H, W, {layer.in_channels}) input, got {shape}"
            )
        return (shape[0], shape[1], layer.out_channels)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ShapeMismatchError(f"unknown layer {layer!r}")


@dataclass(frozen=True, kw_only=True)
class NetworkSpec:
    """Ordered layer stack plus the per-sample input shape it accepts."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        shapes = [tuple(int(n) for n in self.input_shape)]
        for layer in self.layers:
            if not isinstance(layer, Flatten) and layer.activation not in ACTIVATIONS:
                raise ShapeMismatchError(f"unknown activation {layer.activation!r}")
            shapes.append(_layer_output_shape(layer, shapes[-1]))
        object.__setattr__(self, "input_shape", shapes[0])
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def parametric_layers(self) -> list[Dense | Conv2D]:
        return [layer for layer in self.layers if not isinstance(layer, Flatten)]


def mlp_spec(
    in_features: int,
    out_features: int,
    *,
    width: int,
    depth: int,
    activation: str = ACT_SINE,
    omega_0: float = DEFAULT_OMEGA_0,
) -> NetworkSpec:
    """Build ``depth`` hidden Dense layers of ``width`` units and a linear head."""
    layers: list[Layer] = []
    features = in_features
    for _ in range(depth):
        layers.append(
            Dense(in_features=features, out_features=width, activation=activation, omega_0=omega_0)
        )
        features = width
    layers.append(Dense(in_features=features, out_features=out_features))
    return NetworkSpec(input_shape=(in_features,), layers=tuple(layers))


def conv_stack_spec(
    height: int,
    width: int,
    in_channels: int,
    *,
    channels: int,
    depth: int,
    kernel: int = 3,
    activation: str = ACT_RELU,
) -> NetworkSpec:
    """Build ``depth`` same-padded Conv2D layers of ``channels`` each."""
    layers: list[Layer] = []
    features = in_channels
    for _ in range(depth):
        layers.append(
            Conv2D(
                in_channels=features,
                out_channels=channels,
                kernel=kernel,
                activation=activation,
            )
        )
        features = channels
    return NetworkSpec(input_shape=(height, width, in_channels), layers=tuple(layers))


def param_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Return the shapes of the flat parameter list: weight then bias per layer."""
    shapes: list[tuple[int, ...]] = []
    for layer in spec.parametric_layers:
        if isinstance(layer, Dense):
            shapes.append((layer.in_features, layer.out_features))
            shapes.append((layer.out_features,))
        else:
            shapes.append((layer.kernel, layer.kernel, layer.in_channels, layer.out_channels))
            shapes.append((layer.out_channels,))
    return shapes


def param_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(spec)))


def flatten_params(params: Sequence[np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.ravel(p) for p in params])


def unflatten_params(spec: NetworkSpec, flat: np.ndarray) -> list[np.ndarray]:
    """Split a flat vector into the parameter list of ``spec``.

    Raises:
        ShapeMismatchError: If the vector length differs from the parameter count.
    """
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1 or flat.size != param_count(spec):
        raise ShapeMismatchError(
            f"expected {param_count(spec)} parameters, got array of shape {flat.shape}"
        )
    params = []
    offset = 0
    for shape in param_shapes(spec):
        size = int(np.prod(shape))
        params.append(flat[offset : offset + size].reshape(shape))
        offset += size
    return params


def check_params(spec: NetworkSpec, params: Sequence[np.ndarray]) -> None:
    expected = param_shapes(spec)
    actual = [tuple(np.shape(p)) for p in params]
    if actual != expected:
        raise ShapeMismatchError(f"parameter shapes {actual} do not match {expected}")


def init_params(spec: NetworkSpec, seed: int) -> list[np.ndarray]:
    """Draw initial parameters.

    Sine layers follow the sine-network convention: the first layer draws
    weights from U(-1/fan_in, 1/fan_in), later sine layers from
    U(-sqrt(6/fan_in)/omega_0, sqrt(6/fan_in)/omega_0). ReLU and identity
    layers use U(-sqrt(6/fan_in), sqrt(6/fan_in)). Biases draw from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    params: list[np.ndarray] = []
    for index, layer in enumerate(spec.parametric_layers):
        if isinstance(layer, Dense):
            fan_in = layer.in_features
            weight_shape: tuple[int, ...] = (layer.in_features, layer.out_features)
            bias_size = layer.out_features
        else:
            fan_in = layer.kernel * layer.kernel * layer.in_channels
            weight_shape = (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels)
            bias_size = layer.out_channels

        if layer.activation == ACT_SINE:
            bound = 1.0 / fan_in if index == 0 else math.sqrt(6.0 / fan_in) / layer.omega_0
        else:
            bound = math.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=weight_shape))
        bias_bound = 1.0 / math.sqrt(fan_in)
        params.append(rng.uniform(-bias_bound, bias_bound, size=bias_size))
    return params


def _activate(layer: Dense | Conv2D, z: np.ndarray) -> np.ndarray:
    if layer.activation == ACT_SINE:
        return np.sin(layer.omega_0 * z)
    if layer.activation == ACT_RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(layer: Dense | Conv2D, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if layer.activation == ACT_SINE:
        return grad * layer.omega_0 * np.cos(layer.omega_0 * z)
    if layer.activation == ACT_RELU:
        return grad * (z > 0.0)
    return grad


def _conv_windows(x: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # (batch, H, W, C, k, k)
    return sliding_window_view(padded, (kernel, kernel), axis=(1, 2))


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite value in {where}")


@dataclass(kw_only=True)
class Tape:
    """Intermediates of one recorded forward pass."""

    spec: NetworkSpec
    params: list[np.ndarray]
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray | None]
    output_shape: tuple[int, ...]
    consumed: bool = False


def forward(
    spec: NetworkSpec,
    params: Sequence[np.ndarray],
    x: np.ndarray,
    record: bool = False,
) -> tuple[np.ndarray, Tape | None]:
    """Evaluate the network on a batch.

    Args:
        spec: The network layout.
        params: Parameter list matching ``param_shapes(spec)``.
        x: Input of shape (batch, *spec.input_shape).
        record: Keep intermediates for ``backward``.

    Returns:
        Tuple of (output, tape); the tape is None unless ``record`` is set.

    Raises:
        ShapeMismatchError: If the input or parameters do not fit the network.
        NonFiniteError: If a NaN or infinity appears.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(
            f"network expects input (batch, {', '.join(map(str, spec.input_shape))}), "
            f"got {x.shape}"
        )
    check_params(spec, params)
    _check_finite(x, "network input")

    inputs: list[np.ndarray] = []
    pre_activations: list[np.ndarray | None] = []
    offset = 0
    for index, layer in enumerate(spec.layers):
        inputs.append(x)
        if isinstance(layer, Flatten):
            pre_activations.append(None)
            x = x.reshape(x.shape[0], -1)
            continue
        weight, bias = params[offset], params[offset + 1]
        offset += 2
        if isinstance(layer, Dense):
            z = x @ weight + bias
        else:
            z = np.einsum("bhwcij,ijco->bhwo", _conv_windows(x, layer.kernel), weight) + bias
        pre_activations.append(z)
        x = _activate(layer, z)
        _check_finite(x, f"layer {index}")

    tape = None
    if record:
        tape = Tape(
            spec=spec,
            params=list(params),
            inputs=inputs,
            pre_activations=pre_activations,
            output_shape=x.shape,
        )
    return x, tape


def backward(tape: Tape, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Back-propagate ``output_grad`` through a recorded forward pass.

    Returns:
        Tuple of (parameter gradients in ``param_shapes`` order, input gradient).

    Raises:
        TapeReuseError: If the tape was already consumed.
        ShapeMismatchError: If ``output_grad`` does not match the forward output.
    """
    if tape.consumed:
        raise TapeReuseError("forward tape has already been consumed by backward")
    grad = np.asarray(output_grad, dtype=float)
    if grad.shape != tape.output_shape:
        raise ShapeMismatchError(
            f"output gradient shape {grad.shape} does not match output {tape.output_shape}"
        )
    tape.consumed = True

    param_grads: list[np.ndarray] = [np.zeros(0)] * len(tape.params)
    offset = len(tape.params)
    for layer, x, z in zip(
        reversed(tape.spec.layers), reversed(tape.inputs), reversed(tape.pre_activations)
    ):
        if isinstance(layer, Flatten):
            grad = grad.reshape(x.shape)
            continue
        offset -= 2
        weight = tape.params[offset]
        grad_z = _activation_grad(layer, z, grad)
        if isinstance(layer, Dense):
            param_grads[offset] = x.T @ grad_z
            param_grads[offset + 1] = grad_z.sum(axis=0)
            grad = grad_z @ weight.T
        else:
            kernel = layer.kernel
            pad = kernel // 2
            windows = _conv_windows(x, kernel)
            param_grads[offset] = np.einsum("bhwcij,bhwo->ijco", windows, grad_z)
            param_grads[offset + 1] = grad_z.sum(axis=(0, 1, 2))
            height, width = x.shape[1], x.shape[2]
            padded = np.zeros((x.shape[0], height + 2 * pad, width + 2 * pad, x.shape[3]))
            for i in range(kernel):
                for j in range(kernel):
                    padded[:, i : i + height, j : j + width, :] += grad_z @ weight[i, j].T
            grad = padded[:, pad : pad + height, pad : pad + width, :]
    return param_grads, grad


def l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error."""
    _check_same_shape(pred, target)
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(target))))


def l1_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same_shape(pred, target)
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return np.sign(diff) / diff.size


def l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error."""
    _check_same_shape(pred, target)
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def l2_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same_shape(pred, target)
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return 2.0 * diff / diff.size


def kl_std_normal(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL divergence of N(mu, exp(log_var)) from N(0, I), averaged over the batch."""
    _check_same_shape(mu, log_var)
    mu = np.asarray(mu, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    per_sample = 0.5 * np.sum(mu**2 + np.exp(log_var) - log_var - 1.0, axis=-1)
    return float(np.mean(per_sample))


def kl_std_normal_grad(mu: np.ndarray, log_var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_same_shape(mu, log_var)
    mu = np.asarray(mu, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    batch = mu.shape[0] if mu.ndim > 1 else 1
    return mu / batch, 0.5 * (np.exp(log_var) - 1.0) / batch


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"shape {np.shape(a)} does not match {np.shape(b)}")


@dataclass(kw_only=True)
class AdamState:
    """Adam moments and hyperparameters for one parameter list."""

    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = DEFAULT_ADAM_BETA1
    beta2: float = DEFAULT_ADAM_BETA2
    epsilon: float = DEFAULT_ADAM_EPSILON
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs: float) -> AdamState:
        return cls(
            m=[np.zeros_like(p, dtype=float) for p in params],
            v=[np.zeros_like(p, dtype=float) for p in params],
            **kwargs,  # type: ignore[arg-type]
        )


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Apply one bias-corrected Adam update.

    The moments in ``state`` are updated in place; new parameter arrays are
    returned and ``params`` is left untouched.

    Raises:
        ShapeMismatchError: If parameters, gradients and moments disagree.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moments"
        )
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ShapeMismatchError(
                f"parameter {np.shape(p)}, gradient {np.shape(g)}, moment {np.shape(m)}"
            )

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = []
    for index, (p, g) in enumerate(zip(params, grads)):
        state.m[index] = state.beta1 * state.m[index] + (1.0 - state.beta1) * g
        state.v[index] = state.beta2 * state.v[index] + (1.0 - state.beta2) * g * g
        m_hat = state.m[index] / correction1
        v_hat = state.v[index] / correction2
        updated.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return updated


def dump_arrays(handle: BinaryIO, arrays: Sequence[np.ndarray]) -> None:
    """Write shape-tagged little-endian float64 arrays to a binary stream."""
    handle.write(f"arrays {len(arrays)}\n".encode("ascii"))
    for array in arrays:
        data = np.ascontiguousarray(array, dtype="<f8")
        handle.write(" ".join(["shape", *map(str, data.shape)]).encode("ascii") + b"\n")
        handle.write(data.tobytes())


def load_arrays(handle: BinaryIO) -> list[np.ndarray]:
    """Read arrays written by ``dump_arrays``.

    Raises:
        CheckpointError: If the stream is truncated or malformed.
    """
    header = handle.readline().decode("ascii", errors="replace").split()
    if len(header) != 2 or header[0] != "arrays" or not header[1].isdigit():
        raise CheckpointError(f"expected array count, got {' '.join(header)!r}")
    arrays = []
    for _ in range(int(header[1])):
        tokens = handle.readline().decode("ascii", errors="replace").split()
        if not tokens or tokens[0] != "shape" or not all(t.isdigit() for t in tokens[1:]):
            raise CheckpointError(f"expected array shape, got {' '.join(tokens)!r}")
        shape = tuple(int(t) for t in tokens[1:])
        size = int(np.prod(shape))
        data = handle.read(8 * size)
        if len(data) != 8 * size:
            raise CheckpointError("array data truncated")
        arrays.append(np.frombuffer(data, dtype="<f8").astype(float).reshape(shape))
    return arrays


def write_header(handle: BinaryIO, magic: str, version: int) -> None:
    handle.write(f"{magic} {version}\n".encode("ascii"))


def read_header(handle: BinaryIO, magic: str, version: int) -> None:
    """Consume and check a "<magic> <version>" line.

    Raises:
        CheckpointError: On a foreign or newer file.
    """
    tokens = handle.readline().decode("ascii", errors="replace").split()
    if len(tokens) != 2 or tokens[0] != magic:
        raise CheckpointError(f"not a {magic} file")
    if tokens[1] != str(version):
        raise CheckpointError(f"unsupported {magic} version {tokens[1]}")


def save_params(params: Sequence[np.ndarray], path: str | Path) -> None:
    """Write a parameter checkpoint."""
    with open(path, "wb") as handle:
        write_header(handle, PARAMS_MAGIC, PARAMS_VERSION)
        dump_arrays(handle, params)


def load_params(path: str | Path) -> list[np.ndarray]:
    """Read a parameter checkpoint written by ``save_params``."""
    with open(path, "rb") as handle:
        read_header(handle, PARAMS_MAGIC, PARAMS_VERSION)
        return load_arrays(handle)
