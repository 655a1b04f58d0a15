"""
Numeric core: the handful of layers the inpainting autoencoder is built from,
each with a forward pass and an explicit reverse-mode (gradient) pass.

Tensors are plain numpy arrays. Convolutional activations use NCHW layout
(batch, channels, rows, columns); fully-connected activations use (batch, features).
Every layer declares the per-sample shape it accepts, so shape errors are caught
at the layer boundary instead of deep inside numpy broadcasting.
"""

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RejectedInputError

Tensor = np.ndarray
Shape = Tuple[int, ...]


class Mode(str, Enum):
    """Forward-pass mode; only batch normalization behaves differently."""

    TRAIN = "train"
    INFER = "infer"


class Layer:
    """
    Base class for a layer.

    A layer owns named trainable parameters (`params`) and named non-trainable
    buffers (`buffers`, e.g. batch-norm running statistics). It is otherwise
    stateless: backward() receives the forward input explicitly rather than
    reading a cache, so a single layer can be checked against finite differences
    without hidden state.

    Abstraction Function:
        AF(kind, input_shape, params, buffers) = the map from a batch of tensors of
            per-sample shape input_shape to a batch of per-sample shape
            output_shape, parameterized by params (and buffers in infer mode)

    Representation Invariant:
        - every extent of input_shape and output_shape is positive
        - every parameter has a gradient of identical shape in backward()
    """

    kind: str = "layer"

    def __init__(self, input_shape: Shape):
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}

    @property
    def output_shape(self) -> Shape:
        return self.input_shape

    def forward(self, x: Tensor, mode: Mode = Mode.INFER) -> Tensor:
        raise NotImplementedError

    def backward(
        self, x: Tensor, grad: Tensor, mode: Mode = Mode.TRAIN
    ) -> Tuple[Tensor, Dict[str, Tensor]]:
        raise NotImplementedError

    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise RejectedInputError(
                f"{self.kind}: expected input of shape (N, {', '.join(map(str, self.input_shape))}),"
                f" got {tuple(x.shape)}"
            )
        if x.shape[0] < 1:
            raise RejectedInputError(f"{self.kind}: empty batch")

    def _check_grad(self, x: Tensor, grad: Tensor) -> None:
        self._check_input(x)
        expected = (x.shape[0],) + self.output_shape
        if tuple(grad.shape) != expected:
            raise RejectedInputError(
                f"{self.kind}: upstream gradient shape {tuple(grad.shape)} != output shape {expected}"
            )

    def _check_rep(self) -> None:
        assert all(d > 0 for d in self.input_shape), "input extents must be positive"
        assert all(d > 0 for d in self.output_shape), "output extents must be positive"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.input_shape} -> {self.output_shape})"


class Conv2d(Layer):
    """
    2-D convolution with zero padding of kernel_size // 2 on each side.

    With stride 1 and an odd kernel the spatial extents are preserved; a larger
    stride shrinks them to (extent + 2*pad - kernel) // stride + 1.
    """

    kind = "conv"

    def __init__(
        self,
        input_shape: Shape,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        super().__init__(input_shape)
        if len(self.input_shape) != 3:
            raise RejectedInputError("conv input shape must be (channels, rows, columns)")
        if out_channels < 1 or kernel_size < 1 or stride < 1:
            raise RejectedInputError("conv channels, kernel size and stride must be positive")
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2

        in_channels = self.input_shape[0]
        fan_in = in_channels * kernel_size * kernel_size
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size))
        self.params["weight"] = weight.astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self._check_rep()

    @property
    def output_shape(self) -> Shape:
        _, h, w = self.input_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def _columns(self, x: Tensor) -> Tensor:
        p, s, k = self.padding, self.stride, self.kernel_size
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (N, C, Ho, Wo, k, k) view onto the padded input
        return sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x: Tensor, mode: Mode = Mode.INFER) -> Tensor:
        self._check_input(x)
        cols = self._columns(x)
        out = np.tensordot(cols, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        k, s, p = self.kernel_size, self.stride, self.padding
        cols = self._columns(x)
        weight = self.params["weight"]

        d_weight = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        d_bias = grad.sum(axis=(0, 2, 3))

        _, ho, wo = self.output_shape
        d_cols = np.tensordot(grad, weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        n, c, h, w = x.shape
        d_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                d_padded[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += d_cols[
                    ..., i, j
                ].transpose(0, 3, 1, 2)
        d_input = d_padded[:, :, p : p + h, p : p + w]
        return d_input, {"weight": d_weight, "bias": d_bias}


class Linear(Layer):
    """Fully-connected layer on (batch, features) tensors."""

    kind = "fully-connected"

    def __init__(
        self,
        input_shape: Shape,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float64,
    ):
        super().__init__(input_shape)
        if len(self.input_shape) != 1:
            raise RejectedInputError("fully-connected input shape must be (features,)")
        if out_features < 1:
            raise RejectedInputError("fully-connected output size must be positive")
        self.out_features = out_features
        fan_in = self.input_shape[0]
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = rng.normal(0.0, np.sqrt(1.0 / fan_in), (out_features, fan_in))
        self.params["weight"] = weight.astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self._check_rep()

    @property
    def output_shape(self) -> Shape:
        return (self.out_features,)

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        return grad @ self.params["weight"], {"weight": grad.T @ x, "bias": grad.sum(axis=0)}


class AvgPool2d(Layer):
    """Non-overlapping average pooling with a square window."""

    kind = "avg-pool"

    def __init__(self, input_shape: Shape, window: int = 2):
        super().__init__(input_shape)
        if len(self.input_shape) != 3:
            raise RejectedInputError("avg-pool input shape must be (channels, rows, columns)")
        _, h, w = self.input_shape
        if window < 1 or h % window or w % window:
            raise RejectedInputError(f"avg-pool window {window} does not divide extents {h}x{w}")
        self.window = window
        self._check_rep()

    @property
    def output_shape(self) -> Shape:
        c, h, w = self.input_shape
        return (c, h // self.window, w // self.window)

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        n = x.shape[0]
        c, ho, wo = self.output_shape
        blocks = x.reshape(n, c, ho, self.window, wo, self.window)
        # one axis at a time, so a window of 2 averages a constant exactly
        return blocks.mean(axis=5).mean(axis=3)

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        p = self.window
        return np.repeat(np.repeat(grad, p, axis=2), p, axis=3) / (p * p), {}


def _interpolation_axis(n_in: int, scale: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Half-pixel-centred source coordinates for upsampling one axis by scale.

    @returns (lower index, upper index, weight of the upper sample) per output position
    """
    dst = np.arange(n_in * scale, dtype=np.float64)
    src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n_in - 1)
    lower = np.floor(src).astype(np.int64)
    upper = np.minimum(lower + 1, n_in - 1)
    return lower, upper, src - lower


def _interpolation_matrix(n_in: int, scale: int) -> np.ndarray:
    lower, upper, weight = _interpolation_axis(n_in, scale)
    matrix = np.zeros((n_in * scale, n_in))
    rows = np.arange(n_in * scale)
    np.add.at(matrix, (rows, lower), 1.0 - weight)
    np.add.at(matrix, (rows, upper), weight)
    return matrix


class BilinearUpsample(Layer):
    """Bilinear upsampling by an integer factor (half-pixel centres, clamped edges)."""

    kind = "bilinear-upsample"

    def __init__(self, input_shape: Shape, scale: int = 2):
        super().__init__(input_shape)
        if len(self.input_shape) != 3:
            raise RejectedInputError("bilinear-upsample input shape must be (channels, rows, columns)")
        if scale < 1:
            raise RejectedInputError("upsample scale must be positive")
        self.scale = scale
        _, h, w = self.input_shape
        self._rows = _interpolation_axis(h, scale)
        self._cols = _interpolation_axis(w, scale)
        self._row_matrix = _interpolation_matrix(h, scale)
        self._col_matrix = _interpolation_matrix(w, scale)
        self._check_rep()

    @property
    def output_shape(self) -> Shape:
        c, h, w = self.input_shape
        return (c, h * self.scale, w * self.scale)

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        lower, upper, weight = self._rows
        a, b = x[:, :, lower, :], x[:, :, upper, :]
        # a + w * (b - a) reproduces constants exactly
        x = a + weight.astype(x.dtype)[None, None, :, None] * (b - a)
        lower, upper, weight = self._cols
        a, b = x[:, :, :, lower], x[:, :, :, upper]
        return a + weight.astype(x.dtype)[None, None, None, :] * (b - a)

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        g = np.matmul(grad, self._col_matrix.astype(grad.dtype))
        g = np.matmul(self._row_matrix.T.astype(grad.dtype), g)
        return g, {}


class BatchNorm(Layer):
    """
    Batch normalization over every axis except the channel axis (axis 1).

    Train mode normalizes with the batch's statistics and folds them into the
    running statistics (running <- momentum * running + (1 - momentum) * batch);
    infer mode normalizes with the running statistics and is a pure function.
    """

    kind = "batch-norm"

    def __init__(self, input_shape: Shape, eps: float = 1e-5, momentum: float = 0.9, dtype=np.float64):
        super().__init__(input_shape)
        if eps <= 0:
            raise RejectedInputError("batch-norm epsilon must be positive")
        if not 0.0 <= momentum < 1.0:
            raise RejectedInputError("batch-norm momentum must lie in [0, 1)")
        self.eps = eps
        self.momentum = momentum
        channels = self.input_shape[0]
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._check_rep()

    def _axes(self, x: Tensor) -> Tuple[int, ...]:
        return (0,) + tuple(range(2, x.ndim))

    def _broadcast(self, v: Tensor, x: Tensor) -> Tensor:
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def normalize(self, x: Tensor, mode: Mode) -> Tensor:
        """@returns the normalized input before the affine (gamma, beta) stage"""
        if mode == Mode.TRAIN:
            axes = self._axes(x)
            mean, var = x.mean(axis=axes), x.var(axis=axes)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        return (x - self._broadcast(mean, x)) / np.sqrt(self._broadcast(var, x) + self.eps)

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        x_hat = self.normalize(x, mode)
        if mode == Mode.TRAIN:
            axes = self._axes(x)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * x.mean(axis=axes)
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * x.var(axis=axes)
        gamma, beta = self.params["gamma"], self.params["beta"]
        return self._broadcast(gamma, x) * x_hat + self._broadcast(beta, x)

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        axes = self._axes(x)
        x_hat = self.normalize(x, mode)
        gamma = self._broadcast(self.params["gamma"], x)
        param_grads = {"gamma": (grad * x_hat).sum(axis=axes), "beta": grad.sum(axis=axes)}
        d_hat = grad * gamma
        if mode == Mode.TRAIN:
            count = x.size // x.shape[1]
            inv_std = 1.0 / np.sqrt(self._broadcast(x.var(axis=axes), x) + self.eps)
            d_input = (
                inv_std
                / count
                * (
                    count * d_hat
                    - d_hat.sum(axis=axes, keepdims=True)
                    - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            d_input = d_hat / np.sqrt(self._broadcast(self.buffers["running_var"], x) + self.eps)
        return d_input, param_grads


class Elu(Layer):
    kind = "elu"

    def __init__(self, input_shape: Shape, alpha: float = 1.0):
        super().__init__(input_shape)
        self.alpha = alpha

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        return np.where(x > 0, x, self.alpha * np.expm1(np.minimum(x, 0)))

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        return grad * np.where(x > 0, 1.0, self.alpha * np.exp(np.minimum(x, 0))), {}


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        return np.tanh(x)

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        return grad * (1.0 - np.tanh(x) ** 2), {}


class Reshape(Layer):
    """Per-sample reshape, used between convolutional and fully-connected stages."""

    kind = "reshape"

    def __init__(self, input_shape: Shape, output_shape: Shape):
        super().__init__(input_shape)
        self._output_shape = tuple(int(d) for d in output_shape)
        if int(np.prod(self._output_shape)) != int(np.prod(self.input_shape)):
            raise RejectedInputError(f"cannot reshape {self.input_shape} to {self._output_shape}")

    @property
    def output_shape(self) -> Shape:
        return self._output_shape

    def forward(self, x, mode=Mode.INFER):
        self._check_input(x)
        return x.reshape((x.shape[0],) + self._output_shape)

    def backward(self, x, grad, mode=Mode.TRAIN):
        self._check_grad(x, grad)
        return grad.reshape(x.shape), {}


def forward(layer: Layer, x: Tensor, mode: Mode = Mode.INFER) -> Tensor:
    """
    Evaluate one layer.

    @param layer: layer to evaluate
    @param x: batch whose per-sample shape equals layer.input_shape
    @param mode: train (batch statistics) or infer (running statistics)
    @returns batch of per-sample shape layer.output_shape
    @raises RejectedInputError: if x has the wrong shape
    """
    return layer.forward(x, mode)


def backward(
    layer: Layer, x: Tensor, upstream_grad: Tensor, mode: Mode = Mode.TRAIN
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Reverse-mode pass of one layer at input x.

    @returns (gradient w.r.t. x, gradients w.r.t. each named parameter)
    @raises RejectedInputError: if upstream_grad does not have the forward output's shape
    """
    return layer.backward(x, upstream_grad, mode)


def l1_loss(prediction: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    """
    Mean absolute error and its (sub)gradient with respect to prediction.

    The gradient is sign(prediction - target) / element count, 0 at exact ties.

    @raises RejectedInputError: if the shapes differ
    """
    if prediction.shape != target.shape:
        raise RejectedInputError(f"l1_loss shapes differ: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


class Sequential:
    """
    An ordered chain of layers whose shapes line up.

    Parameters and buffers are addressed as "<prefix><index>.<name>".
    """

    def __init__(self, layers: List[Layer], prefix: str = ""):
        if not layers:
            raise RejectedInputError("a layer chain needs at least one layer")
        for before, after in zip(layers, layers[1:]):
            if before.output_shape != after.input_shape:
                raise RejectedInputError(
                    f"layer shapes do not chain: {before!r} feeds {after!r}"
                )
        self.layers = layers
        self.prefix = prefix

    @property
    def input_shape(self) -> Shape:
        return self.layers[0].input_shape

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].output_shape

    def forward(self, x: Tensor, mode: Mode = Mode.INFER) -> Tuple[Tensor, List[Tensor]]:
        """@returns (output, the input seen by each layer, for backward())"""
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = layer.forward(x, mode)
        return x, inputs

    def backward(
        self, inputs: List[Tensor], grad: Tensor, mode: Mode = Mode.TRAIN
    ) -> Tuple[Tensor, Dict[str, Tensor]]:
        grads: Dict[str, Tensor] = {}
        for index in reversed(range(len(self.layers))):
            grad, layer_grads = self.layers[index].backward(inputs[index], grad, mode)
            for name, g in layer_grads.items():
                grads[f"{self.prefix}{index}.{name}"] = g
        return grad, grads

    def named_params(self) -> Dict[str, Tensor]:
        return {
            f"{self.prefix}{i}.{name}": value
            for i, layer in enumerate(self.layers)
            for name, value in layer.params.items()
        }

    def named_buffers(self) -> Dict[str, Tensor]:
        return {
            f"{self.prefix}{i}.{name}": value
            for i, layer in enumerate(self.layers)
            for name, value in layer.buffers.items()
        }

    def assign(self, name: str, value: Tensor) -> None:
        """Replace the parameter or buffer called name (shape must match)."""
        index_text, _, local = name[len(self.prefix) :].partition(".")
        layer = self.layers[int(index_text)]
        store = layer.params if local in layer.params else layer.buffers
        if local not in store:
            raise KeyError(name)
        if store[local].shape != value.shape:
            raise RejectedInputError(f"{name}: shape {value.shape} != {store[local].shape}")
        store[local] = value.astype(store[local].dtype)

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)
