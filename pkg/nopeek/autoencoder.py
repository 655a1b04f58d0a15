"""
Inpainting autoencoder: architecture description, the encoder/decoder network,
immutable checkpoints, and the inference operations built on them.

The encoder is a stack of conv -> batch-norm -> elu -> 2x average-pool stages
followed by a fully-connected layer producing the code. The decoder maps the
code through a fully-connected layer to a small feature map and then through
2x bilinear-upsample -> conv -> batch-norm -> elu stages, ending in a conv and
tanh so every output lies in [-1, 1]. The encoder always has more parameters
than the decoder.
"""

from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import RejectedInputError
from .layers import (
    AvgPool2d,
    BatchNorm,
    BilinearUpsample,
    Conv2d,
    Elu,
    Layer,
    Linear,
    Mode,
    Reshape,
    Sequential,
    Tanh,
    Tensor,
)
from .masking import Box, apply_box_mask

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """
    Architecture of the encoder/decoder pair.

    Immutable.

    Representation Invariant:
        - rows and columns divisible by 2 ** len(encoder_channels) and 2 ** len(decoder_channels)
        - encoder parameter count > decoder parameter count
        - hidden_activation == "elu" and output_activation == "tanh"
    """

    input_extents: Tuple[int, int, int] = (64, 64, 1)
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: Tuple[int, ...] = (64, 32, 16)
    decoder_base_channels: int = 32
    code_dim: int = 64
    kernel_size: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    hidden_activation: str = "elu"
    output_activation: str = "tanh"
    dtype: str = "float32"

    def __post_init__(self):
        # accept lists from YAML / JSON
        object.__setattr__(self, "input_extents", tuple(int(v) for v in self.input_extents))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))

        if len(self.input_extents) != 3 or min(self.input_extents) < 1:
            raise RejectedInputError(f"input extents must be (rows, columns, channels): {self.input_extents}")
        if not self.encoder_channels or not self.decoder_channels:
            raise RejectedInputError("encoder and decoder need at least one stage each")
        if min(self.encoder_channels + self.decoder_channels) < 1 or self.decoder_base_channels < 1:
            raise RejectedInputError("channel counts must be positive")
        if self.code_dim < 1:
            raise RejectedInputError("code dimension must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise RejectedInputError("kernel size must be a positive odd number")
        if self.hidden_activation != "elu" or self.output_activation != "tanh":
            raise RejectedInputError("hidden activation must be elu and the output activation tanh")
        if self.dtype not in ("float32", "float64"):
            raise RejectedInputError(f"unsupported dtype {self.dtype}")
        rows, cols, _ = self.input_extents
        for stages in (len(self.encoder_channels), len(self.decoder_channels)):
            if rows % 2**stages or cols % 2**stages:
                raise RejectedInputError(
                    f"extents {rows}x{cols} are not divisible by 2**{stages}"
                )
        encoder, decoder = self.parameter_counts()
        if encoder <= decoder:
            raise RejectedInputError(
                f"encoder must have more parameters than decoder ({encoder} <= {decoder})"
            )

    def parameter_counts(self) -> Tuple[int, int]:
        """@returns (encoder parameter count, decoder parameter count)"""
        rows, cols, channels = self.input_extents
        k2 = self.kernel_size**2

        encoder, c_in = 0, channels
        for c in self.encoder_channels:
            encoder += c_in * c * k2 + c + 2 * c
            c_in = c
        shrink = 2 ** len(self.encoder_channels)
        encoder += c_in * (rows // shrink) * (cols // shrink) * self.code_dim + self.code_dim

        grow = 2 ** len(self.decoder_channels)
        base = self.decoder_base_channels * (rows // grow) * (cols // grow)
        decoder, c_in = self.code_dim * base + base, self.decoder_base_channels
        for c in self.decoder_channels:
            decoder += c_in * c * k2 + c + 2 * c
            c_in = c
        decoder += c_in * channels * k2 + channels
        return encoder, decoder

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("input_extents", "encoder_channels", "decoder_channels"):
            data[key] = list(data[key])
        return data

    @staticmethod
    def from_dict(data: Mapping) -> "ArchConfig":
        known = set(ArchConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise RejectedInputError(f"unknown architecture keys: {sorted(unknown)}")
        return ArchConfig(**dict(data))


class Autoencoder:
    """
    Mutable encoder/decoder network used for training and inference.

    Abstraction Function:
        AF(arch, encoder, decoder) = the pair of maps E: images -> codes and
            D: codes -> images described by arch, with the current weights

    Representation Invariant:
        - encoder input shape == (C, H, W) of arch.input_extents
        - encoder output shape == decoder input shape == (code_dim,)
        - decoder output shape == encoder input shape

    Safety from Representation Exposure:
        - named_params()/named_buffers() return fresh dicts; callers replace
          weights only through assign()
    """

    def __init__(self, arch: ArchConfig, rng: Optional[np.random.Generator] = None):
        self.arch = arch
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = np.dtype(arch.dtype)
        rows, cols, channels = arch.input_extents
        k = arch.kernel_size

        layers: list[Layer] = []
        shape: Tuple[int, ...] = (channels, rows, cols)
        for c in arch.encoder_channels:
            layers.append(Conv2d(shape, c, k, rng=rng, dtype=dtype))
            layers.append(BatchNorm(layers[-1].output_shape, arch.bn_eps, arch.bn_momentum, dtype=dtype))
            layers.append(Elu(layers[-1].output_shape))
            layers.append(AvgPool2d(layers[-1].output_shape, 2))
            shape = layers[-1].output_shape
        layers.append(Reshape(shape, (int(np.prod(shape)),)))
        layers.append(Linear(layers[-1].output_shape, arch.code_dim, rng=rng, dtype=dtype))
        self.encoder = Sequential(layers, prefix="encoder.")

        grow = 2 ** len(arch.decoder_channels)
        base_shape = (arch.decoder_base_channels, rows // grow, cols // grow)
        layers = [Linear((arch.code_dim,), int(np.prod(base_shape)), rng=rng, dtype=dtype)]
        layers.append(Elu(layers[-1].output_shape))
        layers.append(Reshape(layers[-1].output_shape, base_shape))
        shape = base_shape
        for c in arch.decoder_channels:
            layers.append(BilinearUpsample(shape, 2))
            layers.append(Conv2d(layers[-1].output_shape, c, k, rng=rng, dtype=dtype))
            layers.append(BatchNorm(layers[-1].output_shape, arch.bn_eps, arch.bn_momentum, dtype=dtype))
            layers.append(Elu(layers[-1].output_shape))
            shape = layers[-1].output_shape
        layers.append(Conv2d(shape, channels, k, rng=rng, dtype=dtype))
        layers.append(Tanh(layers[-1].output_shape))
        self.decoder = Sequential(layers, prefix="decoder.")
        self._check_rep()

    def encode_batch(self, x: Tensor, mode: Mode = Mode.INFER) -> Tensor:
        """@param x: (N, C, H, W) batch  @returns (N, code_dim) codes"""
        return self.encoder.forward(x.astype(self.arch.dtype, copy=False), mode)[0]

    def decode_batch(self, codes: Tensor, mode: Mode = Mode.INFER) -> Tensor:
        """@param codes: (N, code_dim)  @returns (N, C, H, W) images in [-1, 1]"""
        return self.decoder.forward(codes.astype(self.arch.dtype, copy=False), mode)[0]

    def forward_train(self, x: Tensor) -> Tuple[Tensor, Tuple[list, list]]:
        """Train-mode reconstruction; @returns (output, caches for backward_train)"""
        codes, encoder_inputs = self.encoder.forward(x.astype(self.arch.dtype, copy=False), Mode.TRAIN)
        output, decoder_inputs = self.decoder.forward(codes, Mode.TRAIN)
        return output, (encoder_inputs, decoder_inputs)

    def backward_train(self, caches: Tuple[list, list], grad: Tensor) -> Dict[str, Tensor]:
        encoder_inputs, decoder_inputs = caches
        grad, grads = self.decoder.backward(decoder_inputs, grad.astype(self.arch.dtype, copy=False))
        _, encoder_grads = self.encoder.backward(encoder_inputs, grad)
        grads.update(encoder_grads)
        return grads

    def named_params(self) -> Dict[str, Tensor]:
        return {**self.encoder.named_params(), **self.decoder.named_params()}

    def named_buffers(self) -> Dict[str, Tensor]:
        return {**self.encoder.named_buffers(), **self.decoder.named_buffers()}

    def state(self) -> Dict[str, Tensor]:
        """@returns every parameter and buffer by name"""
        return {**self.named_params(), **self.named_buffers()}

    def assign(self, values: Mapping[str, Tensor]) -> None:
        for name, value in values.items():
            network = self.encoder if name.startswith(self.encoder.prefix) else self.decoder
            network.assign(name, value)

    def _check_rep(self) -> None:
        rows, cols, channels = self.arch.input_extents
        assert self.encoder.input_shape == (channels, rows, cols)
        assert self.encoder.output_shape == (self.arch.code_dim,)
        assert self.decoder.input_shape == (self.arch.code_dim,)
        assert self.decoder.output_shape == self.encoder.input_shape


@dataclass(frozen=True)
class TrainingMetadata:
    epochs: int = 0
    seed: int = 0
    loss_history: Tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "seed": self.seed, "loss_history": list(self.loss_history)}

    @staticmethod
    def from_dict(data: Mapping) -> "TrainingMetadata":
        return TrainingMetadata(int(data["epochs"]), int(data["seed"]), tuple(float(v) for v in data["loss_history"]))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """
    Trained weights plus the architecture that gives them meaning.

    Immutable and shareable across threads; blobs are stored as 32-bit floats
    and must not be modified by callers.

    Representation Invariant:
        - blobs holds exactly the parameter and buffer names of Autoencoder(arch)
        - each blob has the shape of the corresponding network tensor
    """

    arch: ArchConfig
    blobs: Mapping[str, np.ndarray]
    metadata: TrainingMetadata = field(default_factory=TrainingMetadata)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def __post_init__(self):
        frozen = {}
        for name, value in self.blobs.items():
            blob = np.array(value, dtype="<f4")
            blob.setflags(write=False)
            frozen[name] = blob
        object.__setattr__(self, "blobs", dict(sorted(frozen.items())))
        self._check_rep()

    @staticmethod
    def from_network(network: Autoencoder, metadata: TrainingMetadata = TrainingMetadata()) -> "Checkpoint":
        return Checkpoint(network.arch, network.state(), metadata)

    @cached_property
    def network(self) -> Autoencoder:
        """Inference network carrying these weights (built once, never trained)."""
        network = Autoencoder(self.arch)
        network.assign(self.blobs)
        return network

    def identical(self, other: "Checkpoint") -> bool:
        """@returns True iff both checkpoints hold bit-identical content"""
        return (
            self.arch == other.arch
            and self.metadata == other.metadata
            and self.format_version == other.format_version
            and self.blobs.keys() == other.blobs.keys()
            and all(self.blobs[k].tobytes() == other.blobs[k].tobytes() for k in self.blobs)
        )

    def _check_rep(self) -> None:
        reference = expected_shapes(self.arch)
        assert set(self.blobs) == set(reference), (
            f"checkpoint names differ from the architecture: {sorted(set(self.blobs) ^ set(reference))}"
        )
        for name, shape in reference.items():
            assert self.blobs[name].shape == shape, f"{name}: shape {self.blobs[name].shape} != {shape}"


@lru_cache(maxsize=8)
def expected_shapes(arch: ArchConfig) -> Dict[str, Tuple[int, ...]]:
    """@returns the name -> shape map of every parameter and buffer of the architecture"""
    return {name: value.shape for name, value in Autoencoder(arch).state().items()}


def _to_batch(image: np.ndarray, arch: ArchConfig) -> Tensor:
    if image.shape != tuple(arch.input_extents):
        raise RejectedInputError(f"image extents {image.shape} != model extents {tuple(arch.input_extents)}")
    return image.transpose(2, 0, 1)[None]


def _to_images(batch: Tensor) -> np.ndarray:
    return batch.transpose(0, 2, 3, 1)


def encode(ckpt: Checkpoint, image: np.ndarray) -> np.ndarray:
    """
    Code of one image.

    @param image: (rows, columns, channels) array matching the checkpoint's extents
    @returns vector of length code_dim
    @raises RejectedInputError: if the extents do not match
    """
    return ckpt.network.encode_batch(_to_batch(image, ckpt.arch))[0]


def decode(ckpt: Checkpoint, code: np.ndarray) -> np.ndarray:
    """
    Image for one code.

    @returns (rows, columns, channels) array with values in [-1, 1]
    @raises RejectedInputError: if the code length does not match
    """
    code = np.asarray(code)
    if code.shape != (ckpt.arch.code_dim,):
        raise RejectedInputError(f"code length {code.shape} != code dimension {ckpt.arch.code_dim}")
    return _to_images(ckpt.network.decode_batch(code[None]))[0]


def reconstruct_batch(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    """D(E(Q)) for a (N, rows, columns, channels) stack of images."""
    if images.ndim != 4 or images.shape[1:] != tuple(ckpt.arch.input_extents):
        raise RejectedInputError(f"image stack shape {images.shape} does not match the model")
    network = ckpt.network
    return _to_images(network.decode_batch(network.encode_batch(images.transpose(0, 3, 1, 2))))


def encode_batch(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    """Codes for a (N, rows, columns, channels) stack of images."""
    if images.ndim != 4 or images.shape[1:] != tuple(ckpt.arch.input_extents):
        raise RejectedInputError(f"image stack shape {images.shape} does not match the model")
    return ckpt.network.encode_batch(images.transpose(0, 3, 1, 2))


def inpaint(
    ckpt: Checkpoint,
    image: np.ndarray,
    b: Box,
    observer: Optional[Callable[[np.ndarray], None]] = None,
) -> np.ndarray:
    """
    Reconstruct image from everything except the pixels inside b: D(E(mask_b(Q))).

    @param image: (rows, columns, channels) array matching the checkpoint
    @param b: box to conceal; its pixels never reach the encoder
    @param observer: optional hook called with the masked input the encoder sees
    @returns the reconstruction, same extents as image
    @raises RejectedInputError: on extent mismatch or if b is outside the image
    """
    _to_batch(image, ckpt.arch)
    masked = apply_box_mask(image, b)
    if observer is not None:
        observer(masked.copy())
    return reconstruct_batch(ckpt, masked[None])[0]
