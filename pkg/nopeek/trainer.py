"""Training loop for the inpainting autoencoder."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autoencoder import ArchConfig, Autoencoder, Checkpoint, TrainingMetadata
from .errors import RejectedInputError, TrainingDivergedError
from .layers import l1_loss
from .masking import apply_box_mask, default_training_sizes, sample_random_box
from .optim import AdamHyper, AdamState, sgd_adam_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    """
    Training hyperparameters.

    box_sizes is the inclusive side-length range of the random training boxes;
    None selects a quarter to a half of the shorter image side.
    """

    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    step_size: float = 1e-3
    box_sizes: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise RejectedInputError("epochs must be at least 1")
        if self.batch_size < 1:
            raise RejectedInputError("batch size must be at least 1")


def train(corpus: np.ndarray, arch: ArchConfig, hyper: TrainHyper = TrainHyper()) -> Checkpoint:
    """
    Train an autoencoder to inpaint random boxes of typical images.

    Each epoch visits every image once in a seeded random order; each visit draws a
    fresh random box b, feeds mask_b(Q) to the network and takes the L1 distance
    between the reconstruction and the whole of Q as the loss.

    @param corpus: (N, rows, columns, channels) stack of typical images in [-1, 1]
    @param arch: architecture; its extents must equal the images' extents
    @param hyper: epochs, batch size, seed, Adam step size, training box sizes
    @returns checkpoint with the trained weights and the per-epoch mean loss history
    @raises RejectedInputError: if the corpus is empty or its extents do not match
    @raises TrainingDivergedError: on a non-finite loss or gradient, naming the epoch
    """
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise RejectedInputError("training corpus must be a nonempty (N, rows, columns, channels) stack")
    if corpus.shape[1:] != tuple(arch.input_extents):
        raise RejectedInputError(f"corpus extents {corpus.shape[1:]} != model extents {tuple(arch.input_extents)}")

    rng = np.random.default_rng(hyper.seed)
    network = Autoencoder(arch, rng=np.random.default_rng(rng.integers(2**63)))
    adam = AdamHyper(step_size=hyper.step_size)
    state = AdamState()
    extents = corpus.shape[1:3]
    box_sizes = hyper.box_sizes or default_training_sizes(extents)
    count = corpus.shape[0]
    history = []

    for epoch in range(hyper.epochs):
        order = rng.permutation(count)
        total = 0.0
        for start in range(0, count, hyper.batch_size):
            batch = corpus[order[start : start + hyper.batch_size]]
            masked = np.stack([apply_box_mask(q, sample_random_box(extents, box_sizes, rng)) for q in batch])
            output, caches = network.forward_train(masked.transpose(0, 3, 1, 2))
            loss, grad = l1_loss(output, batch.transpose(0, 3, 1, 2).astype(output.dtype))
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite training loss", epoch)
            grads = network.backward_train(caches, grad)
            try:
                params, state = sgd_adam_step(network.named_params(), grads, state, adam)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(str(err), epoch) from err
            network.assign(params)
            total += loss * len(batch)
        history.append(total / count)
        logger.info("epoch %d/%d: loss %.5f", epoch + 1, hyper.epochs, history[-1])

    metadata = TrainingMetadata(epochs=hyper.epochs, seed=hyper.seed, loss_history=tuple(history))
    return Checkpoint.from_network(network, metadata)
