"""Symmetric convolutional autoencoder and its pretraining loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .layers import AdamState, ConvBlock, adam_step, bilinear_resize, decay_mask, normalize_weight_scale
from .tensor import NumericError, ShapeError, Tape, Tensor, scale, sub, sum_squares

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CaeConfig:
    in_channels: int
    input_size: tuple[int, int]
    widths: tuple[int, ...] = (16, 32, 32, 64)
    downsample: bool = True
    # Without a shift term, BN + ReLU on the output layer cannot reproduce the input's offset.
    output_activation: bool = False

    def sizes(self) -> list[tuple[int, int]]:
        """Spatial size seen by each encoder stack."""
        out = [tuple(self.input_size)]
        for _ in self.widths[1:]:
            h, w = out[-1]
            out.append(((h + 1) // 2, (w + 1) // 2) if self.downsample else (h, w))
        return out

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        return (self.widths[-1],) + self.sizes()[-1]


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-2
    weight_decay: float = 0.1
    seed: int = 0
    normalize_scale: bool = True  # see layers.normalize_weight_scale

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("pretrain epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Encoder:
    """Conv stacks with bilinear downsampling between them."""

    def __init__(self, blocks: list[ConvBlock], sizes: list[tuple[int, int]]):
        self.blocks = blocks
        self.sizes = sizes

    def __call__(self, x: Tensor) -> Tensor:
        for i, blk in enumerate(self.blocks):
            if i:
                x = bilinear_resize(x, self.sizes[i])
            x = blk(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def conv_weights(self) -> list[Tensor]:
        return [b.conv.weight for b in self.blocks]

    def set_training(self, flag: bool) -> None:
        for b in self.blocks:
            b.bn.training = flag

    def state(self, prefix: str = "encoder") -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.state(f"{prefix}.{i}"))
        return out

    def load(self, state: dict[str, np.ndarray], prefix: str = "encoder") -> None:
        for i, b in enumerate(self.blocks):
            b.load(f"{prefix}.{i}", state)


class CaeModel:
    def __init__(self, config: CaeConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        chans = [config.in_channels] + list(config.widths)
        sizes = config.sizes()
        self.encoder = Encoder([ConvBlock.create(i, o, rng, dtype=dtype) for i, o in zip(chans[:-1], chans[1:])],
                               sizes)
        rev = chans[::-1]
        self.decoder = [ConvBlock.create(i, o, rng, transposed=True, dtype=dtype) for i, o in zip(rev[:-1], rev[1:])]
        if not config.output_activation:
            self.decoder[-1].activation = False
        self.decoder_sizes = sizes[::-1]

    @property
    def blocks(self) -> list[ConvBlock]:
        return self.encoder.blocks + self.decoder

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def conv_weights(self) -> list[Tensor]:
        return [b.conv.weight for b in self.blocks]

    def set_training(self, flag: bool) -> None:
        for b in self.blocks:
            b.bn.training = flag

    def decode(self, z: Tensor) -> Tensor:
        for j, blk in enumerate(self.decoder):
            if j:
                z = bilinear_resize(z, self.decoder_sizes[j])
            z = blk(z)
        return z

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        return cae_forward(x, self)

    def state(self) -> dict[str, np.ndarray]:
        out = self.encoder.state("encoder")
        for i, b in enumerate(self.decoder):
            out.update(b.state(f"decoder.{i}"))
        return out

    def load(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load(state, "encoder")
        for i, b in enumerate(self.decoder):
            b.load(f"decoder.{i}", state)


def cae_forward(x, model: CaeModel) -> tuple[Tensor, Tensor]:
    """Returns (reconstruction, embedding)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != tuple(cfg.input_size):
        raise ShapeError(f"CAE expects N×{cfg.in_channels}×{cfg.input_size[0]}×{cfg.input_size[1]}, got {x.shape}")
    z = model.encoder(x)
    return model.decode(z), z


def reconstruction_loss(recon: Tensor, x: Tensor) -> Tensor:
    """Squared reconstruction error summed per frame, averaged over the batch."""
    return scale(sum_squares(sub(recon, x)), 1.0 / x.shape[0])


def minibatches(order: np.ndarray, size: int) -> list[np.ndarray]:
    """Split ``order`` into batches; a trailing singleton joins the previous batch."""
    out = [order[i : i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def pretrain(data: np.ndarray, config: PretrainConfig, model: CaeModel) -> list[float]:
    """Train ``model`` in place to reconstruct ``data`` [N, C, H, W]; returns per-epoch mean loss."""
    config.validate()
    n = len(data)
    if n == 0:
        raise ValueError("pretraining dataset is empty")
    params = model.parameters()
    state = AdamState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    mask = decay_mask(params, model.conv_weights())
    rng = np.random.default_rng(config.seed)
    model.set_training(True)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for idx in minibatches(order, config.batch_size):
            x = Tensor(data[idx])
            with Tape() as tape:
                recon, _ = cae_forward(x, model)
                loss = reconstruction_loss(recon, x)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite reconstruction loss at epoch {epoch + 1}")
            total += value * len(idx)
            if loss.requires_grad:
                grads = tape.backward(loss)
                adam_step(params, [grads[p] for p in params], state, mask)
        history.append(total / n)
        log.info("pretrain epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    model.set_training(False)
    if config.normalize_scale:
        normalize_weight_scale(model.blocks)
    return history
