"""CentralNet-style fusion: one CNN per modality plus a central CNN.

Depth indexing: branch k at depth 0 is its (channel-padded) input; depth i is
the output of its i-th conv block. The central input at depth 0 is the
weighted sum of the modality inputs; for i >= 1 the central stream at depth i
is ``alpha_central[i] * central_block_i(prev) + sum_k alpha_modal[i][k] * branch_k^i``.
The central embedding is the combination at depth L.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConvBlock
from .tensor import ShapeError, Tensor, pad_channels, weighted_sum


@dataclass(frozen=True)
class FusionConfig:
    modality_channels: tuple[int, ...]
    depth: int = 3
    width: int = 16
    out_channels: int | None = None

    @property
    def m(self) -> int:
        return len(self.modality_channels)

    @property
    def in_channels(self) -> int:
        return max(self.modality_channels)

    @property
    def output_channels(self) -> int:
        return self.out_channels or self.in_channels

    def plan(self) -> list[tuple[int, int]]:
        """(in, out) channels of each block along one branch."""
        chans = [self.in_channels] + [self.width] * (self.depth - 1) + [self.output_channels]
        return list(zip(chans[:-1], chans[1:]))


@dataclass
class FusionOutput:
    central: Tensor
    branches: list[Tensor]


def central_combine(h_central: Tensor, branch_acts: list[Tensor], alphas: list[Tensor]) -> Tensor:
    """``alphas[0] * h_central + sum_k alphas[k+1] * branch_acts[k]``."""
    if len(alphas) != len(branch_acts) + 1:
        raise ShapeError(f"central_combine: need {len(branch_acts) + 1} fusion weights, got {len(alphas)}")
    for b in branch_acts:
        if b.shape != h_central.shape:
            raise ShapeError(f"central_combine: branch shape {b.shape} vs central {h_central.shape}")
    return weighted_sum([h_central] + list(branch_acts), alphas)


class FusionBlock:
    def __init__(self, config: FusionConfig, rng: np.random.Generator, dtype=np.float32):
        if config.depth < 1 or config.m < 1:
            raise ValueError("fusion block needs depth >= 1 and at least one modality")
        self.config = config
        plan = config.plan()
        self.branches = [[ConvBlock.create(i, o, rng, dtype=dtype) for i, o in plan] for _ in range(config.m)]
        self.central = [ConvBlock.create(i, o, rng, dtype=dtype) for i, o in plan]
        m = config.m
        self.alpha_central = [None] + [Tensor(np.array(1.0, dtype=dtype), requires_grad=True)
                                       for _ in range(config.depth)]
        self.alpha_modal = [[Tensor(np.array(1.0 / m, dtype=dtype), requires_grad=True) for _ in range(m)]
                            for _ in range(config.depth + 1)]

    @property
    def blocks(self) -> list[ConvBlock]:
        return [b for br in self.branches for b in br] + self.central

    def alphas(self) -> list[Tensor]:
        return self.alpha_central[1:] + [a for row in self.alpha_modal for a in row]

    def conv_weights(self) -> list[Tensor]:
        return [b.conv.weight for b in self.blocks]

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()] + self.alphas()

    def set_training(self, flag: bool) -> None:
        for b in self.blocks:
            b.bn.training = flag

    def fuse_inputs(self, inputs: list) -> tuple[list[Tensor], Tensor]:
        """Channel-padded modality inputs and the depth-0 central map."""
        cfg = self.config
        if len(inputs) != cfg.m:
            raise ShapeError(f"fusion block expects {cfg.m} modalities, got {len(inputs)}")
        padded = []
        for k, (x, c) in enumerate(zip(inputs, cfg.modality_channels)):
            x = x if isinstance(x, Tensor) else Tensor(x)
            if x.ndim != 4 or x.shape[1] != c:
                raise ShapeError(f"modality {k}: expected N×{c}×H×W, got {x.shape}")
            padded.append(pad_channels(x, cfg.in_channels))
        return padded, weighted_sum(padded, self.alpha_modal[0])

    def __call__(self, inputs: list) -> FusionOutput:
        return fusion_forward(inputs, self)

    def state(self, prefix: str = "fusion") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, br in enumerate(self.branches):
            for i, b in enumerate(br):
                out.update(b.state(f"{prefix}.branch{k}.{i}"))
        for i, b in enumerate(self.central):
            out.update(b.state(f"{prefix}.central.{i}"))
        for i, a in enumerate(self.alpha_central[1:], 1):
            out[f"{prefix}.alpha_central.{i}"] = a.data
        for i, row in enumerate(self.alpha_modal):
            out[f"{prefix}.alpha_modal.{i}"] = np.stack([a.data for a in row])
        return out

    def load(self, state: dict[str, np.ndarray], prefix: str = "fusion") -> None:
        for k, br in enumerate(self.branches):
            for i, b in enumerate(br):
                b.load(f"{prefix}.branch{k}.{i}", state)
        for i, b in enumerate(self.central):
            b.load(f"{prefix}.central.{i}", state)
        for i, a in enumerate(self.alpha_central[1:], 1):
            a.data = np.asarray(state[f"{prefix}.alpha_central.{i}"], dtype=a.dtype).reshape(())
        for i, row in enumerate(self.alpha_modal):
            vals = state[f"{prefix}.alpha_modal.{i}"]
            if vals.shape != (len(row),):
                raise ShapeError(f"{prefix}.alpha_modal.{i}: checkpoint shape {vals.shape}, model has {len(row)}")
            for a, v in zip(row, vals):
                a.data = np.asarray(v, dtype=a.dtype)


def fusion_forward(inputs: list, block: FusionBlock) -> FusionOutput:
    acts, h = block.fuse_inputs(inputs)
    for i in range(block.config.depth):
        acts = [br[i](a) for br, a in zip(block.branches, acts)]
        h = central_combine(block.central[i](h), acts,
                            [block.alpha_central[i + 1]] + block.alpha_modal[i + 1])
    return FusionOutput(h, acts)
