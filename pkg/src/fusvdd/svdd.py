"""One-class hypersphere fine-tuning on top of the fusion block and CAE encoder."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .cae import CaeModel, Encoder, minibatches
from .data import AlignedSample, FrameSet
from .fusion import FusionBlock, FusionOutput
from .layers import AdamState, adam_step, decay_mask
from .tensor import (NumericError, ShapeError, Tape, Tensor, concat, expand_batch, scale, split, sub,
                     sum_squares)

log = logging.getLogger(__name__)

CENTER_MODES = ("fixed-after-init", "learned")
COLLAPSE_GUARD = 0.01


@dataclass
class SvddConfig:
    lam: float = 0.1
    epochs: int = 75
    learning_rate: float = 1e-2
    batch_size: int = 64
    center_mode: str = "fixed-after-init"
    seed: int = 0

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.epochs < 1:
            raise ValueError("finetune epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.center_mode not in CENTER_MODES:
            raise ValueError(f"center_mode must be one of {CENTER_MODES}, got {self.center_mode!r}")


@dataclass
class CenterSet:
    central: Tensor
    branches: list[Tensor]
    frozen: bool = True

    def tensors(self) -> list[Tensor]:
        return [self.central] + self.branches

    def state(self) -> dict[str, np.ndarray]:
        out = {"center.central": self.central.data}
        out.update({f"center.branch{k}": c.data for k, c in enumerate(self.branches)})
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], m: int, frozen: bool = True) -> "CenterSet":
        central = Tensor(state["center.central"], requires_grad=not frozen)
        branches = [Tensor(state[f"center.branch{k}"], requires_grad=not frozen) for k in range(m)]
        return cls(central, branches, frozen)


def guard_center(c: np.ndarray, eps: float = COLLAPSE_GUARD) -> np.ndarray:
    """Push coordinates with |c| < eps out to ±eps, keeping their sign (zero goes to +eps)."""
    c = c.copy()
    small = np.abs(c) < eps
    c[small] = np.where(c[small] < 0, -eps, eps)
    return c


class AnomalyModel:
    """Fusion block whose central and branch outputs all pass through one shared encoder."""

    def __init__(self, fusion: FusionBlock, encoder: Encoder, config: SvddConfig | None = None,
                 centers: CenterSet | None = None):
        if fusion.config.output_channels != encoder.blocks[0].conv.in_channels:
            raise ShapeError(f"fusion outputs {fusion.config.output_channels} channels, "
                             f"encoder expects {encoder.blocks[0].conv.in_channels}")
        self.fusion = fusion
        self.encoder = encoder
        # Eval-mode batch norm without the running-mean offset: that offset is a per-channel bias,
        # and a bias lets the network collapse onto any center once weight decay shrinks the convs.
        for b in fusion.blocks + encoder.blocks:
            b.bn.subtract_mean = False
        self.config = config or SvddConfig()
        self.centers = centers

    @classmethod
    def from_pretrained(cls, fusion: FusionBlock, cae: CaeModel, config: SvddConfig | None = None):
        return cls(fusion, copy.deepcopy(cae.encoder), config)

    def parameters(self) -> list[Tensor]:
        return self.fusion.parameters() + self.encoder.parameters()

    def conv_weights(self) -> list[Tensor]:
        return self.fusion.conv_weights() + self.encoder.conv_weights()

    def set_training(self, flag: bool) -> None:
        self.fusion.set_training(flag)
        self.encoder.set_training(flag)

    def embed(self, inputs: list) -> FusionOutput:
        """Encoder embeddings of the central stream and of every modality branch."""
        fused = self.fusion(inputs)
        streams = [fused.central] + fused.branches
        emb = split(self.encoder(concat(streams)), [s.shape[0] for s in streams])
        return FusionOutput(emb[0], emb[1:])

    def embed_central(self, inputs: list) -> Tensor:
        return self.encoder(self.fusion(inputs).central)

    def state(self) -> dict[str, np.ndarray]:
        out = self.fusion.state("fusion")
        out.update(self.encoder.state("encoder"))
        if self.centers is not None:
            out.update(self.centers.state())
        return out


def _batches(frames: FrameSet, batch_size: int):
    for idx in minibatches(np.arange(len(frames)), batch_size):
        yield frames.batch(idx)


def calibrate_batchnorm(model: AnomalyModel, frames: FrameSet, batch_size: int = 64) -> None:
    """Set every running mean/var to the average of batch statistics over ``frames``."""
    layers = [b.bn for b in model.fusion.blocks + model.encoder.blocks if b.activation]
    saved = [bn.momentum for bn in layers]
    model.set_training(True)
    try:
        for i, batch in enumerate(_batches(frames, batch_size)):
            for bn in layers:
                bn.momentum = 1.0 / (i + 1)
            model.embed(batch)
    finally:
        for bn, mom in zip(layers, saved):
            bn.momentum = mom
        model.set_training(False)


def init_centers(model: AnomalyModel, frames: FrameSet, batch_size: int = 256) -> CenterSet:
    """Mean embedding per branch over one eval-mode pass, with the collapse guard applied."""
    if len(frames) == 0:
        raise ValueError("cannot initialize centers from an empty dataset")
    model.set_training(False)
    sums = None
    for batch in _batches(frames, batch_size):
        out = model.embed(batch)
        parts = [out.central.data] + [b.data for b in out.branches]
        s = [p.astype(np.float64).sum(axis=0) for p in parts]
        sums = s if sums is None else [a + b for a, b in zip(sums, s)]
    dtype = model.encoder.blocks[0].conv.weight.dtype
    learned = model.config.center_mode == "learned"
    means = [guard_center(s / len(frames)).astype(dtype) for s in sums]
    centers = CenterSet(Tensor(means[0], requires_grad=learned),
                        [Tensor(c, requires_grad=learned) for c in means[1:]], frozen=not learned)
    model.centers = centers
    return centers


class BranchLoss(NamedTuple):
    data: Tensor
    reg: float


class JointLoss(NamedTuple):
    total: Tensor
    central: Tensor
    branches: list[Tensor]
    reg: float


def regularizer(weights: list[Tensor], lam: float) -> float:
    return 0.5 * lam * float(sum(np.sum(w.data.astype(np.float64) ** 2) for w in weights))


def svdd_branch_loss(embeddings: Tensor, center: Tensor, weights: list[Tensor] = (), lam: float = 0.0) -> BranchLoss:
    """Mean squared distance to ``center``; the weight penalty is reported, not added.

    The penalty's gradient is applied by the optimizer as weight decay.
    """
    if embeddings.shape[1:] != center.shape:
        raise ShapeError(f"embedding shape {embeddings.shape[1:]} vs center {center.shape}")
    n = embeddings.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    data = scale(sum_squares(sub(embeddings, expand_batch(center, n))), 1.0 / n)
    return BranchLoss(data, regularizer(list(weights), lam))


def joint_loss(outputs: FusionOutput, centers: CenterSet, lam: float = 0.0, weights: list[Tensor] = ()) -> JointLoss:
    if len(outputs.branches) != len(centers.branches):
        raise ShapeError(f"{len(outputs.branches)} branch outputs but {len(centers.branches)} branch centers")
    central = svdd_branch_loss(outputs.central, centers.central).data
    branches = [svdd_branch_loss(e, c).data for e, c in zip(outputs.branches, centers.branches)]
    total = central
    for b in branches:
        total = total + b
    return JointLoss(total, central, branches, regularizer(list(weights), lam))


@dataclass
class EpochRecord:
    epoch: int
    central: float
    branches: list[float]
    reg: float

    @property
    def total(self) -> float:
        return self.central + sum(self.branches)


class TrainingDiverged(NumericError):
    def __init__(self, msg: str, history: list):
        super().__init__(msg)
        self.history = history


def finetune(model: AnomalyModel, frames: FrameSet,
             on_epoch: Callable[[EpochRecord, AnomalyModel], None] | None = None) -> list[EpochRecord]:
    """Adam over the joint one-class objective; batch norm stays in eval mode.

    ``on_epoch`` is called after every completed epoch (used by tests and progress reporting).
    """
    cfg = model.config
    cfg.validate()
    if model.centers is None:
        raise ValueError("centers are not initialized")
    if len(frames) == 0:
        raise ValueError("fine-tuning dataset is empty")
    params = model.parameters()
    if cfg.center_mode == "learned":
        params = params + model.centers.tensors()
    weights = model.conv_weights()
    state = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.lam)
    mask = decay_mask(params, weights)
    rng = np.random.default_rng(cfg.seed)
    model.set_training(False)
    n = len(frames)
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        good = [p.data for p in params]
        sums = np.zeros(1 + model.fusion.config.m)
        try:
            for idx in minibatches(rng.permutation(n), cfg.batch_size):
                with Tape() as tape:
                    loss = joint_loss(model.embed(frames.batch(idx)), model.centers)
                parts = [float(loss.central.data)] + [float(b.data) for b in loss.branches]
                sums += np.array(parts) * len(idx)
                if loss.total.requires_grad:
                    grads = tape.backward(loss.total)
                    adam_step(params, [grads[p] for p in params], state, mask)
        except NumericError as e:
            for p, d in zip(params, good):
                p.data = d
            raise TrainingDiverged(f"epoch {epoch}: {e}; parameters restored to epoch {epoch - 1}", history) from e
        mean = sums / n
        rec = EpochRecord(epoch, float(mean[0]), [float(v) for v in mean[1:]], regularizer(weights, cfg.lam))
        history.append(rec)
        log.info("finetune epoch %d/%d central %.6f total %.6f", epoch, cfg.epochs, rec.central, rec.total)
        if on_epoch is not None:
            on_epoch(rec, model)
    return history


def score(model: AnomalyModel, inputs: list, batch_size: int = 256) -> np.ndarray:
    """Squared distance of each central embedding to the central center."""
    if model.centers is None:
        raise ValueError("model has no centers")
    model.set_training(False)
    c = model.centers.central.data.astype(np.float64)
    n = inputs[0].shape[0]
    out = np.empty(n)
    for lo in range(0, n, batch_size):
        emb = model.embed_central([x[lo : lo + batch_size] for x in inputs]).data
        if emb.shape[1:] != c.shape:
            raise ShapeError(f"central embedding {emb.shape[1:]} vs center {c.shape}")
        d = emb.astype(np.float64) - c
        out[lo : lo + batch_size] = (d * d).reshape(len(d), -1).sum(axis=1)
    return out


def score_sample(model: AnomalyModel, sample: AlignedSample) -> float:
    return float(score(model, [m[None] for m in sample.maps])[0])


def score_frames(model: AnomalyModel, frames: FrameSet, batch_size: int = 256) -> np.ndarray:
    return score(model, frames.maps, batch_size)
