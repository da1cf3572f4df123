"""Convolution, batch norm, ReLU, bilinear resize, Kaiming init and Adam.

Image tensors are N×C×H×W, row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, ShapeError, Tensor, as_tensor, make_result


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _cols(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """im2col: (N*Ho*Wo, C*kh*kw)."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv_fwd(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    cols = _cols(x, kh, kw, stride, padding, ho, wo)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_grad_input(g, w, in_shape, stride, padding):
    n, c, h, wd = in_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    hp, wp = h + 2 * padding, wd + 2 * padding
    dx = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(dx)


def _conv_grad_weight(cols, g, w_shape):
    o = w_shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (g2.T @ cols).reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    out, cols = _conv_fwd(x.data, weight.data, stride, padding)
    xs, wd = x.shape, weight.data

    def backward(g):
        return (
            _conv_grad_input(g, wd, xs, stride, padding) if x.requires_grad else None,
            _conv_grad_weight(cols, g, wd.shape) if weight.requires_grad else None,
        )

    y = make_result(np.ascontiguousarray(out), (x, weight), backward, "conv2d")
    return y if bias is None else add_channel_bias(y, bias)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is [C_in, C_out, kh, kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, wd = x.shape
    ci, co, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects {ci}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output extent {ho}x{wo}")
    w = weight.data
    out = _conv_grad_input(x.data, w, (n, co, ho, wo), stride, padding)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx, _ = _conv_fwd(g, w, stride, padding)
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            cols = _cols(g, kh, kw, stride, padding, h, wd)
            gw = _conv_grad_weight(cols, x.data, w.shape)
        return gx, gw

    y = make_result(out, (x, weight), backward, "conv_transpose2d")
    return y if bias is None else add_channel_bias(y, bias)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {x.shape[1]} channels")
    b = bias.data.reshape(1, -1, 1, 1)
    return make_result(x.data + b, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


@lru_cache(maxsize=256)
def _interp_matrix(src: int, dst: int, dtype: str) -> np.ndarray:
    """Row i holds the corner-aligned linear weights for output index i."""
    m = np.zeros((dst, src), dtype=np.float64)
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.minimum(np.floor(pos).astype(int), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        rows = np.arange(dst)
        np.add.at(m, (rows, lo), 1.0 - frac)
        np.add.at(m, (rows, hi), frac)
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Corner-aligned bilinear resize of the last two axes."""
    x = as_tensor(x)
    th, tw = size
    if th < 1 or tw < 1:
        raise ShapeError(f"bilinear_resize: target size must be positive, got {size}")
    h, w = x.shape[-2:]
    if (h, w) == (th, tw):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ah = _interp_matrix(h, th, x.dtype.str)
    aw = _interp_matrix(w, tw, x.dtype.str)
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), lambda g: (ah.T @ g @ aw,), "bilinear_resize")


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class Conv2dLayer:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 1
    transposed: bool = False

    @classmethod
    def kaiming(cls, in_ch: int, out_ch: int, rng: np.random.Generator, k: int = 3, stride: int = 1,
                padding: int = 1, transposed: bool = False, bias: bool = False, dtype=np.float32):
        shape = (in_ch, out_ch, k, k) if transposed else (out_ch, in_ch, k, k)
        w = Tensor(kaiming_init(shape, in_ch * k * k, rng, dtype), requires_grad=True)
        b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        return cls(w, b, stride, padding, transposed)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0 if self.transposed else 1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1 if self.transposed else 0]

    def __call__(self, x: Tensor) -> Tensor:
        fn = conv_transpose2d if self.transposed else conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class BatchNorm2dLayer:
    """Per-channel batch norm. ``gamma``/``beta`` are optional (None = absent).

    ``subtract_mean=False`` drops the running-mean offset in eval mode, leaving the
    purely multiplicative map ``gamma * x / sqrt(var + eps)``. Train mode always centers.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Tensor | None = None
    beta: Tensor | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    subtract_mean: bool = True

    @classmethod
    def create(cls, channels: int, scale: bool = True, shift: bool = False, dtype=np.float32, **kw):
        gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True) if scale else None
        beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True) if shift else None
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), gamma, beta, **kw)

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self)

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.gamma, self.beta) if p is not None]


def batchnorm2d(x: Tensor, layer: BatchNorm2dLayer) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm2d: expected N×{layer.channels}×H×W, got {x.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    xd = x.data
    dt = xd.dtype.type
    gamma = layer.gamma.data.reshape(1, c, 1, 1) if layer.gamma is not None else None
    beta = layer.beta.data.reshape(1, c, 1, 1) if layer.beta is not None else None

    if layer.training:
        if count < 2:
            raise ShapeError("batchnorm2d: train mode needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + dt(layer.eps))).astype(xd.dtype)
        xhat = centered * inv.reshape(1, c, 1, 1)
        m = dt(layer.momentum)
        layer.running_mean = ((1 - m) * layer.running_mean + m * mean).astype(layer.running_mean.dtype)
        unbiased = var * dt(count / (count - 1))
        layer.running_var = ((1 - m) * layer.running_var + m * unbiased).astype(layer.running_var.dtype)
    else:
        inv = (1.0 / np.sqrt(layer.running_var + dt(layer.eps))).astype(xd.dtype)
        shifted = xd - layer.running_mean.reshape(1, c, 1, 1).astype(xd.dtype) if layer.subtract_mean else xd
        xhat = shifted * inv.reshape(1, c, 1, 1)

    out = xhat if gamma is None else xhat * gamma
    if beta is not None:
        out = out + beta
    training = layer.training
    parents = (x,) + tuple(p for p in (layer.gamma, layer.beta) if p is not None)

    def backward(g):
        dxhat = g if gamma is None else g * gamma
        if not x.requires_grad:
            gx = None
        elif training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv.reshape(1, c, 1, 1) / count * (count * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(1, c, 1, 1)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, backward, "batchnorm2d")


@dataclass
class AdamState:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              decay: list[bool] | None = None) -> None:
    """One Adam update with L2 weight decay folded into the gradient.

    ``decay[i]`` selects which parameters receive the ``weight_decay * W`` term.
    Parameters are rebound to new arrays, never mutated in place.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    if decay is None:
        decay = [True] * len(params)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adam_step: non-finite gradient")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g, dec) in enumerate(zip(params, grads, decay)):
        dt = p.data.dtype.type
        g = g.astype(p.data.dtype, copy=False)
        if dec and state.weight_decay:
            g = g + dt(state.weight_decay) * p.data
        m = dt(b1) * state.m[i] + dt(1 - b1) * g
        v = dt(b2) * state.v[i] + dt(1 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data = p.data - dt(state.learning_rate) * step


@dataclass
class ConvBlock:
    """Bias-free 3×3 conv (or transposed conv), scale-only batch norm, ReLU.

    With ``activation=False`` the block is the bare convolution.
    """

    conv: Conv2dLayer
    bn: BatchNorm2dLayer
    activation: bool = True

    @classmethod
    def create(cls, in_ch: int, out_ch: int, rng: np.random.Generator, transposed: bool = False,
               dtype=np.float32):
        conv = Conv2dLayer.kaiming(in_ch, out_ch, rng, transposed=transposed, dtype=dtype)
        return cls(conv, BatchNorm2dLayer.create(out_ch, scale=True, shift=False, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if not self.activation:
            return self.conv(x)
        return relu(batchnorm2d(self.conv(x), self.bn))

    def parameters(self) -> list[Tensor]:
        if not self.activation:
            return self.conv.parameters()
        return self.conv.parameters() + self.bn.parameters()

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.conv.weight": self.conv.weight.data}
        if self.conv.bias is not None:
            out[f"{prefix}.conv.bias"] = self.conv.bias.data
        if not self.activation:
            return out
        if self.bn.gamma is not None:
            out[f"{prefix}.bn.gamma"] = self.bn.gamma.data
        if self.bn.beta is not None:
            out[f"{prefix}.bn.beta"] = self.bn.beta.data
        out[f"{prefix}.bn.running_mean"] = self.bn.running_mean
        out[f"{prefix}.bn.running_var"] = self.bn.running_var
        return out

    def load(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        def take(name, like):
            arr = state[f"{prefix}.{name}"]
            if arr.shape != like.shape:
                raise ShapeError(f"{prefix}.{name}: checkpoint shape {arr.shape} vs model {like.shape}")
            return arr.astype(like.dtype)

        self.conv.weight.data = take("conv.weight", self.conv.weight.data)
        if self.conv.bias is not None:
            self.conv.bias.data = take("conv.bias", self.conv.bias.data)
        if not self.activation:
            return
        if self.bn.gamma is not None:
            self.bn.gamma.data = take("bn.gamma", self.bn.gamma.data)
        if self.bn.beta is not None:
            self.bn.beta.data = take("bn.beta", self.bn.beta.data)
        self.bn.running_mean = take("bn.running_mean", self.bn.running_mean)
        self.bn.running_var = take("bn.running_var", self.bn.running_var)


def normalize_weight_scale(blocks: list[ConvBlock]) -> list[float]:
    """Rescale each batch-normed conv weight to Kaiming RMS and fold the factor into the running stats.

    Batch norm makes the block invariant to this rescaling up to eps, whose effective value
    changes by 1/s². Coupled weight decay shrinks weights far below init scale, where a fixed Adam step
    becomes a huge relative change; restoring the scale keeps later optimization well conditioned.
    Returns the applied factors (1.0 for skipped blocks).
    """
    factors = []
    for b in blocks:
        w = b.conv.weight.data
        rms = float(np.sqrt(np.mean(w.astype(np.float64) ** 2)))
        if not b.activation or rms == 0.0:
            factors.append(1.0)
            continue
        k = w.shape[-1]
        s = np.sqrt(2.0 / (b.conv.in_channels * k * k)) / rms
        b.conv.weight.data = (w * s).astype(w.dtype)
        b.bn.running_mean = (b.bn.running_mean * s).astype(b.bn.running_mean.dtype)
        b.bn.running_var = (b.bn.running_var * s * s).astype(b.bn.running_var.dtype)
        factors.append(s)
    return factors


def decay_mask(params: list[Tensor], decayed: list[Tensor]) -> list[bool]:
    ids = {id(p) for p in decayed}
    return [id(p) in ids for p in params]
