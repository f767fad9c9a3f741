"""Convolutional building blocks and the autofocus layer.

All ops take and return :class:`~autofocus.autodiff.Node` objects holding
channels-first volumes ``(B, C, D, H, W)``; the functional wrappers also
accept a single unbatched ``(C, D, H, W)`` volume.  Internally convolutions
run channels-last so every kernel tap is one strided matmul.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .tensor_core import ShapeError


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    dilation: int = 1
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise ValueError("same padding needs odd kernel extents")

    @property
    def pads(self) -> tuple[int, int, int]:
        if self.padding == "valid":
            return (0, 0, 0)
        return tuple(self.dilation * (k - 1) // 2 for k in self.kernel)

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        out = []
        for n, k, s, p in zip(spatial, self.kernel, self.stride, self.pads):
            span = n + 2 * p - self.dilation * (k - 1)
            if span < 1:
                raise ShapeError(
                    f"input extent {n} too small for kernel {k} at dilation {self.dilation}"
                )
            out.append((span - 1) // s + 1)
        return tuple(out)


@dataclass(frozen=True)
class AutofocusConfig:
    in_channels: int
    out_channels: int
    rates: tuple[int, ...] = (2, 6, 10, 14)

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if not self.rates:
            raise ValueError("autofocus needs at least one dilation rate")
        if any(r < 1 for r in self.rates) or any(
            b <= a for a, b in zip(self.rates, self.rates[1:])
        ):
            raise ValueError(f"rates must be >= 1 and strictly increasing, got {self.rates}")
        if self.attention_mid_channels < 1:
            raise ValueError(
                f"attention head needs in_channels >= 2, got {self.in_channels}"
            )

    @property
    def K(self) -> int:
        return len(self.rates)

    @property
    def attention_mid_channels(self) -> int:
        return self.in_channels // 2


# --------------------------------------------------------------------------
# convolution kernels (plain numpy, channels-last)


def _taps(kernel):
    return [(a, b, c) for a in range(kernel[0]) for b in range(kernel[1]) for c in range(kernel[2])]


def _tap_slice(tap, r, stride, out_sp, offset=(0, 0, 0)):
    return (slice(None),) + tuple(
        slice(o + t * r, o + t * r + s * (n - 1) + 1, s)
        for t, s, n, o in zip(tap, stride, out_sp, offset)
    )


def conv3d_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Raw dilated convolution (no bias) of a batched channels-first array."""
    r = spec.dilation
    out_sp = spec.output_shape(x.shape[2:])
    pads = spec.pads
    xl = np.pad(x.transpose(0, 2, 3, 4, 1), [(0, 0)] + [(p, p) for p in pads] + [(0, 0)])
    wl = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    out = np.zeros((x.shape[0], *out_sp, w.shape[0]), dtype=np.result_type(x, w))
    for tap in _taps(spec.kernel):
        out += xl[_tap_slice(tap, r, spec.stride, out_sp)] @ wl[tap]
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_backward(x, w, g, spec: ConvSpec, need_x=True, need_w=True):
    r = spec.dilation
    out_sp = g.shape[2:]
    pads = spec.pads
    gl = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
    wl = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))
    taps = _taps(spec.kernel)
    gw = gx = None
    if need_w:
        xl = np.pad(x.transpose(0, 2, 3, 4, 1), [(0, 0)] + [(p, p) for p in pads] + [(0, 0)])
        g2 = gl.reshape(-1, gl.shape[-1])
        gw = np.empty_like(wl)
        for tap in taps:
            cols = np.ascontiguousarray(xl[_tap_slice(tap, r, spec.stride, out_sp)])
            gw[tap] = cols.reshape(-1, cols.shape[-1]).T @ g2
        gw = np.ascontiguousarray(gw.transpose(4, 3, 0, 1, 2))
    if need_x:
        in_sp = x.shape[2:]
        if spec.stride == (1, 1, 1):
            # transposed conv as a correlation with the flipped kernel
            full = [r * (k - 1) for k in spec.kernel]
            gp = np.pad(gl, [(0, 0)] + [(f, f) for f in full] + [(0, 0)])
            acc = np.zeros((x.shape[0], *in_sp, x.shape[1]), dtype=gl.dtype)
            for tap in taps:
                start = [r * (k - 1 - t) + p for k, t, p in zip(spec.kernel, tap, pads)]
                sl = (slice(None),) + tuple(slice(s, s + n) for s, n in zip(start, in_sp))
                acc += gp[sl] @ wl[tap].T
        else:
            padded = [n + 2 * p for n, p in zip(in_sp, pads)]
            accp = np.zeros((x.shape[0], *padded, x.shape[1]), dtype=gl.dtype)
            for tap in taps:
                accp[_tap_slice(tap, r, spec.stride, out_sp)] += gl @ wl[tap].T
            acc = accp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(pads, in_sp))]
        gx = np.ascontiguousarray(acc.transpose(0, 4, 1, 2, 3))
    return gx, gw


# --------------------------------------------------------------------------
# differentiable ops


def _batched(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 4:
        return ad.reshape(x, (1, *x.shape)), True
    if x.value.ndim != 5:
        raise ShapeError(f"expected a (B,)C,D,H,W volume, got shape {x.shape}")
    return x, False


def conv3d(x, spec: ConvSpec, kernel, bias=None) -> Node:
    """Dilated 3D convolution with optional per-output-channel bias."""
    x, unbatched = _batched(ad.as_node(x))
    kernel = ad.as_node(kernel)
    if kernel.shape != spec.kernel_shape:
        raise ShapeError(f"kernel shape {kernel.shape} != expected {spec.kernel_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")

    def backward(g, needs):
        return conv3d_backward(x.value, kernel.value, g, spec, needs[0], needs[1])

    out = Node(conv3d_forward(x.value, kernel.value, spec), (x, kernel), backward, "conv3d")
    if bias is not None:
        bias = ad.as_node(bias)
        out = ad.add(out, ad.reshape(bias, (1, -1, 1, 1, 1)))
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def relu(x) -> Node:
    return ad.relu(x)


def channel_softmax(x, axis: int = 1) -> Node:
    return ad.softmax(x, axis=axis)


@dataclass
class AttentionParams:
    conv1_kernel: Node
    conv1_bias: Node | None
    conv2_kernel: Node
    conv2_bias: Node | None


def attention_specs(cfg: AutofocusConfig) -> tuple[ConvSpec, ConvSpec]:
    mid = cfg.attention_mid_channels
    return (ConvSpec(cfg.in_channels, mid, 3, 1),
            ConvSpec(mid, cfg.K, 1, 1))


def attention_net(f_prev, cfg: AutofocusConfig, params: AttentionParams) -> Node:
    """Per-voxel softmax weights over the K scales, shape ``(B, K, D, H, W)``."""
    x, unbatched = _batched(ad.as_node(f_prev))
    spec1, spec2 = attention_specs(cfg)
    hidden = relu(conv3d(x, spec1, params.conv1_kernel, params.conv1_bias))
    lam = channel_softmax(conv3d(hidden, spec2, params.conv2_kernel, params.conv2_bias), axis=1)
    return ad.reshape(lam, lam.shape[1:]) if unbatched else lam


def autofocus_forward(f_prev, cfg: AutofocusConfig, shared_kernel, attn_params: AttentionParams | None,
                      shared_bias=None, attention=None) -> tuple[Node, Node]:
    """Fuse K dilated convolutions sharing one kernel, weighted per voxel.

    ``attention`` substitutes the attention maps directly (it must be
    ``(B, K, D, H, W)`` or unbatched ``(K, D, H, W)``); otherwise they are
    computed by :func:`attention_net`.  Returns ``(output, attention)``.
    """
    x, unbatched = _batched(ad.as_node(f_prev))
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, autofocus expects {cfg.in_channels}")
    if attention is None:
        lam = attention_net(x, cfg, attn_params)
    else:
        lam, _ = _batched(ad.as_node(attention))
        expected = (x.shape[0], cfg.K, *x.shape[2:])
        if lam.shape != expected:
            raise ShapeError(f"attention shape {lam.shape} != {expected}")
    out = None
    for k, rate in enumerate(cfg.rates):
        spec = ConvSpec(cfg.in_channels, cfg.out_channels, 3, rate)
        branch = conv3d(x, spec, shared_kernel, shared_bias)
        term = ad.mul(branch, ad.take_channel(lam, k, axis=1))
        out = term if out is None else ad.add(out, term)
    if unbatched:
        return ad.reshape(out, out.shape[1:]), ad.reshape(lam, lam.shape[1:])
    return out, lam


def aspp_forward(f_prev, rates: Sequence[int], kernels: Sequence, biases: Sequence | None = None,
                 fusion: str = "sum", proj_kernel=None, proj_bias=None) -> Node:
    """Parallel dilated convolutions with independent weights, fused by sum or concat."""
    if not rates:
        raise ValueError("aspp needs at least one dilation rate")
    if len(kernels) != len(rates):
        raise ValueError(f"{len(kernels)} kernels for {len(rates)} rates")
    x, unbatched = _batched(ad.as_node(f_prev))
    biases = list(biases) if biases is not None else [None] * len(rates)
    branches = []
    for rate, kern, b in zip(rates, kernels, biases):
        kern = ad.as_node(kern)
        spec = ConvSpec(kern.shape[1], kern.shape[0], kern.shape[2:], rate)
        branches.append(conv3d(x, spec, kern, b))
    if fusion == "sum":
        out = branches[0]
        for b in branches[1:]:
            out = ad.add(out, b)
    elif fusion == "concat":
        if proj_kernel is None:
            raise ValueError("concat fusion needs a 1x1x1 projection kernel")
        cat = ad.concat(branches, axis=1)
        proj_kernel = ad.as_node(proj_kernel)
        spec = ConvSpec(cat.shape[1], proj_kernel.shape[0], 1, 1)
        out = conv3d(cat, spec, proj_kernel, proj_bias)
    else:
        raise ValueError(f"fusion must be 'sum' or 'concat', got {fusion!r}")
    return ad.reshape(out, out.shape[1:]) if unbatched else out


def residual_add(block_out, block_in) -> Node:
    """Identity shortcut: center-crop the input spatially, zero-pad its channels."""
    block_out, block_in = ad.as_node(block_out), ad.as_node(block_in)
    if block_in.value.ndim != block_out.value.ndim:
        raise ShapeError(f"rank mismatch {block_in.shape} vs {block_out.shape}")
    ch = block_out.value.ndim - 4
    out_sp, in_sp = block_out.shape[ch + 1:], block_in.shape[ch + 1:]
    if any(i < o for i, o in zip(in_sp, out_sp)):
        raise ShapeError(f"shortcut {block_in.shape} smaller than block output {block_out.shape}")
    shortcut = ad.center_crop(block_in, out_sp)
    c_in, c_out = block_in.shape[ch], block_out.shape[ch]
    if c_in > c_out:
        raise ShapeError(f"shortcut has more channels ({c_in}) than block output ({c_out})")
    if c_in < c_out:
        shortcut = ad.pad_crop(shortcut, [(0, c_out - c_in), (0, 0), (0, 0), (0, 0)], "pad")
    return ad.add(block_out, shortcut)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    updates: int = 0


def batchnorm(x, gamma, beta, stats: RunningStats, mode: str = "train", eps: float = 1e-5) -> Node:
    """Per-channel normalization over batch and spatial axes.

    Train mode uses the batch statistics (biased variance) and folds them into
    ``stats``; eval mode uses ``stats``.
    """
    x, unbatched = _batched(ad.as_node(x))
    gamma, beta = ad.as_node(gamma), ad.as_node(beta)
    axes = (0, 2, 3, 4)
    shape = (1, -1, 1, 1, 1)
    if mode == "train":
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = stats.momentum
        stats.mean = (m * stats.mean + (1 - m) * mu).astype(stats.mean.dtype)
        stats.var = (m * stats.var + (1 - m) * var).astype(stats.var.dtype)
        stats.updates += 1
    elif mode == "eval":
        if stats.updates == 0:
            raise RuntimeError("batchnorm eval mode needs running statistics from a train step")
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.value.dtype)
    xhat = (x.value - mu.reshape(shape).astype(x.value.dtype)) * inv.reshape(shape)
    n = x.value.size // x.shape[1]

    def backward(g, needs):
        gg = g * gamma.value.reshape(shape)
        if mode == "train":
            gx = inv.reshape(shape) / n * (
                n * gg - gg.sum(axis=axes, keepdims=True)
                - xhat * (gg * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gg * inv.reshape(shape)
        return (gx,
                (g * xhat).sum(axis=axes) if needs[1] else None,
                g.sum(axis=axes) if needs[2] else None)

    out = Node(xhat * gamma.value.reshape(shape) + beta.value.reshape(shape),
               (x, gamma, beta), backward, "batchnorm")
    return ad.reshape(out, out.shape[1:]) if unbatched else out


# --------------------------------------------------------------------------
# parameterised layer objects used by the model builder


def he_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: owns named parameters and buffers."""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        pass


class Conv3d(Layer):
    def __init__(self, spec: ConvSpec, name: str, rng, dtype=np.float64):
        self.spec = spec
        self.kernel = Parameter(he_uniform(rng, spec.kernel_shape, dtype), f"{name}.kernel")
        self.bias = (Parameter(np.zeros(spec.out_channels, dtype), f"{name}.bias")
                     if spec.bias else None)

    def parameters(self):
        return [p for p in (self.kernel, self.bias) if p is not None]

    def __call__(self, x, mode="train"):
        return conv3d(x, self.spec, self.kernel, self.bias)


class BatchNorm3d(Layer):
    def __init__(self, channels: int, name: str, dtype=np.float64, momentum=0.9):
        self.name = name
        self.gamma = Parameter(np.ones(channels, dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype), f"{name}.beta")
        self.stats = RunningStats(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.stats.mean,
                f"{self.name}.running_var": self.stats.var,
                f"{self.name}.updates": np.array([self.stats.updates], dtype=np.float64)}

    def load_buffers(self, values):
        self.stats.mean = values[f"{self.name}.running_mean"].copy()
        self.stats.var = values[f"{self.name}.running_var"].copy()
        self.stats.updates = int(values[f"{self.name}.updates"][0])

    def __call__(self, x, mode="train"):
        return batchnorm(x, self.gamma, self.beta, self.stats, mode)


class AutofocusLayer(Layer):
    """One shared 3x3x3 kernel applied at every rate plus the attention head."""

    def __init__(self, cfg: AutofocusConfig, name: str, rng, dtype=np.float64):
        self.cfg = cfg
        self.name = name
        self.conv = Conv3d(ConvSpec(cfg.in_channels, cfg.out_channels, 3, cfg.rates[0]),
                           f"{name}.conv_shared", rng, dtype)
        spec1, spec2 = attention_specs(cfg)
        self.att1 = Conv3d(spec1, f"{name}.attention.conv1", rng, dtype)
        self.att2 = Conv3d(spec2, f"{name}.attention.conv2", rng, dtype)
        # zero logits -> uniform 1/K attention at initialisation
        self.att2.kernel.value[...] = 0
        self.last_attention: np.ndarray | None = None

    @property
    def attention_params(self) -> AttentionParams:
        return AttentionParams(self.att1.kernel, self.att1.bias, self.att2.kernel, self.att2.bias)

    def parameters(self):
        return self.conv.parameters() + self.att1.parameters() + self.att2.parameters()

    def __call__(self, x, mode="train", attention=None):
        out, lam = autofocus_forward(x, self.cfg, self.conv.kernel, self.attention_params,
                                     self.conv.bias, attention)
        self.last_attention = lam.value
        return out


class ASPPLayer(Layer):
    def __init__(self, in_channels: int, out_channels: int, rates: Sequence[int], fusion: str,
                 name: str, rng, dtype=np.float64):
        self.rates = tuple(rates)
        self.fusion = fusion
        self.branches = [Conv3d(ConvSpec(in_channels, out_channels, 3, r), f"{name}.branch{k}", rng, dtype)
                         for k, r in enumerate(self.rates)]
        self.proj = None
        if fusion == "concat":
            self.proj = Conv3d(ConvSpec(out_channels * len(self.rates), out_channels, 1, 1),
                               f"{name}.proj", rng, dtype)

    def parameters(self):
        ps = [p for b in self.branches for p in b.parameters()]
        return ps + (self.proj.parameters() if self.proj else [])

    def __call__(self, x, mode="train"):
        return aspp_forward(x, self.rates, [b.kernel for b in self.branches],
                            [b.bias for b in self.branches], self.fusion,
                            self.proj.kernel if self.proj else None,
                            self.proj.bias if self.proj else None)
