"""Basic / AFN-n / ASPP architectures, receptive fields and parameter counts."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .layers import (ASPPLayer, AutofocusConfig, AutofocusLayer, BatchNorm3d, Conv3d,
                     ConvSpec, attention_specs, relu, residual_add)

DEFAULT_CHANNELS = (30, 30, 40, 40, 40, 40, 50, 50)
DEFAULT_RATES = (2, 6, 10, 14)

# Trainable parameter counts reported for the original models.
REPORTED_PARAMS = {"basic": 315_725, "aspp-s": 967_330, "aspp-c": 478_435,
                   "afn1": 349_904, "afn6": 450_209}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | autofocus | aspp | classifier
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    rates: tuple[int, ...] = ()
    padding: str = "same"
    stride: int = 1
    residual_group: int | None = None
    norm: bool = True
    fusion: str | None = None

    def conv_spec(self, dilation: int | None = None) -> ConvSpec:
        return ConvSpec(self.in_channels, self.out_channels, self.kernel,
                        self.dilation if dilation is None else dilation,
                        self.stride, self.padding)

    def autofocus_config(self) -> AutofocusConfig:
        return AutofocusConfig(self.in_channels, self.out_channels, self.rates)


@dataclass(frozen=True)
class ArchSpec:
    name: str
    in_channels: int
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        kinds = [l.kind for l in self.layers]
        if not kinds or kinds[-1] != "classifier" or kinds.count("classifier") != 1:
            raise ValueError("an architecture needs exactly one classifier, as its last layer")
        if self.layers[-1].kernel != 1:
            raise ValueError("the classifier must use a 1x1x1 kernel")
        prev = self.in_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != prev:
                raise ValueError(
                    f"layer {i + 1} expects {layer.in_channels} channels but receives {prev}"
                )
            prev = layer.out_channels
        if prev != self.num_classes:
            raise ValueError(f"classifier outputs {prev} channels for {self.num_classes} classes")

    @property
    def hidden(self) -> tuple[LayerSpec, ...]:
        return self.layers[:-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


def _hidden_plan(n_hidden: int, n_autofocus: int, channels, in_channels, rates, padding, norm):
    layers = []
    prev = in_channels
    for i, ch in enumerate(channels):
        idx = i + 1
        group = (idx - 3) // 2 if idx >= 3 and idx - 3 < 2 * ((n_hidden - 2) // 2) else None
        if idx > n_hidden - n_autofocus:
            layers.append(LayerSpec("autofocus", prev, ch, rates=tuple(rates),
                                    residual_group=group, norm=norm))
        else:
            layers.append(LayerSpec("conv", prev, ch, dilation=1 if idx <= 2 else 2,
                                    padding=padding, residual_group=group, norm=norm))
        prev = ch
    return layers


def basic(in_channels: int = 1, num_classes: int = 2, channels: Sequence[int] = DEFAULT_CHANNELS,
          padding: str = "same", norm: bool = True) -> ArchSpec:
    """Plain residual CNN: two standard convs, then dilation 2."""
    return afn(0, in_channels, num_classes, channels, padding=padding, norm=norm)


def afn(n: int, in_channels: int = 1, num_classes: int = 2,
        channels: Sequence[int] = DEFAULT_CHANNELS, rates: Sequence[int] = DEFAULT_RATES,
        padding: str = "same", norm: bool = True) -> ArchSpec:
    """Basic with its last ``n`` hidden layers turned into autofocus layers."""
    channels = tuple(channels)
    if not 0 <= n <= len(channels) - 2:
        raise ValueError(f"n must be in 0..{len(channels) - 2}, got {n}")
    hidden = _hidden_plan(len(channels), n, channels, in_channels, rates, padding, norm)
    cls = LayerSpec("classifier", channels[-1], num_classes, kernel=1, norm=False)
    name = "basic" if n == 0 else f"afn{n}"
    return ArchSpec(name, in_channels, num_classes, tuple(hidden) + (cls,))


def aspp(fusion: str, in_channels: int = 1, num_classes: int = 2,
         channels: Sequence[int] = DEFAULT_CHANNELS, rates: Sequence[int] = DEFAULT_RATES,
         padding: str = "same", norm: bool = True) -> ArchSpec:
    """Basic followed by an ASPP block (sum or concat fusion) before the classifier."""
    base = basic(in_channels, num_classes, channels, padding, norm)
    last = channels[-1]
    block = LayerSpec("aspp", last, last, rates=tuple(rates), norm=norm, fusion=fusion)
    tag = {"sum": "s", "concat": "c"}[fusion]
    return ArchSpec(f"aspp-{tag}", in_channels, num_classes,
                    base.hidden + (block, base.layers[-1]))


def arch_by_name(name: str, **kwargs) -> ArchSpec:
    name = name.lower()
    if name == "basic":
        kwargs.pop("rates", None)
        return basic(**kwargs)
    if name.startswith("afn"):
        return afn(int(name[3:].lstrip("-")), **kwargs)
    if name in ("aspp-c", "aspp-s"):
        return aspp("concat" if name.endswith("c") else "sum", **kwargs)
    raise ValueError(f"unknown architecture {name!r}")


# --------------------------------------------------------------------------
# model


class Model:
    """A built network: hidden layers (+ norm + ReLU), residual pairs, classifier."""

    def __init__(self, arch: ArchSpec, seed: int = 0, dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.cores, self.norms = [], []
        for i, spec in enumerate(arch.layers):
            name = f"model.layer{i + 1}"
            if spec.kind == "conv" or spec.kind == "classifier":
                core = Conv3d(spec.conv_spec(), f"{name}.conv", rng, dtype)
            elif spec.kind == "autofocus":
                core = AutofocusLayer(spec.autofocus_config(), f"{name}.af", rng, dtype)
            elif spec.kind == "aspp":
                core = ASPPLayer(spec.in_channels, spec.out_channels, spec.rates, spec.fusion,
                                 f"{name}.aspp", rng, dtype)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            self.cores.append(core)
            self.norms.append(BatchNorm3d(spec.out_channels, f"{name}.bn", dtype)
                              if spec.norm and spec.kind != "classifier" else None)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def parameters(self) -> list[Parameter]:
        out = []
        for core, norm in zip(self.cores, self.norms):
            out += core.parameters()
            if norm is not None:
                out += norm.parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for norm in self.norms:
            if norm is not None:
                out.update(norm.buffers())
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name, in a fixed order."""
        out = {p.name: p.value for p in self.parameters()}
        out.update(self.buffers())
        return out

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | set(self.buffers())
        if set(values) != expected:
            missing, extra = expected - set(values), set(values) - expected
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if values[name].shape != p.shape:
                raise ValueError(f"{name}: shape {values[name].shape} != {p.shape}")
            p.value[...] = values[name]
        for norm in self.norms:
            if norm is not None:
                norm.load_buffers({k: v.astype(self.dtype) for k, v in values.items()})

    def autofocus_layers(self) -> dict[int, AutofocusLayer]:
        """1-based layer index -> autofocus layer."""
        return {i + 1: c for i, c in enumerate(self.cores) if isinstance(c, AutofocusLayer)}

    def forward(self, x, mode: str = "train") -> Node:
        """Class logits for a ``(B, C, D, H, W)`` batch (or one unbatched volume)."""
        x = ad.as_node(x)
        unbatched = x.value.ndim == 4
        if unbatched:
            x = ad.reshape(x, (1, *x.shape))
        h = x
        block_in, group = None, None
        hidden = self.arch.hidden
        for i, spec in enumerate(hidden):
            if spec.residual_group is not None and spec.residual_group != group:
                block_in, group = h, spec.residual_group
            h = self.cores[i](h, mode)
            if self.norms[i] is not None:
                h = self.norms[i](h, mode)
            h = relu(h)
            closes = spec.residual_group is not None and (
                i + 1 == len(hidden) or hidden[i + 1].residual_group != spec.residual_group)
            if closes:
                h = residual_add(h, block_in)
        logits = self.cores[-1](h, mode)
        return ad.reshape(logits, logits.shape[1:]) if unbatched else logits

    __call__ = forward

    def predict_proba(self, x, mode: str = "eval") -> np.ndarray:
        return ad.softmax(self.forward(x, mode), axis=-4).value

    @property
    def attention_maps(self) -> dict[int, np.ndarray]:
        return {i: layer.last_attention for i, layer in self.autofocus_layers().items()}


def build(arch: ArchSpec, seed: int = 0, dtype=np.float64) -> Model:
    return Model(arch, seed, dtype)


# --------------------------------------------------------------------------
# receptive field


@dataclass(frozen=True)
class ReceptiveFieldState:
    layer: int
    kind: str
    phi_min: tuple[int, int, int]
    phi_max: tuple[int, int, int]
    eta: tuple[int, int, int]

    @property
    def phi(self) -> tuple[int, int, int]:
        return self.phi_max


def receptive_field(arch: ArchSpec | Sequence[LayerSpec]) -> list[ReceptiveFieldState]:
    """Grow the receptive field layer by layer: phi += rate * (kernel - 1) * eta.

    Multi-rate layers report the smallest-rate and largest-rate extents as
    ``phi_min`` / ``phi_max``; ``eta`` is the stride product of the
    preceding layers.
    """
    layers = arch.layers if isinstance(arch, ArchSpec) else arch
    lo = np.ones(3, dtype=int)
    hi = np.ones(3, dtype=int)
    eta = np.ones(3, dtype=int)
    out = []
    for i, spec in enumerate(layers):
        rates = spec.rates if spec.kind in ("autofocus", "aspp") else (spec.dilation,)
        kernel = np.array(ConvSpec(1, 1, spec.kernel).kernel)
        lo = lo + min(rates) * (kernel - 1) * eta
        hi = hi + max(rates) * (kernel - 1) * eta
        out.append(ReceptiveFieldState(i + 1, spec.kind, tuple(int(v) for v in lo),
                                       tuple(int(v) for v in hi), tuple(int(v) for v in eta)))
        eta = eta * np.array(ConvSpec(1, 1, 1, stride=spec.stride).stride)
    return out


# --------------------------------------------------------------------------
# parameter accounting


def _is_kernel(name: str) -> bool:
    return name.endswith(".kernel")


def param_count(model: Model | ArchSpec, mode: str = "kernels_only") -> dict[str, int]:
    """Trainable parameter counts per parameter name, plus a ``"total"`` entry.

    ``kernels_only`` counts convolution weights; ``all`` adds biases and
    normalization scales/shifts.  The shared autofocus kernel is one
    parameter, so it is counted once whatever the number of rates.
    """
    if mode not in ("kernels_only", "all"):
        raise ValueError(f"mode must be 'kernels_only' or 'all', got {mode!r}")
    if isinstance(model, ArchSpec):
        model = Model(model)
    table = {p.name: int(p.value.size) for p in model.parameters()
             if p.trainable and (mode == "all" or _is_kernel(p.name))}
    table["total"] = sum(table.values())
    return table


def attention_head_count(in_channels: int, K: int, mode: str = "kernels_only") -> int:
    """Parameters added by one attention head on top of a plain conv layer."""
    s1, s2 = attention_specs(AutofocusConfig(in_channels, in_channels, tuple(range(1, K + 1))))
    n = int(np.prod(s1.kernel_shape) + np.prod(s2.kernel_shape))
    if mode == "all":
        n += s1.out_channels + s2.out_channels
    return n


# --------------------------------------------------------------------------
# weight files

WEIGHT_MAGIC = b"AFNW"
OPTIM_MAGIC = b"AFNO"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def write_records(fh, records: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<Q", len(records)))
    for name, arr in records.items():
        raw = name.encode()
        arr = np.asarray(arr)
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise WeightFileError(f"truncated file while reading {what}")
    return data


def read_records(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<Q", _read_exact(fh, 8, "record count"))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, n, "name").decode()
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name} extents"))
        size = int(np.prod(shape))
        data = _read_exact(fh, 8 * size, f"{name} data")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if fh.read(1):
        raise WeightFileError("trailing bytes after last record")
    return out


def write_header(fh, magic: bytes, arch: ArchSpec) -> None:
    fh.write(magic + struct.pack("<I", FORMAT_VERSION) + arch.digest())


def read_header(fh, magic: bytes, arch: ArchSpec) -> None:
    head = _read_exact(fh, 4 + 4 + 32, "header")
    if head[:4] != magic:
        raise WeightFileError(f"bad magic {head[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", head[4:8])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    if head[8:40] != arch.digest():
        raise WeightFileError(f"architecture hash mismatch for {arch.name}")


def save_weights(model: Model, path) -> None:
    with open(path, "wb") as fh:
        write_header(fh, WEIGHT_MAGIC, model.arch)
        write_records(fh, model.state())


def load_weights(path, arch: ArchSpec, dtype=np.float64) -> Model:
    model = Model(arch, dtype=dtype)
    with open(path, "rb") as fh:
        read_header(fh, WEIGHT_MAGIC, arch)
        model.load_state(read_records(fh))
    return model
