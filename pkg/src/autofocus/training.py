"""ADAM, the training loop, sliding-window evaluation and attention export."""

from __future__ import annotations

import configparser
import json
import struct
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .data_io import VolumeRecord, read_manifest, read_volume, sample_segments, write_volume
from .loss_metrics import dice_score, format_csv, metrics_rows, soft_dice_loss
from .models import (DEFAULT_CHANNELS, DEFAULT_RATES, OPTIM_MAGIC, ArchSpec, Model,
                     WeightFileError, arch_by_name, read_header, read_records, save_weights,
                     write_header, write_records, load_weights)


@dataclass
class TrainConfig:
    arch: str = "afn6"
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    rates: tuple[int, ...] = DEFAULT_RATES
    norm: bool = True
    padding: str = "same"
    in_channels: int = 1
    num_classes: int = 7
    epochs: int = 300
    steps_per_epoch: int = 20
    batch: int = 7
    segment: int = 75
    lr: float = 0.001
    lr_final: float = 0.0001
    lr_drop_epoch: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    class_balance: bool = True
    dice_classes: str = "present"
    manifest: str = ""
    out_dir: str = "runs"
    checkpoint_every: int = 50
    target_loss: float | None = None
    loss_window: int = 20
    eval_overlap: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs, batch and steps_per_epoch must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def arch_spec(self) -> ArchSpec:
        return arch_by_name(self.arch, in_channels=self.in_channels, num_classes=self.num_classes,
                            channels=self.channels, rates=self.rates, padding=self.padding,
                            norm=self.norm)


PROFILES = {
    "paper": TrainConfig(),
    "desk": TrainConfig(arch="afn2", channels=(8, 8, 12, 12), rates=(2, 6), num_classes=3,
                        epochs=100, steps_per_epoch=20, batch=2, segment=32, lr=0.003,
                        lr_final=0.0003, lr_drop_epoch=75, checkpoint_every=25,
                        target_loss=0.03),
}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        return None if value.strip().lower() == "none" else float(value)
    return value.strip()


def config_from_text(text: str) -> TrainConfig:
    """Parse a ``[train]`` section of ``key = value`` lines.

    ``profile = desk|paper`` picks the defaults; every other key overrides a
    :class:`TrainConfig` field.  Tuples are whitespace- or comma-separated.
    """
    cp = configparser.ConfigParser()
    cp.read_string(text)
    section = dict(cp["train"]) if cp.has_section("train") else {}
    base = PROFILES[section.pop("profile", "paper").strip()]
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for key, value in section.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(value, getattr(base, key))
    return replace(base, **updates)


def load_config(path) -> TrainConfig:
    cfg = config_from_text(Path(path).read_text())
    if cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg = replace(cfg, manifest=str(Path(path).parent / cfg.manifest))
    return cfg


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-indexed ``epoch``: drops once ``lr_drop_epoch`` is reached."""
    return cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_final


# --------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Parameter], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place ADAM update of every trainable parameter."""
    for p in params:
        if p.trainable and not np.all(np.isfinite(grads[p.name])):
            raise FloatingPointError(f"non-finite gradient for {p.name}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def save_optimizer(state: AdamState, arch: ArchSpec, path) -> None:
    records = {}
    for name in state.m:
        records[f"{name}.m"] = state.m[name]
        records[f"{name}.v"] = state.v[name]
    with open(path, "wb") as fh:
        write_header(fh, OPTIM_MAGIC, arch)
        fh.write(struct.pack("<Q", state.step))
        write_records(fh, records)


def load_optimizer(path, arch: ArchSpec, dtype=np.float32) -> AdamState:
    with open(path, "rb") as fh:
        read_header(fh, OPTIM_MAGIC, arch)
        raw = fh.read(8)
        if len(raw) != 8:
            raise WeightFileError("truncated file while reading step counter")
        (step,) = struct.unpack("<Q", raw)
        records = read_records(fh)
    state = AdamState(step=step)
    for key, arr in records.items():
        name, kind = key.rsplit(".", 1)
        getattr(state, kind)[name] = arr.astype(dtype)
    return state


def save_arch(arch: ArchSpec, path) -> None:
    Path(path).write_text(arch.to_json())


def load_arch(path) -> ArchSpec:
    from .models import LayerSpec
    d = json.loads(Path(path).read_text())
    layers = tuple(LayerSpec(**{**l, "rates": tuple(l["rates"])}) for l in d.pop("layers"))
    return ArchSpec(layers=layers, **d)


# --------------------------------------------------------------------------
# training loop


def make_batch(volumes: Sequence[VolumeRecord], cfg: TrainConfig, step: int):
    """Segments for global ``step``; a pure function of (volumes, seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    images, labels = [], []
    for _ in range(cfg.batch):
        vol = volumes[int(rng.integers(len(volumes)))]
        seg = min(cfg.segment, *vol.shape)
        (s,) = sample_segments(vol, seg, 1, cfg.class_balance, rng)
        images.append(s.image)
        labels.append(s.labels)
    return np.stack(images).astype(cfg.dtype), np.stack(labels)


class Trainer:
    def __init__(self, cfg: TrainConfig, volumes: Sequence[VolumeRecord], model: Model | None = None,
                 log: Callable[[dict], None] | None = None):
        self.cfg = cfg
        self.volumes = list(volumes)
        if not self.volumes:
            raise ValueError("no training volumes")
        self.arch = cfg.arch_spec()
        self.model = model or Model(self.arch, cfg.seed, np.dtype(cfg.dtype))
        self.opt = AdamState()
        self.losses: list[float] = []
        self.log = log
        self.converged_step: int | None = None

    @property
    def step_count(self) -> int:
        return self.opt.step

    def train_step(self) -> float:
        cfg = self.cfg
        epoch = self.opt.step // cfg.steps_per_epoch
        x, y = make_batch(self.volumes, cfg, self.opt.step)
        params = self.model.parameters()
        ad.zero_grads(params)
        probs = ad.softmax(self.model.forward(x, "train"), axis=1)
        loss = soft_dice_loss(probs, y, cfg.dice_classes)
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"non-finite loss at step {self.opt.step}")
        grads = ad.backward(loss, params)
        adam_step(params, grads.grads, self.opt, lr_at(epoch, cfg), cfg.beta1, cfg.beta2, cfg.eps)
        value = float(loss.value)
        self.losses.append(value)
        return value

    def target_reached(self) -> bool:
        cfg = self.cfg
        if cfg.target_loss is None or len(self.losses) < cfg.loss_window:
            return False
        return float(np.mean(self.losses[-cfg.loss_window:])) < cfg.target_loss

    def run(self, max_steps: int | None = None, checkpoint_dir=None) -> list[float]:
        """Train until ``epochs`` are done, the loss target is met, or ``max_steps``."""
        cfg = self.cfg
        total = cfg.epochs * cfg.steps_per_epoch
        if max_steps is not None:
            total = min(total, max_steps)
        t0 = time.perf_counter()
        epoch_losses = []
        while self.opt.step < total:
            epoch = self.opt.step // cfg.steps_per_epoch
            epoch_losses.append(self.train_step())
            done = self.target_reached()
            if done and self.converged_step is None:
                self.converged_step = self.opt.step
            if self.opt.step % cfg.steps_per_epoch == 0 or done or self.opt.step == total:
                record = {"epoch": epoch, "step": self.opt.step,
                          "loss": float(np.mean(epoch_losses)), "lr": lr_at(epoch, cfg),
                          "seconds": round(time.perf_counter() - t0, 3)}
                epoch_losses = []
                if self.log:
                    self.log(record)
                end_of_epoch = self.opt.step % cfg.steps_per_epoch == 0
                if checkpoint_dir is not None and end_of_epoch and (epoch + 1) % cfg.checkpoint_every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:04d}")
            if done:
                break
        if checkpoint_dir is not None:
            self.save_checkpoint(Path(checkpoint_dir) / "final")
        return self.losses

    def save_checkpoint(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        wpath, opath = prefix.with_suffix(".afnw"), prefix.with_suffix(".afno")
        save_weights(self.model, wpath)
        save_arch(self.arch, str(wpath) + ".arch.json")
        save_optimizer(self.opt, self.arch, opath)
        return wpath, opath

    def load_checkpoint(self, prefix) -> None:
        prefix = Path(prefix)
        self.model = load_weights(prefix.with_suffix(".afnw"), self.arch, np.dtype(self.cfg.dtype))
        self.opt = load_optimizer(prefix.with_suffix(".afno"), self.arch, np.dtype(self.cfg.dtype))


def load_volumes(manifest) -> list[VolumeRecord]:
    paths = read_manifest(manifest)
    if not paths:
        raise ValueError(f"manifest {manifest} lists no volumes")
    return [read_volume(p) for p in paths]


def train(cfg: TrainConfig, volumes: Sequence[VolumeRecord] | None = None,
          log: Callable[[dict], None] | None = None, max_steps: int | None = None) -> Trainer:
    """Full training run; writes checkpoints and a JSON-lines log under ``cfg.out_dir``."""
    if volumes is None:
        volumes = load_volumes(cfg.manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def write(record):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        if log:
            log(record)

    trainer = Trainer(cfg, volumes, log=write)
    trainer.run(max_steps, checkpoint_dir=out)
    return trainer


# --------------------------------------------------------------------------
# inference and evaluation


def tile_starts(n: int, window: int, overlap: int) -> list[int]:
    """Window origins along one axis: stride ``window - overlap``, last window flush with the end."""
    window = min(window, n)
    stride = max(1, window - overlap)
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_logits(model: Model, image: np.ndarray, window: int, overlap: int = 8,
                          return_coverage: bool = False):
    """Average the logits of overlapping windows over a whole ``(C, D, H, W)`` volume."""
    spatial = image.shape[1:]
    acc = np.zeros((model.arch.num_classes, *spatial), dtype=np.float64)
    cover = np.zeros(spatial, dtype=np.int32)
    win = [min(window, n) for n in spatial]
    grids = [tile_starts(n, w, overlap) for n, w in zip(spatial, win)]
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                sl = (slice(z, z + win[0]), slice(y, y + win[1]), slice(x, x + win[2]))
                patch = image[(slice(None),) + sl][None].astype(model.dtype)
                acc[(slice(None),) + sl] += model.forward(patch, "eval").value[0]
                cover[sl] += 1
    logits = acc / cover
    return (logits, cover) if return_coverage else logits


@dataclass
class EvalResult:
    per_volume: dict[str, list[float]]
    rows: list[tuple[str, str, float]]
    predictions: dict[str, np.ndarray]

    @property
    def csv(self) -> str:
        return format_csv(self.rows)

    def mean_dice(self, foreground_only: bool = True) -> float:
        start = 1 if foreground_only else 0
        return float(np.mean([s[start:] for s in self.per_volume.values()]))


def evaluate(model: Model, volumes: Sequence[VolumeRecord], window: int, overlap: int = 8,
             class_names: Sequence[str] | None = None) -> EvalResult:
    if not volumes:
        raise ValueError("nothing to evaluate")
    n_cls = model.arch.num_classes
    names = list(class_names) if class_names else [f"class{c}" for c in range(n_cls)]
    per_volume, preds = {}, {}
    for vol in volumes:
        pred = np.argmax(sliding_window_logits(model, vol.image, window, overlap), axis=0)
        preds[vol.id] = pred.astype(np.uint8)
        per_volume[vol.id] = [dice_score(pred, vol.labels, c, n_cls) for c in range(n_cls)]
    return EvalResult(per_volume, metrics_rows(per_volume, names), preds)


def export_attention(model: Model, volume: VolumeRecord, layer: int, out_dir) -> list[Path]:
    """Write the K attention maps of hidden ``layer`` (1-based) as AFNV volumes."""
    af = model.autofocus_layers()
    if layer not in af:
        raise ValueError(f"layer {layer} is not an autofocus layer (autofocus layers: {sorted(af)})")
    model.forward(volume.image[None].astype(model.dtype), "eval")
    lam = af[layer].last_attention[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, rate in enumerate(af[layer].cfg.rates):
        path = out_dir / f"{volume.id}_layer{layer}_scale{k + 1}_r{rate}.afnv"
        write_volume(VolumeRecord(lam[k:k + 1], np.zeros(lam.shape[1:], np.uint8),
                                  volume.spacing, path.stem), path)
        paths.append(path)
    return paths
