"""Volumes on disk, intensity normalization, synthetic phantoms, segment sampling."""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"AFNV"
VOLUME_VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sI4I3dB")
_MAX_ELEMENTS = 1 << 34


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeRecord:
    image: np.ndarray  # (C, D, H, W) float32
    labels: np.ndarray  # (D, H, W) uint8
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = "volume"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.image.ndim != 4 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


# --------------------------------------------------------------------------
# AFNV files


def write_volume(volume: VolumeRecord, path) -> None:
    c, d, h, w = volume.image.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, c, d, h, w, *volume.spacing, DTYPE_FLOAT32))
        fh.write(np.ascontiguousarray(volume.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(volume.labels, dtype=np.uint8).tobytes())


def read_volume(path) -> VolumeRecord:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, c, d, h, w, sx, sy, sz, dtype = _HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise VolumeFormatError(f"{path}: unknown dtype tag {dtype}")
    n_spatial = d * h * w
    if min(c, d, h, w) < 1 or c * n_spatial > _MAX_ELEMENTS:
        raise VolumeFormatError(f"{path}: invalid dimensions {(c, d, h, w)}")
    expected = _HEADER.size + 4 * c * n_spatial + n_spatial
    if len(data) != expected:
        raise VolumeFormatError(
            f"{path}: truncated or oversized payload ({len(data)} bytes, header implies {expected})"
        )
    off = _HEADER.size
    image = np.frombuffer(data, "<f4", c * n_spatial, off).reshape(c, d, h, w).astype(np.float32)
    labels = np.frombuffer(data, np.uint8, n_spatial, off + 4 * c * n_spatial).reshape(d, h, w).copy()
    return VolumeRecord(image, labels, (sx, sy, sz), Path(path).stem)


def read_manifest(path) -> list[Path]:
    path = Path(path)
    lines = [l.strip() for l in path.read_text().splitlines()]
    return [(path.parent / l) if not Path(l).is_absolute() else Path(l) for l in lines if l]


def write_manifest(paths: Sequence, path) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in paths))


# --------------------------------------------------------------------------
# normalization


def foreground_mask(volume: VolumeRecord) -> np.ndarray:
    return np.any(volume.image != 0, axis=0)


def normalize(volume: VolumeRecord, mask: str | np.ndarray = "all") -> VolumeRecord:
    """Zero mean, unit variance per channel over ``mask``.

    ``mask`` is ``"all"`` (whole volume), ``"nonzero"`` (voxels where any
    channel is nonzero; voxels outside stay 0) or a boolean array.
    """
    if isinstance(mask, str):
        if mask == "all":
            m = np.ones(volume.shape, dtype=bool)
        elif mask == "nonzero":
            m = foreground_mask(volume)
        else:
            raise ValueError(f"unknown mask rule {mask!r}")
    else:
        m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("normalization mask is empty")
    out = np.zeros_like(volume.image)
    for ch, img in enumerate(volume.image.astype(np.float64)):
        vals = img[m]
        sigma = vals.std()
        if sigma == 0:
            raise ValueError(f"channel {ch} is constant inside the mask")
        out[ch] = np.where(m, (img - vals.mean()) / sigma, 0.0)
    return replace(volume, image=out)


# --------------------------------------------------------------------------
# synthetic phantoms


@dataclass(frozen=True)
class ClassSpec:
    name: str
    radius: tuple[float, float] = (4.0, 8.0)
    intensity: float = 1.0
    intensity_std: float = 0.1
    texture_freq: float = 0.0
    texture_amp: float = 0.0
    instances: int = 1


@dataclass(frozen=True)
class PhantomSpec:
    grid: tuple[int, int, int] = (48, 48, 48)
    classes: tuple[ClassSpec, ...] = (
        ClassSpec("sphere", (5, 9), 2.0, 0.1, 0.25, 0.3, 2),
        ClassSpec("blob", (4, 7), -1.5, 0.1, 0.1, 0.3, 2),
    )
    background: float = 0.0
    noise: float = 0.2
    scale_probe: int | None = None  # class index (1-based) that gets small and large instances
    small_radius: tuple[float, float] = (3.0, 4.0)
    large_radius: tuple[float, float] = (12.0, 14.0)
    max_tries: int = 2000
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    @property
    def class_names(self) -> list[str]:
        return ["background"] + [c.name for c in self.classes]


@dataclass(frozen=True)
class PlacedShape:
    label: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.radii))


class PhantomError(RuntimeError):
    pass


def _place_shapes(spec: PhantomSpec, rng: np.random.Generator) -> list[PlacedShape]:
    grid = np.array(spec.grid)
    wanted = []
    for label, cls in enumerate(spec.classes, start=1):
        wanted += [(label, cls.radius)] * cls.instances
    if spec.scale_probe is not None and grid.min() >= 64:
        wanted += [(spec.scale_probe, spec.large_radius), (spec.scale_probe, spec.small_radius)]
    # largest first so big shapes are not squeezed out
    wanted.sort(key=lambda w: -w[1][1])
    placed: list[PlacedShape] = []
    for label, (rlo, rhi) in wanted:
        for _ in range(spec.max_tries):
            radii = rng.uniform(rlo, rhi, size=3)
            lo = np.ceil(radii) + 1
            hi = grid - np.ceil(radii) - 2
            if np.any(hi < lo):
                continue
            center = rng.uniform(lo, hi)
            if all(np.linalg.norm(center - np.array(p.center)) > radii.max() + max(p.radii) + 2
                   for p in placed):
                placed.append(PlacedShape(label, tuple(center), tuple(radii)))
                break
        else:
            name = spec.class_names[label]
            raise PhantomError(f"could not place an instance of class {name!r} "
                               f"within {spec.max_tries} tries")
    return placed


def generate_phantom(spec: PhantomSpec, index: int = 0) -> VolumeRecord:
    """Render ellipsoids of each class into a noisy volume.

    Deterministic in ``(spec.seed, index)``.  Each class has its own base
    intensity and a sinusoidal texture at its own frequency.
    """
    rng = np.random.default_rng([spec.seed, index])
    shapes = _place_shapes(spec, rng)
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.grid], indexing="ij")
    labels = np.zeros(spec.grid, dtype=np.uint8)
    image = np.full(spec.grid, spec.background, dtype=np.float64)
    diag = (zz + yy + xx) / np.sqrt(3.0)
    for s in shapes:
        cls = spec.classes[s.label - 1]
        inside = (((zz - s.center[0]) / s.radii[0]) ** 2 + ((yy - s.center[1]) / s.radii[1]) ** 2
                  + ((xx - s.center[2]) / s.radii[2]) ** 2) <= 1.0
        labels[inside] = s.label
        texture = cls.texture_amp * np.sin(2 * np.pi * cls.texture_freq * diag[inside])
        image[inside] = cls.intensity + texture + cls.intensity_std * rng.standard_normal(inside.sum())
    image += spec.noise * rng.standard_normal(spec.grid)
    return VolumeRecord(image[None].astype(np.float32), labels, id=f"phantom{index:03d}")


def phantom_shapes(spec: PhantomSpec, index: int = 0) -> list[PlacedShape]:
    """The shapes :func:`generate_phantom` renders for ``index``."""
    return _place_shapes(spec, np.random.default_rng([spec.seed, index]))


def _parse_pair(text: str) -> tuple[float, float]:
    a, b = (float(v) for v in text.replace(",", " ").split())
    return a, b


def load_phantom_spec(path) -> PhantomSpec:
    """Read a phantom spec from ``key = value`` text.

    ``[phantom]`` holds grid, background, noise, scale_probe and seed; each
    ``[class NAME]`` section holds radius (lo hi), intensity, intensity_std,
    texture_freq, texture_amp and instances.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return phantom_spec_from_config(cp)


def phantom_spec_from_config(cp: configparser.ConfigParser) -> PhantomSpec:
    base = cp["phantom"] if cp.has_section("phantom") else {}
    classes = []
    for section in cp.sections():
        if not section.startswith("class "):
            continue
        s = cp[section]
        classes.append(ClassSpec(
            section[len("class "):].strip(),
            _parse_pair(s.get("radius", "4 8")),
            s.getfloat("intensity", 1.0), s.getfloat("intensity_std", 0.1),
            s.getfloat("texture_freq", 0.0), s.getfloat("texture_amp", 0.0),
            s.getint("instances", 1)))
    kwargs = {}
    if "grid" in base:
        g = [int(v) for v in base["grid"].replace(",", " ").split()]
        kwargs["grid"] = tuple(g * 3 if len(g) == 1 else g)
    for key in ("background", "noise"):
        if key in base:
            kwargs[key] = float(base[key])
    if "scale_probe" in base:
        kwargs["scale_probe"] = int(base["scale_probe"])
    if "seed" in base:
        kwargs["seed"] = int(base["seed"])
    if classes:
        kwargs["classes"] = tuple(classes)
    return PhantomSpec(**kwargs)


# --------------------------------------------------------------------------
# segment sampling


@dataclass
class Segment:
    image: np.ndarray
    labels: np.ndarray
    corner: tuple[int, int, int]
    center: tuple[int, int, int]
    center_class: int


def sample_segments(volume: VolumeRecord, segment_size: int | Sequence[int], batch: int,
                    class_balance: bool = True, seed=0) -> list[Segment]:
    """Copy ``batch`` segments out of ``volume``.

    With class balance, each segment first draws a class uniformly among the
    classes present, then a voxel of that class; the segment is centred on
    it, shifted inward where it would leave the volume.
    """
    size = np.array([segment_size] * 3 if np.isscalar(segment_size) else segment_size)
    shape = np.array(volume.shape)
    if np.any(size > shape):
        raise ValueError(f"segment {tuple(size)} larger than volume {tuple(shape)}")
    rng = np.random.default_rng(seed)
    flat = volume.labels.ravel()
    present = np.unique(flat)
    by_class = {}
    out = []
    for _ in range(batch):
        if class_balance:
            c = int(present[rng.integers(len(present))])
            if c not in by_class:
                by_class[c] = np.flatnonzero(flat == c)
            center = np.array(np.unravel_index(by_class[c][rng.integers(len(by_class[c]))], volume.shape))
        else:
            center = rng.integers(0, shape)
            c = int(volume.labels[tuple(center)])
        corner = np.clip(center - size // 2, 0, shape - size)
        sl = tuple(slice(a, a + n) for a, n in zip(corner, size))
        out.append(Segment(volume.image[(slice(None),) + sl].copy(), volume.labels[sl].copy(),
                           tuple(int(v) for v in corner), tuple(int(v) for v in center), c))
    return out
