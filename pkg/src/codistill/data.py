"""Dataset registry, procedural image styles and the balanced batch composer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CompositionError, ContractError, FormatError, RegistryError

GENERIC = "generic"
STYLES = ("noise", "gradients", "blobs", "stripes")

# Per-style base tint; the procedural patterns are roughly zero-mean around it,
# so styles differ in channel-mean signature (a cheap stand-in for domain shift).
_TINTS = {
    "noise": (0.25, 0.50, 0.75),
    "gradients": (0.75, 0.30, 0.45),
    "blobs": (0.45, 0.75, 0.30),
    "stripes": (0.40, 0.35, 0.80),
}


@dataclass(frozen=True)
class SampleMeta:
    image_id: str
    dataset_id: str
    pixels: np.ndarray = field(repr=False)
    group: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    id: str
    owner: str
    source: str = "synthetic"
    style: str = "noise"
    count: int = 64
    seed: int = 0
    path: str | None = None
    glob: str = "*.p[gp]m"
    image_size: int = 28
    channels: int = 3

    @property
    def is_generic(self) -> bool:
        return self.owner == GENERIC


def _style_index(style: str) -> int:
    try:
        return STYLES.index(style)
    except ValueError:
        raise ContractError(f"unknown style {style!r}; expected one of {', '.join(STYLES)}") from None


def synth_image(style: str, seed: int, size: int, channels: int = 3) -> SampleMeta:
    """Deterministic procedural image for (style, seed), values clipped to [0, 1]."""
    rng = np.random.default_rng([int(seed), _style_index(style)])
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    if style == "noise":
        pattern = rng.uniform(-0.2, 0.2, (channels, size, size))
    elif style == "gradients":
        theta = rng.uniform(0, 2 * np.pi, channels)
        pattern = 0.2 * (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    elif style == "blobs":
        pattern = np.zeros((channels, size, size))
        for _ in range(3):
            cy, cx = rng.uniform(-0.8, 0.8, 2)
            r = rng.uniform(0.15, 0.4)
            amp = rng.uniform(-0.25, 0.25, channels)
            pattern += amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    else:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(3.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        pattern = 0.2 * wave[None] * np.ones((channels, 1, 1))
    tint = np.resize(np.asarray(_TINTS[style]), channels)
    jitter = rng.uniform(-0.03, 0.03)
    img = np.clip(tint[:, None, None] + jitter + pattern, 0.0, 1.0)
    return SampleMeta(f"{style}:{seed}", "", img)


# PGM / PPM (binary, maxval 255)

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file as (C, H, W) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: truncated PNM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM type {magic!r}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    if len(raw) - pos < n:
        raise FormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos).reshape(h, w, c)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write (C, H, W) floats in [0, 1] as P5 (C == 1) or P6 (C == 3)."""
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ContractError("PNM output needs 1 or 3 channels")
    data = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())


class Registry:
    """Validated, immutable set of dataset manifests grouped by owning teacher."""

    def __init__(
        self,
        manifests: Sequence[DatasetManifest],
        teacher_ids: Sequence[str],
        generic_teachers: Iterable[str] = (),
    ):
        self.manifests = {m.id: m for m in manifests}
        self.teacher_ids = list(teacher_ids)
        self.generic_teachers = set(generic_teachers)
        self._files: dict[str, list[Path]] = {}
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def owned(self, teacher_id: str) -> list[str]:
        return [m.id for m in self.manifests.values() if m.owner == teacher_id]

    @property
    def generic_group(self) -> list[str]:
        return [m.id for m in self.manifests.values() if m.is_generic]

    def teacher_group(self, teacher_id: str) -> list[str]:
        """D_i; task-agnostic teachers also own the generic data."""
        group = self.owned(teacher_id)
        if teacher_id in self.generic_teachers:
            group += self.generic_group
        return group

    def sampling_groups(self) -> list[tuple[str, list[str]]]:
        groups = [(tid, self.owned(tid)) for tid in self.teacher_ids]
        if self.generic_group:
            groups.append((GENERIC, self.generic_group))
        return groups

    def size(self, dataset_id: str) -> int:
        m = self._manifest(dataset_id)
        if m.source == "directory":
            return len(self._files[dataset_id])
        return m.count

    def _manifest(self, dataset_id: str) -> DatasetManifest:
        try:
            return self.manifests[dataset_id]
        except KeyError:
            raise RegistryError(f"unknown dataset id {dataset_id!r}") from None

    def image_id(self, dataset_id: str, index: int) -> str:
        return f"{dataset_id}:{index}"

    def pixels(self, dataset_id: str, index: int) -> np.ndarray:
        m = self._manifest(dataset_id)
        if not 0 <= index < self.size(dataset_id):
            raise RegistryError(f"index {index} out of range for dataset {dataset_id!r}")
        key = (dataset_id, index)
        img = self._cache.get(key)
        if img is None:
            if m.source == "directory":
                img = read_pnm(self._files[dataset_id][index])
                if img.shape[0] == 1 and m.channels == 3:
                    img = np.repeat(img, 3, axis=0)
                if img.shape != (m.channels, m.image_size, m.image_size):
                    raise FormatError(
                        f"{self._files[dataset_id][index]}: image shape {img.shape} does not "
                        f"match ({m.channels}, {m.image_size}, {m.image_size})"
                    )
            else:
                img = synth_image(m.style, m.seed * 1_000_003 + index, m.image_size,
                                  m.channels).pixels
            self._cache[key] = img
        return img

    def sample(self, dataset_id: str, index: int, group: str = "") -> SampleMeta:
        return SampleMeta(self.image_id(dataset_id, index), dataset_id,
                          self.pixels(dataset_id, index), group)


def load_registry(
    manifests: Sequence[DatasetManifest],
    teacher_ids: Sequence[str],
    generic_teachers: Iterable[str] = (),
) -> Registry:
    """Validate manifests against the teacher list and build a :class:`Registry`."""
    if not manifests:
        raise RegistryError("registry is empty: every teacher needs at least one dataset")
    generic_teachers = set(generic_teachers)
    seen: set[str] = set()
    for m in manifests:
        if m.id in seen:
            raise RegistryError(f"duplicate dataset id {m.id!r}")
        seen.add(m.id)
        if "," in m.owner:
            raise RegistryError(f"dataset {m.id!r} is owned by more than one teacher ({m.owner})")
        if m.owner != GENERIC and m.owner not in teacher_ids:
            raise RegistryError(f"dataset {m.id!r} has unknown owner {m.owner!r}")
        if m.source not in ("synthetic", "directory"):
            raise RegistryError(f"dataset {m.id!r}: unknown source {m.source!r}")
        if m.source == "synthetic":
            _style_index(m.style)
            if m.count < 1:
                raise RegistryError(f"dataset {m.id!r} must contain at least one image")
    unknown = generic_teachers - set(teacher_ids)
    if unknown:
        raise RegistryError(f"generic teacher(s) not declared: {sorted(unknown)}")
    reg = Registry(manifests, teacher_ids, generic_teachers)
    if reg.generic_group and not generic_teachers:
        raise RegistryError(
            "generic datasets are orphaned: mark at least one teacher as generic (task-agnostic)"
        )
    for tid in teacher_ids:
        if not reg.owned(tid):
            raise RegistryError(f"teacher {tid!r} owns no dataset")
    for m in manifests:
        if m.source == "directory":
            if not m.path:
                raise RegistryError(f"dataset {m.id!r}: directory source needs a path")
            files = sorted(Path(m.path).glob(m.glob))
            if not files:
                raise RegistryError(f"dataset {m.id!r}: no files match {m.path}/{m.glob}")
            reg._files[m.id] = files
    return reg


@dataclass
class Batch:
    samples: list[SampleMeta]
    images: np.ndarray

    @property
    def dataset_ids(self) -> list[str]:
        return [s.dataset_id for s in self.samples]

    @property
    def image_ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)


def compose_batch(registry: Registry, per_teacher_count: int, rng: np.random.Generator) -> Batch:
    """Draw exactly ``k`` samples from every sampling group.

    Within a group, the dataset is chosen uniformly, then an image uniformly
    within that dataset. Groups follow teacher order, with the generic group last.
    """
    k = int(per_teacher_count)
    if k < 1:
        raise CompositionError("per-teacher count must be >= 1")
    samples: list[SampleMeta] = []
    for name, group in registry.sampling_groups():
        if not group:
            raise CompositionError(f"sampling group {name!r} is empty")
        for _ in range(k):
            ds = group[int(rng.integers(len(group)))]
            idx = int(rng.integers(registry.size(ds)))
            samples.append(registry.sample(ds, idx, name))
    images = np.stack([s.pixels for s in samples])
    return Batch(samples, images)
