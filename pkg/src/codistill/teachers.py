"""Frozen teacher encoders, token-grid alignment and the DUNEFEAT feature container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, MissingFeatureError
from .projectors import ProjectorKind
from .tensor import Tensor
from .vit import TokenSet, ViT, ViTConfig, resize_grid

FEAT_MAGIC = b"DUNEFEAT"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<8sIIIIQ")


@dataclass
class FeatureFile:
    width: int
    grid: tuple[int, int]
    records: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self, image_id: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.records[image_id]
        except KeyError:
            raise MissingFeatureError(f"no feature record for image {image_id!r}") from None


def write_features(
    path,
    width: int,
    grid: tuple[int, int],
    records: Iterable[tuple[str, np.ndarray, np.ndarray]],
) -> int:
    """Write (image_id, cls[d], patches[H*W, d]) records; values stored as little-endian f32."""
    records = list(records)
    h, w = grid
    body = bytearray()
    for image_id, cls, patches in records:
        cls = np.asarray(cls, dtype="<f4").reshape(-1)
        patches = np.asarray(patches, dtype="<f4").reshape(-1)
        if cls.size != width or patches.size != h * w * width:
            raise ContractError(f"record {image_id!r} does not match width {width} / grid {grid}")
        name = image_id.encode("utf-8")
        body += struct.pack("<I", len(name)) + name + cls.tobytes() + patches.tobytes()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, width, h, w, len(records)))
            fh.write(body)
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc.strerror}") from exc
    return len(records)


def read_features(path) -> FeatureFile:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read feature file {path}: {exc.strerror}") from exc
    if len(raw) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, h, w, count = _FEAT_HEADER.unpack_from(raw, 0)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _FEAT_HEADER.size
    out = FeatureFile(width, (h, w))
    n_patch = h * w * width
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            image_id = raw[off:off + n].decode("utf-8")
            off += n
            cls = np.frombuffer(raw, dtype="<f4", count=width, offset=off).copy()
            off += 4 * width
            patches = np.frombuffer(raw, dtype="<f4", count=n_patch, offset=off).copy()
            off += 4 * n_patch
            out.records[image_id] = (cls, patches.reshape(h * w, width))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated record ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


@dataclass
class TeacherSpec:
    """A frozen teacher: either a seeded synthetic ViT or a feature file."""

    id: str
    source: str = "synthetic"
    config: ViTConfig | None = None
    seed: int = 0
    feature_path: str | None = None
    dataset_group: tuple[str, ...] = ()
    projector_kind: ProjectorKind = ProjectorKind.TP
    generic: bool = False
    model: ViT | None = field(default=None, repr=False)
    features: FeatureFile | None = field(default=None, repr=False)

    @property
    def width(self) -> int:
        if self.model is not None:
            return self.model.config.width
        if self.features is not None:
            return self.features.width
        raise ContractError(f"teacher {self.id!r} is not materialised")

    @property
    def grid(self) -> tuple[int, int]:
        if self.model is not None:
            return self.model.config.grid
        return self.features.grid

    @property
    def patch_size(self) -> int | None:
        return self.config.patch_size if self.config is not None else None

    def checksum(self) -> str:
        return self.model.checksum() if self.model is not None else ""


def build_synthetic_teacher(
    seed: int,
    config: ViTConfig,
    teacher_id: str = "teacher",
    dataset_group: Sequence[str] = ("default",),
    projector_kind: ProjectorKind | str = ProjectorKind.TP,
    generic: bool = False,
) -> TeacherSpec:
    """Randomly initialised, frozen ViT; bit-reproducible from (seed, config)."""
    model = ViT(config, np.random.default_rng(seed)).freeze()
    return TeacherSpec(
        id=teacher_id,
        source="synthetic",
        config=config,
        seed=seed,
        dataset_group=tuple(dataset_group),
        projector_kind=ProjectorKind.parse(projector_kind),
        generic=generic,
        model=model,
    )


def load_feature_teacher(
    path,
    teacher_id: str,
    dataset_group: Sequence[str] = ("default",),
    projector_kind: ProjectorKind | str = ProjectorKind.TP,
    generic: bool = False,
) -> TeacherSpec:
    return TeacherSpec(
        id=teacher_id,
        source="feature_file",
        feature_path=str(path),
        dataset_group=tuple(dataset_group),
        projector_kind=ProjectorKind.parse(projector_kind),
        generic=generic,
        features=read_features(path),
    )


def teacher_forward(spec: TeacherSpec, images, image_ids: Sequence[str] | None = None) -> TokenSet:
    """Frozen teacher output for a batch; never recorded on the tape."""
    if spec.model is not None:
        with T.no_grad():
            out, _ = spec.model.forward(images)
        return TokenSet(Tensor(out.tokens.data), out.grid)
    if spec.features is None:
        raise ContractError(f"teacher {spec.id!r} has neither a model nor a feature file")
    if image_ids is None:
        raise ContractError("feature-file teachers need image ids")
    rows = []
    for image_id in image_ids:
        cls, patches = spec.features.lookup(image_id)
        rows.append(np.concatenate([cls[None], patches], axis=0))
    data = np.stack(rows).astype(np.float64)
    return TokenSet(Tensor(data), spec.features.grid)


def align_token_grid(t: TokenSet, target_grid: tuple[int, int]) -> TokenSet:
    """Bilinearly resample the patch grid to ``target_grid``; CLS is passed through."""
    if min(target_grid) <= 0 or min(t.grid) <= 0:
        raise ContractError("grids must be positive")
    if tuple(t.grid) == tuple(target_grid):
        return TokenSet(Tensor(t.tokens.data.copy()), t.grid)
    patches = resize_grid(t.patches, target_grid).reshape(t.batch, -1, t.width)
    data = np.concatenate([t.cls[:, None], patches], axis=1)
    return TokenSet(Tensor(data), tuple(target_grid))
