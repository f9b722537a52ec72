"""Run configuration: a flat ``section.key = value`` text format.

Grammar (one assignment per line)::

    line     := blank | comment | key "=" value
    comment  := "#" ...
    key      := section "." field                  (run, batch, share, drop, optim, student)
              | ("teacher" | "dataset") "." id "." field
    value    := text up to end of line, surrounding whitespace stripped;
                booleans are true/false, lists are comma separated

Every field has a default (see the ``*_FIELDS`` tables). Unknown keys,
duplicate keys, bad types and out-of-range values are rejected with the
line number and key in the message.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import STYLES, DatasetManifest
from .errors import ConfigError, ContractError
from .losses import ShareStrategy
from .projectors import ProjectorKind
from .vit import ViTConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _str(text: str) -> str:
    if not text:
        raise ValueError("empty value")
    return text


_CONVERT = {int: int, float: float, bool: _bool, str: _str}


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 3e-4
    reference_batch: int = 256
    lr_min: float = 1e-6
    weight_decay: float = 3e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 0.0


@dataclass(frozen=True)
class TeacherDecl:
    id: str
    source: str = "synthetic"
    seed: int = 1
    width: int = 32
    depth: int = 2
    heads: int = 4
    patch_size: int = 7
    mlp_ratio: float = 4.0
    use_qkv_bias: bool = True
    use_layerscale: bool = True
    layerscale_init: float = 1e-5
    projector: str = "tp"
    generic: bool = False
    path: str = ""

    def vit_config(self, student: ViTConfig) -> ViTConfig:
        return ViTConfig(
            image_size=student.image_size,
            patch_size=self.patch_size,
            depth=self.depth,
            width=self.width,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            channels=student.channels,
            use_qkv_bias=self.use_qkv_bias,
            use_layerscale=self.use_layerscale,
            layerscale_init=self.layerscale_init,
        )


@dataclass(frozen=True)
class RunConfig:
    student: ViTConfig = field(default_factory=ViTConfig)
    teachers: tuple[TeacherDecl, ...] = ()
    datasets: tuple[DatasetManifest, ...] = ()
    share: ShareStrategy = ShareStrategy.FULL
    optim: OptimConfig = field(default_factory=OptimConfig)
    steps: int = 500
    per_teacher: int = 4
    keep_prob: float = 1.0
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 0

    @property
    def teacher_ids(self) -> list[str]:
        return [t.id for t in self.teachers]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


RUN_FIELDS = {
    "run.seed": ("seed", int),
    "run.steps": ("steps", int),
    "run.out_dir": ("out_dir", str),
    "run.checkpoint_every": ("checkpoint_every", int),
    "batch.per_teacher": ("per_teacher", int),
    "share.strategy": ("share", str),
    "drop.keep_prob": ("keep_prob", float),
}
OPTIM_FIELDS = {f.name: f.type for f in dataclasses.fields(OptimConfig)}
STUDENT_FIELDS = {f.name: f.type for f in dataclasses.fields(ViTConfig)}
TEACHER_FIELDS = {f.name: f.type for f in dataclasses.fields(TeacherDecl) if f.name != "id"}
DATASET_FIELDS = {
    f.name: f.type for f in dataclasses.fields(DatasetManifest)
    if f.name not in ("id", "image_size", "channels")
}

_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "str | None": str}
_KEY = re.compile(r"^[A-Za-z0-9_\-]+$")


def _typ(t) -> type:
    return _TYPES[t] if isinstance(t, str) else t


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate configuration text; see the module docstring for the grammar."""
    top: dict = {}
    optim: dict = {}
    student: dict = {}
    teachers: dict[str, dict] = {}
    datasets: dict[str, dict] = {}
    seen: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        parts = key.split(".")

        def convert(typ, name):
            try:
                return _CONVERT[_typ(typ)](value)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {name!r}: {exc}") from None

        if key in RUN_FIELDS:
            name, typ = RUN_FIELDS[key]
            top[name] = convert(typ, key)
        elif len(parts) == 2 and parts[0] == "optim" and parts[1] in OPTIM_FIELDS:
            optim[parts[1]] = convert(OPTIM_FIELDS[parts[1]], key)
        elif len(parts) == 2 and parts[0] == "student" and parts[1] in STUDENT_FIELDS:
            student[parts[1]] = convert(STUDENT_FIELDS[parts[1]], key)
        elif len(parts) == 3 and parts[0] == "teacher" and parts[2] in TEACHER_FIELDS:
            if not _KEY.match(parts[1]):
                raise ConfigError(f"{where}: invalid teacher id {parts[1]!r}")
            teachers.setdefault(parts[1], {})[parts[2]] = convert(TEACHER_FIELDS[parts[2]], key)
        elif len(parts) == 3 and parts[0] == "dataset" and parts[2] in DATASET_FIELDS:
            if not _KEY.match(parts[1]):
                raise ConfigError(f"{where}: invalid dataset id {parts[1]!r}")
            datasets.setdefault(parts[1], {})[parts[2]] = convert(DATASET_FIELDS[parts[2]], key)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")

    def line_of(prefix: str) -> str:
        lines = [n for k, n in seen.items() if k.startswith(prefix)]
        return f"{source}:{min(lines)}" if lines else source

    try:
        student_cfg = ViTConfig(**student)
    except ContractError as exc:
        raise ConfigError(f"{line_of('student.')}: student: {exc}") from None

    teacher_decls = []
    for tid, fields_ in teachers.items():
        decl = TeacherDecl(id=tid, **fields_)
        where = line_of(f"teacher.{tid}.")
        if decl.source not in ("synthetic", "feature_file"):
            raise ConfigError(f"{where}: teacher.{tid}.source must be synthetic or feature_file")
        if decl.source == "feature_file" and not decl.path:
            raise ConfigError(f"{where}: teacher.{tid}.path is required for feature_file")
        try:
            ProjectorKind.parse(decl.projector)
            if decl.source == "synthetic":
                decl.vit_config(student_cfg)
        except ContractError as exc:
            raise ConfigError(f"{where}: teacher.{tid}: {exc}") from None
        teacher_decls.append(decl)

    manifests = []
    for did, fields_ in datasets.items():
        where = line_of(f"dataset.{did}.")
        if "owner" not in fields_:
            raise ConfigError(f"{where}: dataset.{did}.owner is required")
        m = DatasetManifest(id=did, image_size=student_cfg.image_size,
                            channels=student_cfg.channels, **fields_)
        if m.source == "synthetic" and m.style not in STYLES:
            raise ConfigError(f"{where}: dataset.{did}.style must be one of {', '.join(STYLES)}")
        if m.owner != "generic" and m.owner not in teachers:
            raise ConfigError(f"{where}: dataset.{did}.owner {m.owner!r} is not a declared teacher")
        manifests.append(m)

    try:
        share = ShareStrategy.parse(top.pop("share", "full"))
    except ContractError as exc:
        raise ConfigError(f"{line_of('share.')}: {exc}") from None

    cfg = RunConfig(
        student=student_cfg,
        teachers=tuple(teacher_decls),
        datasets=tuple(manifests),
        share=share,
        optim=OptimConfig(**optim),
        **top,
    )
    _validate(cfg, line_of)
    return cfg


def _validate(cfg: RunConfig, line_of) -> None:
    if not cfg.teachers:
        raise ConfigError(f"{line_of('teacher.')}: at least one teacher is required")
    if not 0.0 < cfg.keep_prob <= 1.0:
        raise ConfigError(f"{line_of('drop.')}: drop.keep_prob must be in (0, 1], got {cfg.keep_prob}")
    if cfg.steps < 0:
        raise ConfigError(f"{line_of('run.steps')}: run.steps must be >= 0")
    if cfg.per_teacher < 1:
        raise ConfigError(f"{line_of('batch.')}: batch.per_teacher must be >= 1")
    if cfg.checkpoint_every < 0:
        raise ConfigError(f"{line_of('run.checkpoint_every')}: run.checkpoint_every must be >= 0")
    o = cfg.optim
    if o.base_lr <= 0 or o.lr_min < 0 or o.reference_batch <= 0:
        raise ConfigError(f"{line_of('optim.')}: learning rates must be positive")
    if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1) or o.eps <= 0 or o.weight_decay < 0:
        raise ConfigError(f"{line_of('optim.')}: invalid optimizer hyperparameters")
    if o.clip_norm < 0:
        raise ConfigError(f"{line_of('optim.clip_norm')}: optim.clip_norm must be >= 0")
    generic_ds = [m for m in cfg.datasets if m.owner == "generic"]
    if cfg.share is ShareStrategy.GENERIC and not generic_ds:
        raise ConfigError(f"{line_of('share.')}: generic sharing needs at least one generic dataset")
    for t in cfg.teachers:
        if not any(m.owner == t.id for m in cfg.datasets):
            raise ConfigError(f"{line_of('teacher.' + t.id + '.')}: teacher {t.id!r} owns no dataset")
        if t.projector == "identity" and t.source == "synthetic" and t.width != cfg.student.width:
            raise ConfigError(
                f"{line_of('teacher.' + t.id + '.')}: identity projector needs "
                f"teacher width == student width"
            )
    if generic_ds and not any(t.generic for t in cfg.teachers):
        raise ConfigError(f"{line_of('dataset.')}: generic datasets need a teacher with generic = true")


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    """Effective configuration (defaults filled) in the same grammar; parses back to ``cfg``."""
    lines = ["# effective configuration"]
    for key, (name, _) in RUN_FIELDS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg, name))}")
    for f in dataclasses.fields(OptimConfig):
        lines.append(f"optim.{f.name} = {_fmt(getattr(cfg.optim, f.name))}")
    for f in dataclasses.fields(ViTConfig):
        lines.append(f"student.{f.name} = {_fmt(getattr(cfg.student, f.name))}")
    for t in cfg.teachers:
        for name in TEACHER_FIELDS:
            v = getattr(t, name)
            if name == "path" and not v:
                continue
            lines.append(f"teacher.{t.id}.{name} = {_fmt(v)}")
    for m in cfg.datasets:
        for name in DATASET_FIELDS:
            v = getattr(m, name)
            if v is None:
                continue
            lines.append(f"dataset.{m.id}.{name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
