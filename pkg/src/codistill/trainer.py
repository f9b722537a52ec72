"""Co-distillation training loop, AdamW, cosine schedule, checkpoints and linear probing."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .config import RunConfig, format_config
from .data import Registry, compose_batch, load_registry
from .errors import CodistillError, ContractError, DimensionError, FormatError
from .losses import LossReport, build_share_mask, combine_terms, teacher_drop, teacher_terms
from .projectors import Projector, ProjectorKind
from .teachers import (
    TeacherSpec,
    align_token_grid,
    build_synthetic_teacher,
    load_feature_teacher,
    teacher_forward,
)
from .tensor import Tape, Tensor
from .vit import TokenSet, ViT, ViTConfig, params_checksum

CKPT_MAGIC = b"DUNECKPT"
CKPT_VERSION = 1


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream (init, batching, dropping, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# optimisation


def cosine_lr(
    step: int,
    total_steps: int,
    batch_size: int,
    base_lr: float = 3e-4,
    lr_min: float = 1e-6,
    reference_batch: int = 256,
) -> float:
    """Half-cosine from ``base_lr * batch_size / reference_batch`` at 0 to ``lr_min`` at the end."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    lr_max = base_lr * batch_size / reference_batch
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 3e-2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: set[str] = field(default_factory=set)


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamWState,
    lr: float,
) -> None:
    """Bias-corrected Adam update with decoupled weight decay, applied in place.

    Parameters whose gradient is ``None`` are left untouched (their moments too).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        wd = 0.0 if name in state.no_decay else state.weight_decay
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data * (1.0 - lr * wd) - lr * update


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay only on projection matrices (not biases, norms, gains, tokens, positions)."""
    return value.ndim == 2 and not name.endswith("pos_embed")


# checkpoints


@dataclass
class Checkpoint:
    step: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    out.write(struct.pack("<8sIQI", CKPT_MAGIC, CKPT_VERSION, ckpt.step, len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        out.write(struct.pack("<I", len(key)) + key)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    head = struct.Struct("<8sIQI")
    try:
        magic, version, step, meta_len = head.unpack_from(raw, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{source}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        off = head.size
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{source}: {len(raw) - off} trailing bytes")
    return Checkpoint(step, arrays, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return checkpoint_from_bytes(raw, str(path))


# training


def materialize_teachers(cfg: RunConfig, registry: Registry) -> list[TeacherSpec]:
    teachers = []
    for decl in cfg.teachers:
        group = registry.teacher_group(decl.id)
        if decl.source == "feature_file":
            spec = load_feature_teacher(decl.path, decl.id, group, decl.projector, decl.generic)
        else:
            spec = build_synthetic_teacher(
                decl.seed, decl.vit_config(cfg.student), decl.id, group, decl.projector, decl.generic
            )
        teachers.append(spec)
    return teachers


LOG_FIELDS = ("cos", "sl1", "active")


def log_header(teacher_ids: Sequence[str]) -> list[str]:
    return ["step", "lr", "total"] + [f"{t}_{f}" for t in teacher_ids for f in LOG_FIELDS]


@dataclass
class StepRecord:
    step: int
    lr: float
    report: LossReport

    def row(self) -> list:
        r = self.report
        out = [self.step, repr(self.lr), repr(r.total)]
        for i in range(len(r.teacher_ids)):
            out += [repr(r.cos[i]), repr(r.sl1[i]), r.active[i]]
        return out


class Trainer:
    """Owns the student, projectors, frozen teachers, optimizer and RNG streams of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.registry = load_registry(
            cfg.datasets, cfg.teacher_ids, [t.id for t in cfg.teachers if t.generic]
        )
        self.teachers = materialize_teachers(cfg, self.registry)
        init = rng_stream(cfg.seed, "init")
        self.student = ViT(cfg.student, init)
        self.projectors = {
            t.id: Projector(t.projector_kind, cfg.student, t.width, init) for t in self.teachers
        }
        self.rng_batch = rng_stream(cfg.seed, "batching")
        self.rng_drop = rng_stream(cfg.seed, "dropping")
        o = cfg.optim
        self.params: dict[str, Tensor] = {f"student/{k}": v for k, v in self.student.params.items()}
        for tid, proj in self.projectors.items():
            self.params.update({f"proj/{tid}/{k}": v for k, v in proj.params.items()})
        self.opt = AdamWState(
            beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay,
            no_decay={k for k, v in self.params.items() if not decays(k, v.data)},
        )
        self.step_count = 0
        self.history: list[StepRecord] = []
        self._needs_inter = any(p.needs_intermediates for p in self.projectors.values())
        self._teacher_cache: dict[tuple[str, str], np.ndarray] = {}
        self._groups = [self.registry.teacher_group(t.id) for t in self.teachers]

    @property
    def teacher_ids(self) -> list[str]:
        return [t.id for t in self.teachers]

    @property
    def batch_size(self) -> int:
        return self.cfg.per_teacher * len(self.registry.sampling_groups())

    def teacher_checksums(self) -> dict[str, str]:
        return {t.id: t.checksum() for t in self.teachers}

    def teacher_targets(self, spec: TeacherSpec, images: np.ndarray, image_ids, grid) -> TokenSet:
        """Aligned teacher tokens for a batch, memoised per image (teachers are frozen)."""
        missing = [i for i, iid in enumerate(image_ids) if (spec.id, iid) not in self._teacher_cache]
        if missing:
            out = teacher_forward(spec, images[missing], [image_ids[i] for i in missing])
            out = align_token_grid(out, grid)
            for j, i in enumerate(missing):
                self._teacher_cache[(spec.id, image_ids[i])] = out.tokens.data[j]
        data = np.stack([self._teacher_cache[(spec.id, iid)] for iid in image_ids])
        return TokenSet(Tensor(data), grid)

    def forward_loss(self, images: np.ndarray, image_ids, dataset_ids, keep=None):
        final, inter = self.student.forward(images, collect_intermediates=self._needs_inter)
        s_outs = [self.projectors[t.id](final, inter) for t in self.teachers]
        t_outs = [self.teacher_targets(t, images, image_ids, final.grid) for t in self.teachers]
        mask = build_share_mask(dataset_ids, self._groups, self.cfg.share,
                                self.registry.generic_group)
        terms = teacher_terms(s_outs, t_outs, mask, self.teacher_ids)
        if keep is None:
            keep = teacher_drop([t.value for t in terms], self.cfg.keep_prob, self.rng_drop)
        return combine_terms(terms, keep)

    def step(self) -> StepRecord:
        cfg = self.cfg
        total = max(cfg.steps, 1)
        o = cfg.optim
        lr = cosine_lr(min(self.step_count, total), total, self.batch_size,
                       o.base_lr, o.lr_min, o.reference_batch)
        batch = compose_batch(self.registry, cfg.per_teacher, self.rng_batch)
        for p in self.params.values():
            p.grad = None
        with Tape() as tape:
            report = self.forward_loss(batch.images, batch.image_ids, batch.dataset_ids)
            if report.loss.requires_grad:
                tape.backward(report.loss)
        grads = {k: v.grad for k, v in self.params.items()}
        if o.clip_norm > 0:
            clip_grad_norm(grads, o.clip_norm)
        adamw_step(self.params, grads, self.opt, lr)
        self.step_count += 1
        rec = StepRecord(self.step_count, lr, report)
        self.history.append(rec)
        return rec

    # persistence

    def checkpoint(self) -> Checkpoint:
        arrays = {k: v.data for k, v in self.params.items()}
        for k in self.params:
            if k in self.opt.m:
                arrays[f"adam_m/{k}"] = self.opt.m[k]
                arrays[f"adam_v/{k}"] = self.opt.v[k]
        meta = {
            "optimizer_step": self.opt.step,
            "rng": {
                "batching": self.rng_batch.bit_generator.state,
                "dropping": self.rng_drop.bit_generator.state,
            },
            "seed": self.cfg.seed,
            "teachers": self.teacher_ids,
        }
        return Checkpoint(self.step_count, arrays, meta)

    def load_state(self, ckpt: Checkpoint) -> None:
        for k, p in self.params.items():
            if k not in ckpt.arrays:
                raise ContractError(f"checkpoint is missing parameter {k!r}")
            a = ckpt.arrays[k]
            if a.shape != p.shape:
                raise DimensionError(f"checkpoint parameter {k!r} has shape {a.shape}")
            p.data = a.copy()
        self.opt.m = {k[7:]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam_m/")}
        self.opt.v = {k[7:]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam_v/")}
        self.opt.step = int(ckpt.meta.get("optimizer_step", ckpt.step))
        rng = ckpt.meta.get("rng", {})
        if "batching" in rng:
            self.rng_batch.bit_generator.state = rng["batching"]
        if "dropping" in rng:
            self.rng_drop.bit_generator.state = rng["dropping"]
        self.step_count = ckpt.step


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoint: Checkpoint
    records: list[StepRecord]
    out_dir: Path | None = None

    @property
    def totals(self) -> list[float]:
        return [r.report.total for r in self.records]


def write_log(path, teacher_ids: Sequence[str], records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(log_header(teacher_ids))
        for r in records:
            w.writerow(r.row())


def train(cfg: RunConfig, out_dir=None, steps: int | None = None, progress=None) -> TrainResult:
    """Run ``cfg.steps`` distillation steps; optionally write config echo, log and checkpoints."""
    trainer = Trainer(cfg)
    n = cfg.steps if steps is None else steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(format_config(cfg))
    for _ in range(n):
        try:
            rec = trainer.step()
        except CodistillError as exc:
            raise type(exc)(f"step {trainer.step_count + 1}: {exc}") from exc
        if progress is not None:
            progress(rec)
        every = cfg.checkpoint_every
        if out is not None and every and rec.step % every == 0 and rec.step != n:
            save_checkpoint(trainer.checkpoint(), out / f"ckpt-{rec.step:06d}.bin")
    ckpt = trainer.checkpoint()
    if out is not None:
        write_log(out / "log.csv", trainer.teacher_ids, trainer.history)
        save_checkpoint(ckpt, out / f"ckpt-{ckpt.step:06d}.bin")
    return TrainResult(trainer, ckpt, list(trainer.history), out)


def load_student(cfg: RunConfig, ckpt: Checkpoint) -> tuple[ViT, dict[str, Projector]]:
    """Rebuild the student and its projectors from a checkpoint."""
    trainer = Trainer(cfg)
    trainer.load_state(ckpt)
    return trainer.student, trainer.projectors


# linear probing


@dataclass
class ProbeTask:
    images: np.ndarray
    labels: np.ndarray  # (n_images, H*W) integer patch labels
    num_classes: int


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    accuracy: float
    baseline_accuracy: float
    train_accuracy: float
    losses: list[float]


def make_patch_task(
    n_images: int, config: ViTConfig, rng: np.random.Generator, noise: float = 0.05
) -> ProbeTask:
    """Binary patch labelling: each patch is a dark or bright tile (label 1 = bright)."""
    g = config.grid[0]
    p = config.patch_size
    labels = rng.integers(0, 2, (n_images, g, g))
    level = np.where(labels == 1, 0.75, 0.25)
    tint = rng.uniform(-0.05, 0.05, (n_images, config.channels, 1, 1))
    base = np.repeat(np.repeat(level, p, axis=1), p, axis=2)[:, None]
    images = base + tint + noise * rng.standard_normal(
        (n_images, config.channels, config.image_size, config.image_size))
    return ProbeTask(np.clip(images, 0.0, 1.0), labels.reshape(n_images, -1), 2)


def _accuracy(feats: np.ndarray, labels: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.argmax(feats @ w + b, axis=1) == labels))


def linear_probe(
    student: ViT,
    task: ProbeTask,
    epochs: int,
    projector: Projector | None = None,
    lr: float = 0.05,
    seed: int = 0,
    train_fraction: float = 0.5,
) -> ProbeResult:
    """Train a linear patch classifier on frozen features; the encoder is never updated."""
    with T.no_grad():
        final, inter = student.forward(
            task.images, collect_intermediates=projector is not None and projector.needs_intermediates
        )
        if projector is not None:
            final = projector(final, inter)
    feats = final.tokens.data[:, 1:].reshape(-1, final.width)
    labels = task.labels.reshape(-1)
    n_img = task.images.shape[0]
    n_train = max(1, int(round(train_fraction * n_img)))
    hw = final.count - 1
    tr, te = slice(0, n_train * hw), slice(n_train * hw, None)
    if feats[te].shape[0] == 0:
        te = tr

    rng = np.random.default_rng(seed)
    w = Tensor(L.trunc_normal(rng, (final.width, task.num_classes)), requires_grad=True)
    b = Tensor(np.zeros(task.num_classes), requires_grad=True)
    baseline = _accuracy(feats[te], labels[te], w.data, b.data)
    state = AdamWState(weight_decay=0.0)
    x, y = Tensor(feats[tr]), labels[tr]
    rows = np.arange(y.size)
    losses = []
    for _ in range(int(epochs)):
        w.grad = b.grad = None
        with Tape() as tape:
            logp = T.log_softmax(T.linear(x, w, b), axis=-1)
            loss = -T.mean(logp[rows, y])
            tape.backward(loss)
        losses.append(loss.item())
        adamw_step({"w": w, "b": b}, {"w": w.grad, "b": b.grad}, state, lr)
    return ProbeResult(
        weight=w.data.copy(),
        bias=b.data.copy(),
        accuracy=_accuracy(feats[te], labels[te], w.data, b.data),
        baseline_accuracy=baseline,
        train_accuracy=_accuracy(feats[tr], labels[tr], w.data, b.data),
        losses=losses,
    )


def model_checksum(model) -> str:
    return params_checksum(model.params)
