"""Distillation objective: cosine + smooth-l1 per token, share masks and teacher dropping."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, RegistryError
from .tensor import Tensor
from .vit import TokenSet

NORM_GUARD = 1e-12


def cosine_loss(s, t) -> Tensor:
    """1 - s.t / ((|s| + 1e-12)(|t| + 1e-12)) along the last axis."""
    s, t = T.as_tensor(s), T.as_tensor(t)
    if s.shape != t.shape:
        raise DimensionError(f"cosine_loss: shapes {s.shape} and {t.shape} differ")
    dot = T.tsum(s * t, axis=-1)
    denom = (T.l2norm(s, -1) + NORM_GUARD) * (T.l2norm(t, -1) + NORM_GUARD)
    return 1.0 - dot / denom


def smooth_l1_loss(s, t) -> Tensor:
    """Elementwise Huber(s - t) averaged over the last axis."""
    s, t = T.as_tensor(s), T.as_tensor(t)
    if s.shape != t.shape:
        raise DimensionError(f"smooth_l1_loss: shapes {s.shape} and {t.shape} differ")
    return T.mean(T.huber(s - t), axis=-1)


def token_terms(s: TokenSet, t: TokenSet) -> tuple[Tensor, Tensor]:
    """Per-sample (B,) cosine and smooth-l1 terms, each averaged over all HW+1 tokens."""
    if tuple(s.grid) != tuple(t.grid) or s.count != t.count:
        raise ContractError(
            f"token grids differ ({s.grid} vs {t.grid}); call align_token_grid first"
        )
    if s.width != t.width or s.batch != t.batch:
        raise DimensionError(
            f"student output {s.tokens.shape} does not match teacher output {t.tokens.shape}"
        )
    cos = T.mean(cosine_loss(s.tokens, t.tokens), axis=-1)
    sl1 = T.mean(smooth_l1_loss(s.tokens, t.tokens), axis=-1)
    return cos, sl1


def token_loss(s: TokenSet, t: TokenSet) -> Tensor:
    """Per-sample mean over tokens of cosine + smooth-l1, shape (B,)."""
    cos, sl1 = token_terms(s, t)
    return cos + sl1


class ShareStrategy(str, Enum):
    NONE = "none"
    GENERIC = "generic"
    FULL = "full"

    @classmethod
    def parse(cls, value) -> "ShareStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"nosharing": "none", "no": "none", "genericsharing": "generic",
                   "fullsharing": "full", "all": "full"}
        key = str(value).lower().replace("_", "").replace("-", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ContractError(
                f"unknown share strategy {value!r}; expected none, generic or full"
            ) from None


def build_share_mask(
    dataset_ids: Sequence[str],
    teacher_groups: Sequence[Sequence[str]],
    strategy: ShareStrategy | str,
    generic_group: Sequence[str] = (),
) -> np.ndarray:
    """(B, N) boolean mask of which samples feed which teacher's loss.

    ``teacher_groups[i]`` is D_i (for task-agnostic teachers it already
    contains the generic datasets). ``generic_group`` is D_g.
    """
    strategy = ShareStrategy.parse(strategy)
    generic = set(generic_group)
    if strategy is ShareStrategy.GENERIC and not generic:
        raise ContractError("generic sharing needs a non-empty generic group")
    groups = [set(g) for g in teacher_groups]
    known = generic.union(*groups) if groups else generic
    mask = np.zeros((len(dataset_ids), len(groups)), dtype=bool)
    for b, ds in enumerate(dataset_ids):
        if ds not in known:
            raise RegistryError(f"unknown dataset id {ds!r}")
        for i, g in enumerate(groups):
            if strategy is ShareStrategy.FULL:
                mask[b, i] = True
            elif strategy is ShareStrategy.GENERIC:
                mask[b, i] = ds in g or ds in generic
            else:
                mask[b, i] = ds in g
    return mask


def teacher_drop(per_teacher_losses: Sequence[float], keep_prob: float, rng) -> list[bool]:
    """Keep the current max-loss teacher; keep each other teacher with probability ``keep_prob``.

    Always consumes exactly N uniforms from ``rng`` so streams stay aligned.
    """
    losses = np.asarray(per_teacher_losses, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("teacher_drop needs at least one teacher")
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep_prob must be in (0, 1], got {keep_prob}")
    u = rng.random(losses.size)
    keep = u < keep_prob
    keep[int(np.argmax(losses))] = True
    return [bool(k) for k in keep]


@dataclass
class TeacherTerm:
    teacher_id: str
    cos: Tensor
    sl1: Tensor
    active: int

    @property
    def total(self) -> Tensor:
        return self.cos + self.sl1

    @property
    def value(self) -> float:
        return self.cos.item() + self.sl1.item()


@dataclass
class LossReport:
    teacher_ids: list[str]
    cos: list[float]
    sl1: list[float]
    per_teacher: list[float]
    active: list[int]
    kept: list[bool]
    total: float
    loss: Tensor = field(repr=False)

    def as_row(self) -> dict[str, float]:
        row = {"total": self.total}
        for i, tid in enumerate(self.teacher_ids):
            row[f"{tid}_cos"] = self.cos[i]
            row[f"{tid}_sl1"] = self.sl1[i]
            row[f"{tid}_active"] = self.active[i]
        return row


def teacher_terms(
    student_outputs: Sequence[TokenSet],
    teacher_outputs: Sequence[TokenSet],
    mask: np.ndarray,
    teacher_ids: Sequence[str] | None = None,
) -> list[TeacherTerm]:
    """Masked mean over active samples of each teacher's token terms."""
    n = len(teacher_outputs)
    if len(student_outputs) != n:
        raise ContractError(f"{len(student_outputs)} student outputs for {n} teachers")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[1] != n:
        raise ContractError(f"share mask shape {mask.shape} does not match {n} teachers")
    ids = list(teacher_ids) if teacher_ids is not None else [f"t{i}" for i in range(n)]
    terms = []
    for i in range(n):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            zero = Tensor(0.0)
            terms.append(TeacherTerm(ids[i], zero, zero, 0))
            continue
        cos, sl1 = token_terms(student_outputs[i].select(rows), teacher_outputs[i].select(rows))
        terms.append(TeacherTerm(ids[i], T.mean(cos), T.mean(sl1), int(rows.size)))
    return terms


def combine_terms(terms: Sequence[TeacherTerm], kept: Sequence[bool] | None = None) -> LossReport:
    """Sum the kept teachers' totals in fixed teacher order."""
    kept = [True] * len(terms) if kept is None else [bool(k) for k in kept]
    if len(kept) != len(terms):
        raise ContractError(f"{len(kept)} drop flags for {len(terms)} teachers")
    total = None
    for term, k in zip(terms, kept):
        if k and term.active:
            total = term.total if total is None else total + term.total
    if total is None:
        total = Tensor(0.0)
    return LossReport(
        teacher_ids=[t.teacher_id for t in terms],
        cos=[t.cos.item() for t in terms],
        sl1=[t.sl1.item() for t in terms],
        per_teacher=[t.value for t in terms],
        active=[t.active for t in terms],
        kept=kept,
        total=total.item(),
        loss=total,
    )


def distillation_loss(
    student_outputs: Sequence[TokenSet],
    teacher_outputs: Sequence[TokenSet],
    mask: np.ndarray,
    drop: Sequence[bool] | None = None,
    teacher_ids: Sequence[str] | None = None,
) -> LossReport:
    """Sum over kept teachers of masked-mean (cosine + smooth-l1) token losses.

    ``drop`` holds per-teacher *keep* flags as returned by :func:`teacher_drop`.
    """
    return combine_terms(teacher_terms(student_outputs, teacher_outputs, mask, teacher_ids), drop)
