"""Teacher-specific projector heads mapping student tokens to a teacher's feature space.

Three designs are provided:

* ``sp`` -- per-token two-layer MLP on the final encoder output.
* ``lp`` -- ladder: one MLP per tap point (after every third block and after
  the last block), outputs summed token-wise.
* ``tp`` -- one pre-LN transformer block at student width followed by a
  linear map to the teacher width. Attention lets the head mix patches.

``identity`` passes the final tokens through unchanged; it only exists for
self-distillation checks where the teacher width equals the student width.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import layers as L
from .errors import ContractError, DimensionError
from .tensor import Tensor
from .vit import TokenSet, ViTConfig


class ProjectorKind(str, Enum):
    SP = "sp"
    LP = "lp"
    TP = "tp"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value) -> "ProjectorKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(
                f"unknown projector kind {value!r}; expected one of sp, lp, tp, identity"
            ) from None


def ladder_taps(depth: int) -> list[int]:
    """1-based block indices tapped by the ladder: 3, 6, ... and always the last block."""
    if depth <= 0:
        return []
    taps = list(range(3, depth + 1, 3))
    if not taps or taps[-1] != depth:
        taps.append(depth)
    return taps


def _check_width(z: TokenSet, width: int) -> None:
    if z.width != width:
        raise DimensionError(f"projector expects width {width}, got {z.width}")


def sp_forward(z: TokenSet, params: dict, prefix: str = "sp") -> TokenSet:
    """Per-token MLP; identical weights for CLS and patches, no token mixing."""
    _check_width(z, params[f"{prefix}.fc1.weight"].shape[0])
    return TokenSet(L.mlp(z.tokens, params, prefix), z.grid)


def lp_forward(intermediates: list[TokenSet], params: dict, prefix: str = "lp") -> TokenSet:
    """Sum over taps of LN -> MLP applied to each tapped token set."""
    if not intermediates:
        raise ContractError("ladder projector needs at least one intermediate token set")
    out = None
    for j, z in enumerate(intermediates):
        _check_width(z, params[f"{prefix}.{j}.fc1.weight"].shape[0])
        y = L.mlp(L.layer_norm(z.tokens, params, f"{prefix}.{j}.norm"), params, f"{prefix}.{j}")
        out = y if out is None else out + y
    return TokenSet(out, intermediates[0].grid)


def tp_forward(z: TokenSet, params: dict, heads: int, prefix: str = "tp") -> TokenSet:
    """a = z + SA(LN(z)); m = a + MLP(LN(a)); h = Linear(m)."""
    _check_width(z, params[f"{prefix}.block.norm1.weight"].shape[0])
    m = L.block(z.tokens, params, f"{prefix}.block", heads)
    return TokenSet(L.dense(m, params, f"{prefix}.head"), z.grid)


class Projector:
    """One teacher head; ``params`` holds every trainable tensor, names prefixed by kind."""

    def __init__(
        self,
        kind: ProjectorKind | str,
        student: ViTConfig,
        out_width: int,
        rng: np.random.Generator,
    ):
        self.kind = ProjectorKind.parse(kind)
        self.student = student
        self.out_width = int(out_width)
        if self.out_width <= 0:
            raise ContractError("projector output width must be positive")
        d, hidden = student.width, student.mlp_hidden
        p: dict[str, Tensor] = {}
        if self.kind is ProjectorKind.SP:
            L.init_linear(p, "sp.fc1", d, hidden, rng)
            L.init_linear(p, "sp.fc2", hidden, self.out_width, rng)
        elif self.kind is ProjectorKind.LP:
            self.taps = ladder_taps(student.depth)
            if not self.taps:
                raise ContractError("ladder projector needs an encoder with depth >= 1")
            for j in range(len(self.taps)):
                L.init_layernorm(p, f"lp.{j}.norm", d)
                L.init_linear(p, f"lp.{j}.fc1", d, hidden, rng)
                L.init_linear(p, f"lp.{j}.fc2", hidden, self.out_width, rng)
        elif self.kind is ProjectorKind.TP:
            L.init_block(
                p, "tp.block", d, hidden, rng,
                qkv_bias=student.use_qkv_bias,
                layerscale=student.use_layerscale,
                layerscale_init=student.layerscale_init,
            )
            L.init_linear(p, "tp.head", d, self.out_width, rng)
        elif self.out_width != d:
            raise ContractError(
                f"identity projector needs teacher width == student width ({self.out_width} != {d})"
            )
        self.params = p

    @property
    def needs_intermediates(self) -> bool:
        return self.kind is ProjectorKind.LP

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def __call__(self, final: TokenSet, intermediates: list[TokenSet] | None = None) -> TokenSet:
        if self.kind is ProjectorKind.SP:
            return sp_forward(final, self.params)
        if self.kind is ProjectorKind.TP:
            return tp_forward(final, self.params, self.student.heads)
        if self.kind is ProjectorKind.LP:
            if intermediates is None:
                raise ContractError("ladder projector needs the encoder intermediates")
            taps = [intermediates[t - 1] for t in self.taps[:-1]] + [final]
            return lp_forward(taps, self.params)
        _check_width(final, self.out_width)
        return final

    def attention_probabilities(self, final: TokenSet) -> np.ndarray:
        """Post-softmax attention of the TP block, (B, heads, N, N)."""
        if self.kind is not ProjectorKind.TP:
            raise ContractError("only transformer projectors have attention maps")
        store: list = []
        L.attention(
            L.layer_norm(final.tokens, self.params, "tp.block.norm1"),
            self.params, "tp.block.attn", self.student.heads, store,
        )
        return store[0]
