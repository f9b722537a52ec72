"""Vision-transformer encoder used for the student and for synthetic teachers."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 28
    patch_size: int = 7
    depth: int = 4
    width: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3
    use_qkv_bias: bool = True
    use_layerscale: bool = True
    layerscale_init: float = 1e-5
    num_registers: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ContractError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.width <= 0 or self.heads <= 0 or self.width % self.heads:
            raise ContractError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.depth < 0 or self.channels <= 0 or self.mlp_ratio <= 0:
            raise ContractError("depth must be >= 0; channels and mlp_ratio positive")
        if self.num_registers != 0:
            raise ContractError("register tokens are not supported (num_registers must be 0)")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w + 1

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSet:
    """A batch of token sets: ``tokens`` is (B, 1 + H*W, d) with the CLS token first.

    Patch tokens are stored row-major over the (H, W) grid.
    """

    tokens: Tensor
    grid: tuple[int, int] = field(default=(1, 1))

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim != 3 or self.tokens.shape[1] != h * w + 1:
            raise DimensionError(
                f"token tensor {self.tokens.shape} does not hold CLS + {h}x{w} patches"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    @property
    def cls(self) -> np.ndarray:
        return self.tokens.data[:, 0]

    @property
    def patches(self) -> np.ndarray:
        h, w = self.grid
        return self.tokens.data[:, 1:].reshape(self.batch, h, w, self.width)

    def select(self, rows) -> "TokenSet":
        return TokenSet(self.tokens[rows], self.grid)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, S, S) -> (B, H*W, C*patch*patch), each patch flattened in (C, py, px) order."""
    b, c, s, _ = images.shape
    g = s // patch
    x = images.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch * patch)


class ViT:
    """Pre-LN ViT: patch stem, CLS token, learned positions, ``depth`` blocks, final LN."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        p: dict[str, Tensor] = {}
        L.init_linear(p, "patch_embed", c.channels * c.patch_size**2, c.width, rng)
        p["cls_token"] = L.param(L.trunc_normal(rng, (c.width,)), "cls_token")
        p["pos_embed"] = L.param(np.zeros((c.num_tokens, c.width)), "pos_embed")
        for i in range(c.depth):
            L.init_block(
                p, f"blocks.{i}", c.width, c.mlp_hidden, rng,
                qkv_bias=c.use_qkv_bias,
                layerscale=c.use_layerscale,
                layerscale_init=c.layerscale_init,
            )
        L.init_layernorm(p, "norm", c.width)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def freeze(self) -> "ViT":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def checksum(self) -> str:
        return params_checksum(self.params)

    def patch_embed(self, images) -> TokenSet:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected images (B, {c.channels}, {c.image_size}, {c.image_size}), "
                f"got {images.shape}"
            )
        b = images.shape[0]
        x = L.dense(Tensor(patchify(images, c.patch_size)), self.params, "patch_embed")
        cls = T.reshape(self.params["cls_token"], (1, 1, c.width)) * np.ones((b, 1, 1))
        x = T.concat([cls, x], axis=1) + self.params["pos_embed"]
        return TokenSet(x, c.grid)

    def encoder_forward(
        self, tokens: TokenSet, collect_intermediates: bool = False
    ) -> tuple[TokenSet, list[TokenSet] | None]:
        """Run the blocks and the final LN; optionally return every post-block token set."""
        c = self.config
        if tokens.width != c.width:
            raise DimensionError(f"token width {tokens.width} != encoder width {c.width}")
        x = tokens.tokens
        inter = [] if collect_intermediates else None
        for i in range(c.depth):
            x = L.block(x, self.params, f"blocks.{i}", c.heads)
            if inter is not None:
                inter.append(TokenSet(x, tokens.grid))
        out = TokenSet(L.layer_norm(x, self.params, "norm"), tokens.grid)
        return out, inter

    def forward(self, images, collect_intermediates: bool = False):
        return self.encoder_forward(self.patch_embed(images), collect_intermediates)

    __call__ = forward

    def attention_probabilities(self, images, layer_index: int) -> np.ndarray:
        """Post-softmax attention of block ``layer_index``: (B, heads, HW+1, HW+1)."""
        c = self.config
        if not 0 <= layer_index < c.depth:
            raise IndexError(f"layer {layer_index} out of range for depth {c.depth}")
        store: list = []
        with T.no_grad():
            x = self.patch_embed(images).tokens
            for i in range(layer_index + 1):
                x = L.block(x, self.params, f"blocks.{i}", c.heads,
                            store if i == layer_index else None)
        return store[0]

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name!r}")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.shape:
                raise DimensionError(f"parameter {name!r}: shape {a.shape} != {t.shape}")
            t.data = a.copy()


def vit_param_count(c: ViTConfig) -> int:
    n = c.channels * c.patch_size**2 * c.width + c.width  # stem
    n += c.width  # cls
    n += c.num_tokens * c.width  # positions
    n += c.depth * L.block_param_count(c.width, c.mlp_hidden, c.use_qkv_bias, c.use_layerscale)
    n += 2 * c.width  # final norm
    return n


def params_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred bilinear weights with edge clamping; rows sum to 1."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_grid(values: np.ndarray, out_grid: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize the two grid axes of (..., H, W, C) to ``out_grid``."""
    h, w = values.shape[-3], values.shape[-2]
    if (h, w) == tuple(out_grid):
        return values.copy()
    ry = bilinear_matrix(h, out_grid[0])
    rx = bilinear_matrix(w, out_grid[1])
    return np.einsum("ih,...hwc,jw->...ijc", ry, values, rx)


def resize_pos_embed(pos: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]):
    """Resize a (1 + H*W, d) positional table to a new grid; the CLS row is kept."""
    d = pos.shape[1]
    grid = pos[1:].reshape(old_grid[0], old_grid[1], d)
    new = resize_grid(grid, new_grid).reshape(-1, d)
    return np.concatenate([pos[:1], new], axis=0)
