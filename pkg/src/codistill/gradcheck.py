"""Finite-difference verification of every differentiable primitive and composite path."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import tensor as T
from .losses import cosine_loss, smooth_l1_loss
from .projectors import Projector, tp_forward
from .tensor import Tensor, finite_diff_check
from .vit import TokenSet, ViT, ViTConfig

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradCase:
    name: str
    fn: Callable[[Tensor], Tensor]
    x: np.ndarray


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _weights(rng, shape):
    return rng.standard_normal(shape)


def primitive_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    sh = (4, 8, 16)
    x = rng.standard_normal(sh)
    w = _weights(rng, sh)
    pos = rng.uniform(0.5, 2.0, sh)
    g16 = rng.standard_normal(16)
    b16 = rng.standard_normal(16)
    m = rng.standard_normal((16, 5))
    # smooth-l1 coordinates kept away from the |d| = 1 kink
    d_far = rng.uniform(0.1, 0.8, sh) * rng.choice([-1, 1], sh) + rng.choice([0.0, 2.0], sh)
    idx = (slice(None), np.array([0, 2, 2, 5]), slice(3, 11))
    other = rng.standard_normal((4, 3, 16))

    def wsum(y: Tensor) -> Tensor:
        return T.tsum(y * rng_fixed(y.shape))

    fixed: dict = {}

    def rng_fixed(shape):
        if shape not in fixed:
            fixed[shape] = np.random.default_rng(abs(hash(shape)) % 2**32).standard_normal(shape)
        return fixed[shape]

    return [
        GradCase("add", lambda t: wsum(t + w), x),
        GradCase("add_broadcast", lambda t: wsum(Tensor(w) + t), rng.standard_normal((8, 16))),
        GradCase("sub", lambda t: wsum(w - t), x),
        GradCase("mul", lambda t: wsum(t * t * w), x),
        GradCase("div", lambda t: wsum(w / t), pos),
        GradCase("neg", lambda t: wsum(-t), x),
        GradCase("power", lambda t: wsum(t**3), x),
        GradCase("exp", lambda t: wsum(T.exp(t)), x),
        GradCase("log", lambda t: wsum(T.log(t)), pos),
        GradCase("sqrt", lambda t: wsum(T.sqrt(t)), pos),
        GradCase("tanh", lambda t: wsum(T.tanh(t)), x),
        GradCase("gelu", lambda t: wsum(T.gelu(t)), x),
        GradCase("huber", lambda t: wsum(T.huber(t)), d_far),
        GradCase("matmul", lambda t: wsum(t @ m), x),
        GradCase("matmul_rhs", lambda t: wsum(Tensor(x) @ t), m),
        GradCase("sum_axis", lambda t: wsum(T.tsum(t, axis=1)), x),
        GradCase("mean_axis", lambda t: wsum(T.mean(t, axis=(0, 2), keepdims=True)), x),
        GradCase("reshape", lambda t: wsum(t.reshape(8, 4, 16)), x),
        GradCase("transpose", lambda t: wsum(t.transpose(2, 0, 1)), x),
        GradCase("getitem", lambda t: wsum(t[idx]), x),
        GradCase("concat", lambda t: wsum(T.concat([t, Tensor(other), t], axis=1)), x),
        GradCase("l2norm", lambda t: wsum(T.l2norm(t, -1)), x),
        GradCase("softmax", lambda t: wsum(T.softmax(t, axis=-1)), x),
        GradCase("log_softmax", lambda t: wsum(T.log_softmax(t, axis=1)), x),
        GradCase("layernorm_x", lambda t: wsum(T.layernorm(t, g16, b16)), x),
        GradCase("layernorm_gamma", lambda t: wsum(T.layernorm(Tensor(x), t, b16)), g16),
        GradCase("layernorm_beta", lambda t: wsum(T.layernorm(Tensor(x), g16, t)), b16),
        GradCase("cosine_loss", lambda t: T.tsum(cosine_loss(t, w)), x),
        GradCase("smooth_l1_loss", lambda t: T.tsum(smooth_l1_loss(t, Tensor(x))),
                 x + d_far),
    ]


def _small_student() -> ViTConfig:
    return ViTConfig(image_size=14, patch_size=7, depth=3, width=16, heads=2,
                     mlp_ratio=2.0, layerscale_init=0.5)


def composite_cases(seed: int = 0) -> list[GradCase]:
    """Encoder -> projector -> cosine + smooth-l1 against fixed random targets."""
    rng = np.random.default_rng(seed + 1)
    cfg = _small_student()
    vit = ViT(cfg, rng)
    for p in vit.params.values():
        p.requires_grad = False
    images = rng.uniform(0, 1, (2, cfg.channels, cfg.image_size, cfg.image_size))
    with T.no_grad():
        z0 = vit.patch_embed(images).tokens.data
    projs = {kind: Projector(kind, cfg, 12, rng) for kind in ("sp", "lp", "tp")}
    for proj in projs.values():
        for p in proj.params.values():
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
            p.requires_grad = False
    target = rng.standard_normal((2, z0.shape[1], 12))

    def path(kind):
        def f(z: Tensor) -> Tensor:
            final, inter = vit.encoder_forward(TokenSet(z, cfg.grid), collect_intermediates=True)
            out = projs[kind](final, inter).tokens
            return T.mean(cosine_loss(out, target)) + T.mean(smooth_l1_loss(out, target))
        return f

    def attention_only(z: Tensor) -> Tensor:
        y = L.attention(z, vit.params, "blocks.0.attn", cfg.heads)
        return T.tsum(y * target[..., :1])

    def encoder_scalar(z: Tensor) -> Tensor:
        final, _ = vit.encoder_forward(TokenSet(z, cfg.grid))
        return T.tsum(final.tokens * z0)

    tp_head = projs["tp"].params["tp.head.weight"].data

    def tp_param(w: Tensor) -> Tensor:
        params = dict(projs["tp"].params)
        params["tp.head.weight"] = w
        final, _ = vit.encoder_forward(TokenSet(Tensor(z0), cfg.grid))
        out = tp_forward(final, params, cfg.heads).tokens
        return T.mean(cosine_loss(out, target)) + T.mean(smooth_l1_loss(out, target))

    return [
        GradCase("attention", attention_only, z0),
        GradCase("encoder", encoder_scalar, z0),
        GradCase("encoder+sp+loss", path("sp"), z0),
        GradCase("encoder+lp+loss", path("lp"), z0),
        GradCase("encoder+tp+loss", path("tp"), z0),
        GradCase("tp_head_weight", tp_param, tp_head),
    ]


def run_gradcheck(seed: int = 0, step: float = STEP) -> list[GradResult]:
    results = []
    for case in primitive_cases(seed) + composite_cases(seed):
        t0 = time.perf_counter()
        err = finite_diff_check(case.fn, case.x, step)
        results.append(GradResult(case.name, err, case.x.size, time.perf_counter() - t0))
    return results


def format_table(results: list[GradResult]) -> str:
    lines = [f"{'op':<20} {'coords':>7} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(
            f"{r.name:<20} {r.coords:>7} {r.max_rel_error:>12.3e}  {'ok' if r.ok else 'FAIL'}"
        )
    return "\n".join(lines)
