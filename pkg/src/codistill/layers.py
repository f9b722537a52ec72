"""Parameter initialisation and the pre-LN transformer block shared by encoder and TP."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict  # name -> Tensor, insertion-ordered


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def init_linear(p: Params, prefix: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
    p[f"{prefix}.weight"] = param(trunc_normal(rng, (n_in, n_out)), f"{prefix}.weight")
    if bias:
        p[f"{prefix}.bias"] = param(np.zeros(n_out), f"{prefix}.bias")


def init_layernorm(p: Params, prefix: str, width: int) -> None:
    p[f"{prefix}.weight"] = param(np.ones(width), f"{prefix}.weight")
    p[f"{prefix}.bias"] = param(np.zeros(width), f"{prefix}.bias")


def init_block(
    p: Params,
    prefix: str,
    width: int,
    mlp_hidden: int,
    rng,
    qkv_bias: bool = True,
    layerscale: bool = True,
    layerscale_init: float = 1e-5,
) -> None:
    init_layernorm(p, f"{prefix}.norm1", width)
    init_linear(p, f"{prefix}.attn.qkv", width, 3 * width, rng, bias=qkv_bias)
    init_linear(p, f"{prefix}.attn.proj", width, width, rng)
    if layerscale:
        p[f"{prefix}.ls1.gamma"] = param(np.full(width, layerscale_init), f"{prefix}.ls1.gamma")
    init_layernorm(p, f"{prefix}.norm2", width)
    init_linear(p, f"{prefix}.mlp.fc1", width, mlp_hidden, rng)
    init_linear(p, f"{prefix}.mlp.fc2", mlp_hidden, width, rng)
    if layerscale:
        p[f"{prefix}.ls2.gamma"] = param(np.full(width, layerscale_init), f"{prefix}.ls2.gamma")


def block_param_count(width: int, mlp_hidden: int, qkv_bias: bool, layerscale: bool) -> int:
    n = 2 * width  # norm1
    n += width * 3 * width + (3 * width if qkv_bias else 0)
    n += width * width + width
    n += 2 * width  # norm2
    n += width * mlp_hidden + mlp_hidden + mlp_hidden * width + width
    if layerscale:
        n += 2 * width
    return n


def layer_norm(x: Tensor, p: Params, prefix: str) -> Tensor:
    return T.layernorm(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def dense(x: Tensor, p: Params, prefix: str) -> Tensor:
    return T.linear(x, p[f"{prefix}.weight"], p.get(f"{prefix}.bias"))


def mlp(x: Tensor, p: Params, prefix: str) -> Tensor:
    return dense(T.gelu(dense(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def attention(x: Tensor, p: Params, prefix: str, heads: int, store: list | None = None) -> Tensor:
    """Multi-head self-attention over the token axis of ``x`` (B, N, d).

    When ``store`` is a list the post-softmax probabilities (B, heads, N, N)
    are appended to it as a numpy array.
    """
    b, n, d = x.shape
    dh = d // heads
    qkv = dense(x, p, f"{prefix}.qkv").reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    if store is not None:
        store.append(probs.data.copy())
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return dense(out, p, f"{prefix}.proj")


def block(
    x: Tensor, p: Params, prefix: str, heads: int, store: list | None = None
) -> Tensor:
    """Pre-LN residual block: x + ls1*SA(LN(x)), then + ls2*MLP(LN(.))."""
    h = attention(layer_norm(x, p, f"{prefix}.norm1"), p, f"{prefix}.attn", heads, store)
    if f"{prefix}.ls1.gamma" in p:
        h = h * p[f"{prefix}.ls1.gamma"]
    x = x + h
    h = mlp(layer_norm(x, p, f"{prefix}.norm2"), p, f"{prefix}.mlp")
    if f"{prefix}.ls2.gamma" in p:
        h = h * p[f"{prefix}.ls2.gamma"]
    return x + h
