"""Shared transformer building blocks for the vision encoder and the LM."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, add, gelu, layer_norm, matmul, reshape, softmax, transpose

ATTN_MASK_VALUE = -1e9  # finite stand-in for -inf; softmax max-subtraction zeroes it out


def gaussian(rng: np.random.Generator, shape, std: float, dtype, requires_grad=True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype, requires_grad=True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, dtype, requires_grad=True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b), with w stored as [d_out, d_in]."""
    y = matmul(x, transpose(w))
    if b is not None:
        y = add(y, b)
    return y


def causal_mask(length: int, dtype) -> np.ndarray:
    m = np.zeros((length, length), dtype=dtype)
    m[np.triu_indices(length, k=1)] = ATTN_MASK_VALUE
    return m


def multi_head_attention(
    x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int, mask: np.ndarray | None
) -> Tensor:
    length, d = x.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split_heads(t):
        return transpose(reshape(t, (length, n_heads, dh)), (1, 0, 2))

    q = split_heads(linear(x, wq))
    k = split_heads(linear(x, wk))
    v = split_heads(linear(x, wv))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = add(scores, mask)
    probs = softmax(scores, axis=-1)
    ctx = matmul(probs, v)
    merged = reshape(transpose(ctx, (1, 0, 2)), (length, d))
    return linear(merged, wo)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def block_forward(x: Tensor, p: dict[str, Tensor], n_heads: int, mask: np.ndarray | None) -> Tensor:
    """One pre-norm transformer block: x + attn(ln1(x)) then x + mlp(ln2(x)).

    ``p`` carries ln1_g/ln1_b, wq/wk/wv/wo (attention weights, possibly
    LoRA-adapted by the caller), ln2_g/ln2_b and w1/b1/w2/b2.
    """
    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    x = add(x, multi_head_attention(h, p["wq"], p["wk"], p["wv"], p["wo"], n_heads, mask))
    h = layer_norm(x, p["ln2_g"], p["ln2_b"])
    return add(x, mlp(h, p["w1"], p["b1"], p["w2"], p["b2"]))


def init_block(rng, d: int, mlp_mult: int, dtype, requires_grad=True) -> dict[str, Tensor]:
    std = 1.0 / np.sqrt(d)
    hidden = mlp_mult * d
    return {
        "ln1_g": ones((d,), dtype, requires_grad),
        "ln1_b": zeros((d,), dtype, requires_grad),
        "wq": gaussian(rng, (d, d), std, dtype, requires_grad),
        "wk": gaussian(rng, (d, d), std, dtype, requires_grad),
        "wv": gaussian(rng, (d, d), std, dtype, requires_grad),
        "wo": gaussian(rng, (d, d), std, dtype, requires_grad),
        "ln2_g": ones((d,), dtype, requires_grad),
        "ln2_b": zeros((d,), dtype, requires_grad),
        "w1": gaussian(rng, (hidden, d), std, dtype, requires_grad),
        "b1": zeros((hidden,), dtype, requires_grad),
        "w2": gaussian(rng, (d, hidden), 1.0 / np.sqrt(hidden), dtype, requires_grad),
        "b2": zeros((d,), dtype, requires_grad),
    }
