"""Causal multi-head attention over a prefix-extended sequence, and its diagnostics.

The layer functions (``scaled_attention``, ``multi_head``, ``ffn``,
``transformer_block``) are differentiable ndgrad code used by the model.
``lambda_gate``, ``decompose_head`` and ``prefix_correlation_map`` are the
analysis side: they split one head's output into the part driven by
ordinary context keys and the part driven by prefix keys.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

CONDITION_LABELS = ("Pocket", "VINA", "QED", "SA", "LogP", "Lipinski")


class AllMaskedRow(ValueError):
    pass


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where query i may see key j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


@dataclass(eq=False)
class AttentionWeights(nd.Module):
    """Weights of one post-LN transformer block.

    Per-head projections are stored side by side: head i uses columns
    ``i*d_h:(i+1)*d_h`` of ``wq``, ``wk`` and ``wv``.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.wq.shape[1] % self.n_heads:
            raise ValueError("model width must be divisible by the head count")
        if self.w1.shape != (d, 4 * d) or self.w2.shape != (4 * d, d):
            raise ValueError("FFN hidden width must be 4 * d")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.wq.shape[1] // self.n_heads

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sl = slice(i * self.d_head, (i + 1) * self.d_head)
        return self.wq.data[:, sl], self.wk.data[:, sl], self.wv.data[:, sl]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, n_heads: int) -> "AttentionWeights":
        p = nd.param
        return cls(
            wq=p(rng, (d, d)), wk=p(rng, (d, d)), wv=p(rng, (d, d)),
            wo=p(rng, (d, d), std=1.0 / np.sqrt(d)),
            w1=p(rng, (d, 4 * d)), b1=p(rng, (4 * d,), zeros=True),
            w2=p(rng, (4 * d, d)), b2=p(rng, (d,), zeros=True),
            ln1_g=p(rng, (d,), ones=True), ln1_b=p(rng, (d,), zeros=True),
            ln2_g=p(rng, (d,), ones=True), ln2_b=p(rng, (d,), zeros=True),
            n_heads=n_heads,
        )


def scaled_attention(q, k, v, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k), masked) v for (..., m, d_k) queries and (..., n, d_k) keys.

    ``mask`` is a boolean (m, n) array, True where attention is allowed.
    Returns the output and the attention map.
    """
    q, k, v = nd.as_tensor(q), nd.as_tensor(k), nd.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1] or q.shape[:-2] != k.shape[:-2]:
        raise nd.ShapeMismatch("scaled_attention", q.shape, k.shape)
    logits = nd.scale(nd.matmul(q, nd.swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape[-2:]:
            raise nd.ShapeMismatch("attention mask", logits.shape[-2:], mask.shape)
        if not mask.any(axis=-1).all():
            raise AllMaskedRow("a query row has every key masked")
        logits = nd.masked_fill(logits, np.broadcast_to(mask, logits.shape), -np.inf)
    attn = nd.softmax(logits)
    return nd.matmul(attn, v), attn


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return nd.transpose(nd.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head(x, ctx, w: AttentionWeights, mask=None, return_maps: bool = False):
    """Cat(head_1..head_h) W_o with queries from ``x`` and keys/values from ``ctx``.

    Accepts (l, d) or batched (B, l, d) inputs.
    """
    x, ctx = nd.as_tensor(x), nd.as_tensor(ctx)
    single = x.ndim == 2
    if single:
        x = nd.reshape(x, (1,) + x.shape)
        ctx = nd.reshape(ctx, (1,) + ctx.shape)
    if x.shape[-1] != w.d or ctx.shape[-1] != w.d or x.shape[0] != ctx.shape[0]:
        raise nd.ShapeMismatch("multi_head", x.shape, ctx.shape)
    h = w.n_heads
    q = _split_heads(nd.linear(x, w.wq), h)
    k = _split_heads(nd.linear(ctx, w.wk), h)
    v = _split_heads(nd.linear(ctx, w.wv), h)
    out, maps = scaled_attention(q, k, v, mask)
    b, _, m, dh = out.shape
    out = nd.reshape(nd.transpose(out, (0, 2, 1, 3)), (b, m, h * dh))
    out = nd.linear(out, w.wo)
    if single:
        out = nd.reshape(out, out.shape[1:])
        maps = nd.reshape(maps, maps.shape[1:])
    return (out, maps) if return_maps else out


def ffn(z, w: AttentionWeights) -> Tensor:
    """ReLU(z W1 + b1) W2 + b2."""
    z = nd.as_tensor(z)
    if z.shape[-1] != w.d:
        raise nd.ShapeMismatch("ffn", z.shape, w.w1.shape)
    return nd.linear(nd.relu(nd.linear(z, w.w1, w.b1)), w.w2, w.b2)


def transformer_block(x_ext, w: AttentionWeights, return_maps: bool = False, dropout: float = 0.0,
                      rng=None):
    """Post-LN block: LN(x + MHA(x, x, causal)) then LN(. + FFN(.)).

    With ``dropout > 0`` and an ``rng`` (training only), both sublayer outputs are
    dropped out before their residual add.
    """
    x_ext = nd.as_tensor(x_ext)
    n = x_ext.shape[-2]
    attn, maps = multi_head(x_ext, x_ext, w, causal_mask(n), return_maps=True)
    y = nd.layer_norm(nd.add(x_ext, nd.dropout(attn, dropout, rng)), w.ln1_g, w.ln1_b)
    out = nd.layer_norm(nd.add(y, nd.dropout(ffn(y, w), dropout, rng)), w.ln2_g, w.ln2_b)
    return (out, maps) if return_maps else out


# ---------------------------------------------------------------------------
# analysis of a single head (plain numpy, any float dtype)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_logits(q: np.ndarray, k: np.ndarray, mask) -> np.ndarray:
    logits = q @ k.T / np.sqrt(q.shape[-1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return logits


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.exp(logits - safe).sum(axis=-1, keepdims=True)) + safe
    return np.where(finite, s, -np.inf)[..., 0]


def extended_head(x, prefix, ctx, wq, wk, wv, ctx_mask=None, prefix_mask=None) -> np.ndarray:
    """One head attending over Cat(prefix, ctx): the monolithic reference."""
    q = x @ wq
    keys = np.concatenate([prefix @ wk, ctx @ wk])
    vals = np.concatenate([prefix @ wv, ctx @ wv])
    m, nc, n = x.shape[0], prefix.shape[0], ctx.shape[0]
    pm = np.ones((m, nc), bool) if prefix_mask is None else np.asarray(prefix_mask, bool)
    cm = np.ones((m, n), bool) if ctx_mask is None else np.asarray(ctx_mask, bool)
    return _softmax_rows(_masked_logits(q, keys, np.concatenate([pm, cm], axis=1))) @ vals


def lambda_gate(x, prefix, ctx, wq, wk, ctx_mask=None, prefix_mask=None) -> np.ndarray:
    """Per-query share of attention mass that lands on prefix keys.

    Uses the same scaled logits as :func:`extended_head`; returns shape (m,).
    """
    q = x @ wq
    m = x.shape[0]
    if prefix.shape[0] == 0:
        return np.zeros(m, dtype=q.dtype)
    lp = _logsumexp(_masked_logits(q, prefix @ wk, prefix_mask))
    if ctx.shape[0] == 0:
        lc = np.full(m, -np.inf, dtype=q.dtype)
    else:
        lc = _logsumexp(_masked_logits(q, ctx @ wk, ctx_mask))
    top = np.maximum(lp, lc)
    with np.errstate(invalid="ignore"):
        a = np.exp(lp - top)
        b = np.exp(lc - top)
    return a / (a + b)


def _partial_attention(q, keys, vals, mask) -> np.ndarray:
    out = np.zeros((q.shape[0], vals.shape[1]), dtype=np.result_type(q, vals))
    if keys.shape[0] == 0:
        return out
    logits = _masked_logits(q, keys, mask)
    rows = np.isfinite(logits).any(axis=1)
    if rows.any():
        out[rows] = _softmax_rows(logits[rows]) @ vals
    return out


def decompose_head(x, prefix, ctx, wq, wk, wv, ctx_mask=None, prefix_mask=None):
    """Split one head into context and prefix parts.

    Returns ``(self_part, prefix_part, lam, recombined)`` where
    ``self_part = (1 - lam) * Attn(xWq, ctx Wk, ctx Wv)``,
    ``prefix_part = lam * Attn(xWq, prefix Wk, prefix Wv)`` and
    ``recombined = self_part + prefix_part``.
    """
    q = x @ wq
    lam = lambda_gate(x, prefix, ctx, wq, wk, ctx_mask, prefix_mask)
    self_attn = _partial_attention(q, ctx @ wk, ctx @ wv, ctx_mask)
    prefix_attn = _partial_attention(q, prefix @ wk, prefix @ wv, prefix_mask)
    self_part = (1.0 - lam)[:, None] * self_attn
    prefix_part = lam[:, None] * prefix_attn
    return self_part, prefix_part, lam, self_part + prefix_part


def prefix_correlation_map(prefix, w: AttentionWeights) -> np.ndarray:
    """(heads, n_c, n_c) causal attention maps of prefix rows among themselves."""
    prefix = np.asarray(prefix)
    nc = prefix.shape[0]
    mask = causal_mask(nc)
    maps = []
    for i in range(w.n_heads):
        wq, wk, _ = w.head(i)
        maps.append(_softmax_rows(_masked_logits(prefix @ wq, prefix @ wk, mask)))
    return np.stack(maps)
