import numpy as np
import pytest

from prefixgen import ndgrad as nd
from prefixgen.ndgrad import Tensor
from prefixgen.prefix_attention import (AllMaskedRow, AttentionWeights, causal_mask, decompose_head,
                                        extended_head, ffn, lambda_gate, multi_head,
                                        prefix_correlation_map, scaled_attention, transformer_block)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def test_scaled_attention_single_key():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(4, 3)))
    k = Tensor(rng.normal(size=(1, 3)))
    v = Tensor(rng.normal(size=(1, 5)))
    out, attn = scaled_attention(q, k, v)
    assert np.allclose(out.data, np.repeat(v.data, 4, axis=0))
    assert np.allclose(attn.data, 1.0)


def test_scaled_attention_uniform_for_equal_logits():
    q = Tensor(np.array([[1.0, 0.0]]))
    k = Tensor(np.array([[0.0, 1.0]] * 3))
    v = Tensor(np.eye(3))
    _, attn = scaled_attention(q, k, v)
    assert np.allclose(attn.data, 1 / 3)


def test_scaled_attention_matches_dense_oracle():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out, _ = scaled_attention(Tensor(q), Tensor(k), Tensor(v), causal_mask(3))
    logits = q @ k.T / 2.0
    logits[np.triu_indices(3, 1)] = -np.inf
    assert np.max(np.abs(out.data - _softmax(logits) @ v)) < 1e-6


def test_all_masked_row_raises():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(AllMaskedRow):
        scaled_attention(t, t, t, np.array([[True, False], [False, False]]))


def test_single_head_is_attention_then_output_projection():
    rng = np.random.default_rng(2)
    w = AttentionWeights.init(rng, 4, 1)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    mask = causal_mask(5)
    got = multi_head(Tensor(x), Tensor(x), w, mask).data
    ref, _ = scaled_attention(Tensor(x @ w.wq.data), Tensor(x @ w.wk.data), Tensor(x @ w.wv.data), mask)
    assert np.allclose(got, ref.data @ w.wo.data, atol=1e-5)


def test_multi_head_causality_and_zero_output():
    rng = np.random.default_rng(3)
    w = AttentionWeights.init(rng, 8, 2)
    x = rng.normal(size=(6, 8)).astype(np.float32)
    base = multi_head(Tensor(x), Tensor(x), w, causal_mask(6)).data
    x2 = x.copy()
    x2[4] += 1.0
    out = multi_head(Tensor(x2), Tensor(x2), w, causal_mask(6)).data
    assert np.array_equal(out[:4], base[:4])
    w.wo.data = np.zeros_like(w.wo.data)
    assert not multi_head(Tensor(x), Tensor(x), w, causal_mask(6)).data.any()


def test_ffn_examples():
    rng = np.random.default_rng(4)
    w = AttentionWeights.init(rng, 4, 1)
    z = rng.normal(size=(3, 4)).astype(np.float32)
    ref = np.maximum(z @ w.w1.data + w.b1.data, 0) @ w.w2.data + w.b2.data
    assert np.max(np.abs(ffn(Tensor(z), w).data - ref)) < 1e-6
    w.w1.data[:] = 0
    w.w2.data[:] = 0
    w.b2.data = np.arange(4, dtype=np.float32)
    assert np.array_equal(ffn(Tensor(z), w).data, np.tile(np.arange(4, dtype=np.float32), (3, 1)))
    # identity-like weights with non-negative input pass straight through
    w.w1.data = np.concatenate([np.eye(4), np.zeros((4, 12))], axis=1).astype(np.float32)
    w.w2.data = np.concatenate([np.eye(4), np.zeros((12, 4))], axis=0).astype(np.float32)
    w.b1.data[:] = 0
    w.b2.data[:] = 0
    zp = np.abs(z)
    assert np.allclose(ffn(Tensor(zp), w).data, zp)


def test_transformer_block_prefix_only_and_causality():
    rng = np.random.default_rng(5)
    w = AttentionWeights.init(rng, 8, 2)
    prefix = rng.normal(size=(6, 8)).astype(np.float32)
    out, maps = transformer_block(Tensor(prefix), w, return_maps=True)
    assert out.shape == (6, 8)
    assert not np.triu(maps.data[0], 1).any()
    x = rng.normal(size=(9, 8)).astype(np.float32)
    base = transformer_block(Tensor(x), w).data
    x[7] -= 2.0
    changed = transformer_block(Tensor(x), w).data
    assert np.array_equal(changed[:7], base[:7])
    assert transformer_block(Tensor(x), w).data.tobytes() == changed.tobytes()


def test_block_dropout_is_seeded_and_off_by_default():
    rng = np.random.default_rng(12)
    w = AttentionWeights.init(rng, 8, 2)
    x = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
    plain = transformer_block(x, w).data
    assert transformer_block(x, w, dropout=0.5).data.tobytes() == plain.tobytes()
    a = transformer_block(x, w, dropout=0.5, rng=np.random.default_rng(1)).data
    b = transformer_block(x, w, dropout=0.5, rng=np.random.default_rng(1)).data
    assert a.tobytes() == b.tobytes() and not np.allclose(a, plain)


def _draw(rng, d=8, n_c=3, l=5, m=4):
    x = rng.normal(size=(m, d))
    prefix = rng.normal(size=(n_c, d))
    ctx = rng.normal(size=(l, d))
    wq, wk, wv = (rng.normal(size=(d, d)) / np.sqrt(d) for _ in range(3))
    return x, prefix, ctx, wq, wk, wv


def test_lambda_gate_examples():
    rng = np.random.default_rng(6)
    x, prefix, ctx, wq, wk, _ = _draw(rng)
    assert np.array_equal(lambda_gate(x, prefix[:0], ctx, wq, wk), np.zeros(4))
    zeros = np.zeros_like(wq)
    lam = lambda_gate(x, prefix, ctx, zeros, wk)
    assert np.allclose(lam, 3 / (3 + 5))


def test_lambda_matches_prefix_column_mass():
    rng = np.random.default_rng(7)
    x, prefix, ctx, wq, wk, _ = _draw(rng)
    keys = np.concatenate([prefix, ctx]) @ wk
    p = _softmax((x @ wq) @ keys.T / np.sqrt(wq.shape[1]))
    assert np.max(np.abs(lambda_gate(x, prefix, ctx, wq, wk) - p[:, :3].sum(axis=1))) < 1e-6


def test_decomposition_identity_and_degenerate_keys():
    rng = np.random.default_rng(8)
    x, prefix, ctx, wq, wk, wv = _draw(rng)
    _, _, lam, recombined = decompose_head(x, prefix, ctx, wq, wk, wv)
    assert np.max(np.abs(recombined - extended_head(x, prefix, ctx, wq, wk, wv))) < 1e-6
    assert ((lam >= 0) & (lam <= 1)).all()
    same = ctx[:3].copy()
    _, _, _, rec = decompose_head(x, same, ctx, wq, wk, wv)
    assert np.max(np.abs(rec - extended_head(x, same, ctx, wq, wk, wv))) < 1e-6


def test_decomposition_prefix_fully_masked():
    rng = np.random.default_rng(9)
    x, prefix, ctx, wq, wk, wv = _draw(rng)
    pm = np.zeros((4, 3), bool)
    self_part, prefix_part, lam, rec = decompose_head(x, prefix, ctx, wq, wk, wv, prefix_mask=pm)
    assert not prefix_part.any() and not lam.any()
    assert np.allclose(self_part, extended_head(x, prefix[:0], ctx, wq, wk, wv))


def test_prefix_correlation_map_examples():
    rng = np.random.default_rng(10)
    w = AttentionWeights.init(rng, 8, 2)
    maps = prefix_correlation_map(rng.normal(size=(6, 8)).astype(np.float32), w)
    assert maps.shape == (2, 6, 6)
    assert not np.triu(maps, 1).any()
    assert np.all(maps[:, 0, 0] == 1.0)
    assert np.allclose(maps.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("part", ["attention", "ffn", "block"])
def test_layer_gradients(part):
    rng = np.random.default_rng(11)
    w = AttentionWeights.init(rng, 8, 2)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    proj = Tensor(rng.normal(size=(4, 8)))
    fns = {
        "attention": lambda t: multi_head(t, t, w, causal_mask(4)),
        "ffn": lambda t: ffn(t, w),
        "block": lambda t: transformer_block(t, w),
    }
    f = lambda t: nd.sum_(nd.mul(fns[part](t), proj))  # noqa: E731
    assert nd.grad_check(f, x) < 1e-3
    for weight in (w.wq, w.wv, w.w1):
        assert nd.grad_check(lambda _: f(x), weight) < 1e-3
