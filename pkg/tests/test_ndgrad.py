import numpy as np
import pytest

from prefixgen import ndgrad as nd
from prefixgen.ndgrad import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


def test_forward_examples():
    a = np.arange(9, dtype=np.float32).reshape(3, 3)
    assert np.array_equal(nd.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    assert np.allclose(nd.softmax(Tensor(np.zeros((1, 3)))).data, 1 / 3)
    assert np.array_equal(nd.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_scalar_tensor_keeps_shape():
    assert Tensor(0.0).shape == ()


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    nd.backward(nd.sum_(nd.square(x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_unrelated_leaf_gets_zero():
    x, y = leaf([1.0, 2.0]), leaf([3.0])
    loss = nd.add(nd.sum_(x), nd.scale(nd.sum_(y), 0.0))
    nd.backward(loss)
    assert np.array_equal(y.grad, [0.0])


def test_backward_requires_scalar():
    with pytest.raises(nd.NonScalarLoss):
        nd.backward(nd.square(leaf([1.0, 2.0])))


def test_no_implicit_broadcasting():
    with pytest.raises(nd.ShapeMismatch):
        nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = nd.expand(Tensor(np.ones(3)), (2, 3))
    assert out.shape == (2, 3)


def test_grad_check_examples():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=5))
    assert nd.grad_check(lambda t: nd.sum_(t), x) < 1e-7
    A = Tensor(rng.normal(size=(5, 5)))
    quad = lambda t: nd.sum_(nd.mul(t, nd.reshape(nd.matmul(nd.reshape(t, (1, 5)), A), (5,))))  # noqa: E731
    assert nd.grad_check(quad, x) < 1e-4
    assert x.data.dtype == np.float32  # restored after the float64 check


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(1)
    p = nd.softmax(Tensor(rng.normal(size=(20, 7)) * 30)).data
    assert (p >= 0).all()
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("name,fn", [
    ("layer_norm", lambda t, g, b: nd.layer_norm(t, g, b)),
    ("log_softmax", lambda t, g, b: nd.log_softmax(t)),
    ("sigmoid", lambda t, g, b: nd.sigmoid(t)),
    ("sqrt", lambda t, g, b: nd.sqrt(nd.add_const(nd.square(t), 1.0))),
    ("div", lambda t, g, b: nd.div(t, nd.add_const(nd.square(t), 2.0))),
    ("concat_getitem", lambda t, g, b: nd.getitem(nd.concat([t, nd.scale(t, 2.0)], axis=1), (slice(1, 3),))),
    ("transpose", lambda t, g, b: nd.matmul(t, nd.transpose(t, (1, 0)))),
    ("masked_fill", lambda t, g, b: nd.softmax(nd.masked_fill(t, np.tril(np.ones((3, 4), bool)), -np.inf))),
])
def test_op_gradients(name, fn):
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(3, 4)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = Tensor(rng.normal(size=fn(x, g, b).shape))
    f = lambda t: nd.sum_(nd.mul(fn(t, g, b), w))  # noqa: E731
    assert nd.grad_check(f, x) < 1e-3


def test_embed_and_cross_entropy_gradients():
    rng = np.random.default_rng(3)
    table = leaf(rng.normal(size=(6, 4)))
    ids = np.array([0, 2, 2, 5])
    assert nd.grad_check(lambda t: nd.sum_(nd.square(nd.embed(t, ids))), table) < 1e-3
    logits = leaf(rng.normal(size=(5, 6)))
    targets = np.array([1, 0, 3, 0, 5])
    assert nd.grad_check(lambda t: nd.cross_entropy(t, targets, ignore_index=0), logits) < 1e-3


def test_relu_subgradient_zero_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    nd.backward(nd.sum_(nd.relu(x)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with nd.no_grad():
        y = nd.square(x)
    assert not y.requires_grad


def test_determinism():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    r1 = nd.layer_norm(nd.matmul(Tensor(a), Tensor(b))).data
    r2 = nd.layer_norm(nd.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_tensor_container_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"b": rng.normal(size=(3,)).astype(np.float32), "a": rng.normal(size=(2, 2)).astype(np.float32)}
    path = tmp_path / "t.ndgt"
    nd.save_tensors(path, tensors, {"k": 1})
    loaded, meta = nd.load_tensors(path)
    assert meta == {"k": 1}
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()
    first = path.read_bytes()
    nd.save_tensors(path, tensors, {"k": 1})
    assert path.read_bytes() == first


def test_tensor_container_detects_corruption(tmp_path):
    path = tmp_path / "t.ndgt"
    nd.save_tensors(path, {"a": np.ones(4, np.float32)})
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(nd.ChecksumMismatch):
        nd.load_tensors(path)


def test_grad_check_excludes_kink_crossings():
    # relu(x) at x = 1e-4: the +-eps probes straddle the kink
    x = leaf([1e-4, 0.5])
    rep = nd.grad_check_report(lambda t: nd.sum_(nd.relu(t)), x)
    assert rep.excluded == 1 and rep.checked == 1
    assert rep.max_rel_err < 1e-7


def test_grad_check_flags_wrong_gradient():
    def bad_square(a):
        a = nd.as_tensor(a)

        def bw(g, grads):
            nd._acc(grads, a, g * a.data)  # missing factor 2
        return nd.Tensor._make(a.data * a.data, (a,), bw, "bad_square")
    x = leaf([0.3, -1.2])
    assert nd.grad_check(lambda t: nd.sum_(bad_square(t)), x) > 0.1


def test_dropout_scales_survivors_and_routes_gradient():
    x = leaf(np.ones((200, 50)))
    assert nd.dropout(x, 0.0, np.random.default_rng(0)) is x
    assert nd.dropout(x, 0.5, None) is x
    y = nd.dropout(x, 0.25, np.random.default_rng(0))
    kept = y.data != 0
    assert np.allclose(y.data[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02
    nd.backward(nd.sum_(y))
    assert np.array_equal(x.grad, y.data)
