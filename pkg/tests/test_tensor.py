import numpy as np
import pytest
from gradcheck import gradcheck
from hypothesis import given, settings
from hypothesis import strategies as st

from reassembly import tensor as T


# ---------------------------------------------------------------------------
# forward semantics

def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    out = T.matmul(T.Array(np.eye(4)), T.Array(a))
    assert np.allclose(out.data, a)


def test_matmul_1x1_is_scalar_product():
    out = T.matmul(T.Array([[3.0]]), T.Array([[4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 12.0


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        T.matmul(T.Array(np.zeros((2, 3))), T.Array(np.zeros((4, 2))))
    with pytest.raises(ValueError):
        T.matmul(T.Array(np.zeros(3)), T.Array(np.zeros((3, 2))))


def test_batched_matmul_broadcasts_leading_axis():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((5, 4))
    x = rng.standard_normal((7, 4, 3))
    out = T.matmul(T.Array(w), T.Array(x))
    assert out.data.shape == (7, 5, 3)
    assert np.allclose(out.data, np.einsum("oc,ncd->nod", w, x))


def test_bias_add_suffix_alignment():
    out = T.add(T.Array(np.ones((3, 4))), T.Array(np.arange(4.0)))
    assert np.allclose(out.data, 1.0 + np.arange(4.0))


def test_broadcast_rejected_without_explicit_reshape():
    with pytest.raises(ValueError):
        T.add(T.Array(np.zeros((4, 3))), T.Array(np.zeros(4)))


def test_mixed_dtypes_rejected():
    with pytest.raises(TypeError):
        T.add(T.Array(np.zeros(3, dtype=np.float32)), T.Array(np.zeros(3, dtype=np.float64)))


def test_python_scalars_adopt_operand_dtype():
    x = T.Array(np.ones(3, dtype=np.float32))
    assert (x * 2.0).dtype == np.float32
    assert (1.0 + x).dtype == np.float32


def test_softmax_rows_normalize():
    rng = np.random.default_rng(2)
    x = T.Array(rng.standard_normal((5, 7)))
    s = T.softmax(x, axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0)
    assert np.all(s.data > 0)


def test_softmax_shift_invariance():
    x = np.array([[1.0, 2.0, 3.0]])
    a = T.softmax(T.Array(x)).data
    b = T.softmax(T.Array(x + 100.0)).data
    assert np.allclose(a, b)


def test_layer_norm_statistics():
    rng = np.random.default_rng(3)
    x = T.Array(rng.standard_normal((6, 9)) * 4.0 + 2.0)
    gain = T.Array(np.ones(9))
    bias = T.Array(np.zeros(9))
    y = T.layer_norm(x, gain, bias).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_concat_and_slice_roundtrip():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 5))
    joined = T.concat([T.Array(a), T.Array(b)], axis=1)
    assert np.allclose(T.slice_axis(joined, 1, 0, 2).data, a)
    assert np.allclose(T.slice_axis(joined, 1, 2, 7).data, b)


def test_clamp_limits():
    x = T.Array(np.array([-2.0, 0.5, 3.0]))
    assert np.allclose(T.clamp(x, 0.0, 1.0).data, [0.0, 0.5, 1.0])


def test_detach_blocks_gradient():
    x = T.parameter(np.ones(3), dtype=np.float64)
    loss = T.sum_(T.mul(T.detach(x), x))
    T.backward(loss)
    assert np.allclose(x.grad, np.ones(3))  # only the live branch contributes


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3), dtype=np.float64)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, x))


def test_backward_sum_gives_ones():
    x = T.parameter(np.arange(6.0).reshape(2, 3), dtype=np.float64)
    T.backward(T.sum_(x))
    assert np.allclose(x.grad, np.ones((2, 3)))


def test_backward_squared_norm_gives_2x():
    rng = np.random.default_rng(5)
    v = rng.standard_normal(4)
    x = T.parameter(v, dtype=np.float64)
    T.backward(T.sum_(T.square(x)))
    assert np.allclose(x.grad, 2.0 * v)


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(99)
        x = T.Array(rng.standard_normal((8, 5)).astype(np.float32))
        w = T.Array(rng.standard_normal((5, 4)).astype(np.float32))
        return T.sum_(T.tanh(T.matmul(x, w))).data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# finite-difference oracles, one per differentiable op

def test_grad_matmul():
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    gradcheck(lambda x, y: T.sum_(T.square(T.matmul(x, y))), a, b)


def test_grad_batched_matmul():
    rng = np.random.default_rng(11)
    w, x = rng.standard_normal((4, 2)), rng.standard_normal((6, 2, 3))
    gradcheck(lambda u, v: T.sum_(T.square(T.matmul(u, v))), w, x)


@pytest.mark.parametrize(
    "name,builder",
    [
        ("add", lambda x, y: T.add(x, y)),
        ("sub", lambda x, y: T.sub(x, y)),
        ("mul", lambda x, y: T.mul(x, y)),
        ("div", lambda x, y: T.div(x, T.add(T.square(y), 1.0))),
        ("minimum", lambda x, y: T.minimum(x, y)),
        ("maximum", lambda x, y: T.maximum(x, y)),
    ],
)
def test_grad_binary_ops(name, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    gradcheck(lambda a, b: T.sum_(T.square(builder(a, b))), x, y)


@pytest.mark.parametrize(
    "name,builder,domain",
    [
        ("neg", T.neg, None),
        ("exp", T.exp, None),
        ("log", T.log, "positive"),
        ("sqrt", T.sqrt, "positive"),
        ("square", T.square, None),
        ("sin", T.sin, None),
        ("cos", T.cos, None),
        ("tanh", T.tanh, None),
        ("sigmoid", T.sigmoid, None),
        ("relu", T.relu, "offset"),
    ],
)
def test_grad_unary_ops(name, builder, domain):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.standard_normal((4, 3))
    if domain == "positive":
        x = np.abs(x) + 0.5
    elif domain == "offset":
        x = x + np.where(x >= 0, 0.1, -0.1)  # keep clear of the kink
    gradcheck(lambda a: T.sum_(T.square(builder(a))), x)


def test_grad_reductions_and_shape_ops():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 4, 2))
    gradcheck(lambda a: T.sum_(T.square(T.sum_(a, axis=1))), x)
    gradcheck(lambda a: T.sum_(T.square(T.mean(a, axis=(0, 2)))), x)
    gradcheck(lambda a: T.sum_(T.square(T.reshape(a, (6, 4)))), x)
    gradcheck(lambda a: T.sum_(T.square(T.transpose(a, (2, 0, 1)))), x)
    gradcheck(lambda a: T.sum_(T.square(T.slice_axis(a, 1, 1, 3))), x)


def test_grad_concat():
    rng = np.random.default_rng(13)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    gradcheck(lambda x, y: T.sum_(T.square(T.concat([x, y], axis=1))), a, b)


def test_grad_softmax_and_layer_norm():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal(5)
    gradcheck(lambda a: T.sum_(T.square(T.softmax(a, axis=-1))), x)
    gradcheck(
        lambda a, g, b: T.sum_(T.square(T.layer_norm(a, g, b))),
        x,
        np.abs(w) + 0.5,
        rng.standard_normal(5),
    )


def test_grad_clamp_pass_through_region():
    x = np.array([[-0.5, 0.2, 0.8, 1.5]])
    gradcheck(lambda a: T.sum_(T.square(T.clamp(a, 0.0, 1.0))), x)


def test_grad_broadcast_bias():
    rng = np.random.default_rng(15)
    x, b = rng.standard_normal((5, 3)), rng.standard_normal(3)
    gradcheck(lambda a, c: T.sum_(T.square(T.add(a, c))), x, b)


def test_min_max_tie_gradient_splits_evenly():
    v = np.ones(4)
    x = T.parameter(v, dtype=np.float64)
    y = T.parameter(v.copy(), dtype=np.float64)
    T.backward(T.sum_(T.minimum(x, y)))
    assert np.allclose(x.grad, 0.5)
    assert np.allclose(y.grad, 0.5)
    x.grad = y.grad = None
    T.backward(T.sum_(T.maximum(x, y)))
    assert np.allclose(x.grad, 0.5)
    assert np.allclose(y.grad, 0.5)


def test_grad_composed_mlp():
    rng = np.random.default_rng(16)
    x = rng.standard_normal((6, 4))
    w1, b1 = rng.standard_normal((4, 8)), rng.standard_normal(8)
    w2 = rng.standard_normal((8, 1))

    def loss(xa, w1a, b1a, w2a):
        h = T.tanh(T.add(T.matmul(xa, w1a), b1a))
        return T.mean(T.square(T.matmul(h, w2a)))

    gradcheck(loss, x, w1, b1, w2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_grad_random_shapes_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    m = int(rng.integers(1, 5))
    k = int(rng.integers(1, 5))
    a = rng.standard_normal((n, k))
    b = rng.standard_normal((k, m))
    gradcheck(lambda x, y: T.mean(T.sigmoid(T.matmul(x, y))), a, b)


# ---------------------------------------------------------------------------
# optimizer

def test_adam_zero_grad_noop():
    p = T.parameter(np.array([1.0, 2.0]), dtype=np.float64)
    opt = T.Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    opt.step()  # no gradient was set
    assert np.array_equal(p.data, before)


def test_adam_descends_quadratic():
    p = T.parameter(np.array([1.0]), dtype=np.float64)
    opt = T.Adam({"p": p}, lr=0.1)
    loss = T.sum_(T.square(p))
    T.backward(loss)
    opt.step()
    assert abs(p.data[0]) < 1.0


def test_adam_converges_on_2d_quadratic():
    p = T.parameter(np.array([1.0, -1.5]), dtype=np.float64)
    scale = T.Array(np.array([1.0, 3.0]))
    opt = T.Adam({"p": p}, lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        T.backward(T.sum_(T.mul(scale, T.square(p))))
        opt.step()
    assert np.linalg.norm(p.data) < 1e-2


def test_adam_state_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    p = T.parameter(rng.standard_normal(4), dtype=np.float64)
    opt = T.Adam({"p": p}, lr=0.05)
    for _ in range(3):
        opt.zero_grad()
        T.backward(T.sum_(T.square(p)))
        opt.step()
    path = tmp_path / "state.ckpt"
    T.save_checkpoint(path, {**opt.state_entries(), "w/p": p.data})

    p2 = T.parameter(np.zeros(4), dtype=np.float64)
    opt2 = T.Adam({"p": p2}, lr=0.05)
    loaded = T.load_checkpoint(path)
    p2.data = loaded["w/p"]
    opt2.load_state_entries(loaded)
    assert opt2.step_count == 3
    for _ in range(2):
        for o, q in ((opt, p), (opt2, p2)):
            o.zero_grad()
            T.backward(T.sum_(T.square(q)))
            o.step()
    assert np.allclose(p.data, p2.data)


# ---------------------------------------------------------------------------
# checkpoint format

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(18)
    entries = {
        "encoder/lift.weight": rng.standard_normal((4, 2)).astype(np.float32),
        "flow/head.bias": rng.standard_normal(3),
        "meta/step": np.asarray(7.0),
    }
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, entries)
    loaded = T.load_checkpoint(path)
    assert set(loaded) == set(entries)
    for k in entries:
        assert loaded[k].dtype == entries[k].dtype
        assert np.array_equal(loaded[k], entries[k])


def test_checkpoint_magic_and_version(tmp_path):
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, {"a": np.zeros(1, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    assert raw[:5] == b"EM3RF"
    raw[0] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        T.load_checkpoint(bad)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, {"a": np.arange(10.0)})
    raw = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        T.load_checkpoint(cut)


def test_checkpoint_trailing_bytes_detected(tmp_path):
    path = tmp_path / "model.ckpt"
    T.save_checkpoint(path, {"a": np.arange(4.0)})
    fat = tmp_path / "fat.ckpt"
    fat.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ValueError, match="trailing"):
        T.load_checkpoint(fat)
