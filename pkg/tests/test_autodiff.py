import numpy as np
import pytest

from spectrofm import autodiff as ad
from spectrofm.autodiff import Tensor, grad_check
from spectrofm.errors import BadMagic, NonFinite, NonScalarRoot, ShapeError, TruncatedShard


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, shape))


def _weights(out_shape, seed):
    # random projection turns any output into a scalar with non-trivial upstream grads
    return np.random.default_rng(seed + 10_000).standard_normal(out_shape)


def _scalar(fn, seed):
    def f(*xs):
        out = fn(*xs)
        return ad.tsum(out * Tensor(_weights(out.shape, seed)))

    return f


# (name, builder(rng) -> inputs, fn)
OPS = [
    ("matmul", lambda r: [_t(r, 3, 4), _t(r, 4, 2)], lambda a, b: a @ b),
    ("matmul_batched", lambda r: [_t(r, 2, 3, 4), _t(r, 2, 4, 2)], lambda a, b: a @ b),
    ("matmul_shared_rhs", lambda r: [_t(r, 2, 3, 4), _t(r, 4, 2)], lambda a, b: a @ b),
    ("add", lambda r: [_t(r, 3, 4), _t(r, 3, 4)], lambda a, b: a + b),
    ("add_bias", lambda r: [_t(r, 2, 3, 4), _t(r, 4)], ad.add_bias),
    ("mul", lambda r: [_t(r, 3, 4), _t(r, 3, 4)], lambda a, b: a * b),
    ("scale", lambda r: [_t(r, 5)], lambda a: ad.scale(a, -1.7)),
    ("transpose", lambda r: [_t(r, 2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
    ("reshape", lambda r: [_t(r, 2, 6)], lambda a: a.reshape(3, 4)),
    ("concat", lambda r: [_t(r, 2, 3), _t(r, 2, 2)], lambda a, b: ad.concat([a, b], axis=1)),
    ("slice", lambda r: [_t(r, 5, 4)], lambda a: a[1:4, ::2]),
    ("gather_repeat", lambda r: [_t(r, 5, 3)], lambda a: ad.take_rows(a, np.array([0, 2, 2, 4]))),
    ("masked_select", lambda r: [_t(r, 4, 3)], lambda a: ad.masked_select(a, np.array([1, 0, 1, 1], bool))),
    ("mean", lambda r: [_t(r, 3, 4)], lambda a: ad.mean(a, axis=0)),
    ("sum", lambda r: [_t(r, 3, 4)], lambda a: ad.tsum(a, axis=1, keepdims=True)),
    ("softmax", lambda r: [_t(r, 3, 5)], lambda a: ad.softmax(a, axis=-1)),
    ("log_softmax", lambda r: [_t(r, 3, 5)], lambda a: ad.log_softmax(a, axis=-1)),
    (
        "layer_norm",
        lambda r: [_t(r, 3, 6), _t(r, 6), _t(r, 6)],
        lambda x, g, b: ad.layer_norm(x, g, b),
    ),
    ("gelu", lambda r: [_t(r, 4, 3)], ad.gelu),
    ("relu", lambda r: [Tensor(np.array([-1.3, -0.2, 0.4, 2.0]))], ad.relu),
    ("exp", lambda r: [_t(r, 4)], ad.exp),
    ("log", lambda r: [_pos(r, 4)], ad.log),
    ("sqrt", lambda r: [_pos(r, 4)], ad.sqrt),
    ("l2_normalize", lambda r: [_t(r, 3, 4)], lambda a: ad.l2_normalize(a, axis=-1)),
    (
        "where_rows",
        lambda r: [_t(r, 2, 3, 4), _t(r, 4)],
        lambda x, m: ad.where_rows(np.array([[1, 0, 1], [0, 0, 1]], bool), x, m),
    ),
    (
        "conv1d",
        lambda r: [_t(r, 2, 3, 7), _t(r, 4, 3, 3), _t(r, 4)],
        lambda x, w, b: ad.conv1d(x, w, b, padding=1),
    ),
]


@pytest.mark.parametrize("name,build,fn", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_random_trials(name, build, fn):
    for trial in range(20):
        rng = np.random.default_rng(trial)
        inputs = build(rng)
        rep = grad_check(_scalar(fn, trial), inputs)
        assert rep.passed, (name, trial, rep)


def test_conv1d_tight_tolerance():
    rng = np.random.default_rng(0)
    inputs = [_t(rng, 2, 3, 9), _t(rng, 5, 3, 3), _t(rng, 5)]
    rep = grad_check(_scalar(lambda x, w, b: ad.conv1d(x, w, b, padding=1), 0), inputs, tol=1e-5)
    assert rep.max_rel_err < 1e-5


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 6)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    ref = np.zeros((2, 4, 6))
    for n in range(2):
        for o in range(4):
            for t in range(6):
                ref[n, o, t] = np.sum(w[o] * xp[n, :, t : t + 3]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_forward_examples():
    assert np.allclose(ad.softmax(Tensor(np.zeros(3))).data, 1 / 3)
    assert np.allclose(ad.layer_norm(Tensor(np.full((1, 3), 2.0))).data, 0)
    assert ad.gelu(Tensor(np.zeros(1))).data[0] == 0.0


def test_softmax_rows_and_layer_norm_moments():
    x = Tensor(np.random.default_rng(0).standard_normal((6, 10)) * 5)
    assert np.allclose(ad.softmax(x).data.sum(axis=-1), 1, atol=1e-12)
    y = ad.layer_norm(x, eps=0.0).data
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-6)
    assert np.allclose(y.var(axis=-1), 1, atol=1e-6)


def test_backward_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_fan_out_accumulates():
    x = Tensor(np.array(1.5), requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_sum_of_products_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = _t(rng, 3, 3), _t(rng, 3, 3)
    rep = grad_check(lambda a, b: ad.tsum(a * b), [a, b])
    assert rep.max_rel_err < 1e-6


def test_linear_function_exact():
    rng = np.random.default_rng(4)
    w = rng.standard_normal(6)
    rep = grad_check(lambda x: ad.tsum(x * Tensor(w)), [_t(rng, 6)])
    assert rep.max_abs_err < 1e-9


def test_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarRoot):
        (x * 2.0).backward()


def test_detached_graph_is_noop():
    x = Tensor(np.ones(3))
    y = ad.tsum(x * 2.0)
    y.backward()
    assert x.grad is None


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.tsum(x * 2.0)
    assert not y.requires_grad


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_debug_mode_flags_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(NonFinite), np.errstate(divide="ignore"):
            ad.log(Tensor(np.array([0.0, 1.0])))
    finally:
        ad.set_debug(False)


def test_deterministic_backward():
    data = np.random.default_rng(9).standard_normal((4, 4))
    grads = []
    for _ in range(2):
        a = Tensor(data.copy(), requires_grad=True)
        ad.tsum(ad.softmax(a @ a) * a).backward()
        grads.append(a.grad)
    assert np.array_equal(grads[0], grads[1])


def test_checkpoint_roundtrip(tmp_path):
    arrs = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float32)}
    ad.save_checkpoint(tmp_path / "c.ckpt", arrs, {"epoch": 3})
    back, meta = ad.load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"epoch": 3}
    for k in arrs:
        assert np.array_equal(back[k], arrs[k])


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "c.ckpt"
    ad.save_checkpoint(p, {"w": np.ones(100, np.float32)})
    raw = p.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagic):
        ad.load_checkpoint(tmp_path / "bad")
    (tmp_path / "cut").write_bytes(raw[:-8])
    with pytest.raises(TruncatedShard):
        ad.load_checkpoint(tmp_path / "cut")
