"""Differentiation engine tests: every primitive against finite differences."""

import numpy as np
import pytest

from confflow import autodiff as ad


def fd_vjp(fn, x, cotangent, h=1e-6):
    """Finite-difference u^T J for a raw-array function fn: array -> array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for i in range(x.size):
        keep = xf[i]
        xf[i] = keep + h
        up = fn(x)
        xf[i] = keep - h
        down = fn(x)
        xf[i] = keep
        flat[i] = np.sum(cotangent * (up - down) / (2.0 * h))
    return out


def analytic_vjp(build, x, cotangent):
    """vjp of a taped single-input function built by ``build``."""
    with ad.Tape() as tape:
        t = ad.Tensor(x.copy())
        y = build(t)
    return ad.vjp(tape, y, ad.constant(cotangent), t).data


def test_swish_at_zero():
    assert ad.swish(ad.constant([0.0])).data[0] == 0.0


def test_softmax_symmetry():
    out = ad.softmax(ad.constant([[1.0, 1.0]]), axis=1)
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_segment_sum_hand_case():
    out = ad.segment_sum(ad.constant([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
    assert np.allclose(out.data.ravel(), [3.0, 3.0])


def test_shape_error_names_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.constant(np.ones((2, 2))), ad.constant(np.ones((2, 3))))


# every primitive: analytic vjp equals finite-difference J^T u on small shapes
PRIMITIVE_CASES = [
    ("add", lambda t: ad.add(t, ad.constant(np.full((2, 3), 0.7))), (2, 3)),
    ("sub", lambda t: ad.sub(ad.constant(np.full((2, 3), 0.7)), t), (2, 3)),
    ("mul", lambda t: ad.mul(t, ad.constant(np.arange(6.0).reshape(2, 3) - 2)), (2, 3)),
    ("scalar_mul", lambda t: ad.scalar_mul(t, -1.7), (2, 3)),
    ("matmul_l", lambda t: ad.matmul(t, ad.constant(np.arange(6.0).reshape(3, 2))), (2, 3)),
    ("matmul_r", lambda t: ad.matmul(ad.constant(np.arange(6.0).reshape(2, 3)), t), (3, 2)),
    ("transpose", lambda t: ad.transpose(t), (2, 4)),
    ("concat0", lambda t: ad.concat([t, ad.constant(np.ones((1, 3)))], axis=0), (2, 3)),
    ("concat1", lambda t: ad.concat([ad.constant(np.ones((2, 1))), t], axis=1), (2, 3)),
    ("slice0", lambda t: ad.slice_axis(t, 0, 1, 3), (4, 2)),
    ("slice1", lambda t: ad.slice_axis(t, 1, 0, 2), (2, 4)),
    ("pad0", lambda t: ad.pad_axis(t, 0, 1, 4), (2, 2)),
    ("pad1", lambda t: ad.pad_axis(t, 1, 2, 5), (2, 2)),
    ("sum_all", lambda t: ad.sum_all(t), (2, 4)),
    ("mean_all", lambda t: ad.mean_all(t), (2, 4)),
    ("expand", lambda t: ad.expand_scalar(t, (2, 3)), ()),
    ("gather", lambda t: ad.gather(t, [2, 0, 0, 1]), (3, 2)),
    ("segment_sum", lambda t: ad.segment_sum(t, [1, 0, 1, 1], 2), (4, 2)),
    ("exp", lambda t: ad.exp(t), (2, 3)),
    ("log", lambda t: ad.log(ad.add(ad.square(t), ad.constant(np.full((2, 3), 0.5)))), (2, 3)),
    ("sqrt", lambda t: ad.sqrt(ad.add(ad.square(t), ad.constant(np.full((2, 3), 0.5)))), (2, 3)),
    ("square", lambda t: ad.square(t), (2, 3)),
    ("sigmoid", lambda t: ad.sigmoid(t), (2, 3)),
    ("swish", lambda t: ad.swish(t), (2, 3)),
    ("softmax0", lambda t: ad.softmax(t, axis=0), (3, 2)),
    ("softmax1", lambda t: ad.softmax(t, axis=1), (2, 4)),
]


@pytest.mark.parametrize("name,build,shape", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_vjp_matches_finite_differences(name, build, shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.normal(size=shape)

    def raw(arr):
        with ad.Tape():
            return build(ad.Tensor(arr.copy())).data

    out_shape = raw(x).shape
    u = rng.normal(size=out_shape)
    numeric = fd_vjp(raw, x, u)
    analytic = analytic_vjp(build, x, u)
    denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    assert np.abs(numeric - analytic).max() / denom < 1e-5


def test_backward_sum_gives_ones():
    with ad.Tape() as tape:
        x = ad.Tensor(np.arange(4.0))
        y = ad.sum_all(x)
    g = ad.backward(tape, y)
    assert np.array_equal(g.wrt(x), np.ones(4))


def test_backward_product_rule():
    with ad.Tape() as tape:
        x = ad.Tensor(np.array(2.0))
        y = ad.Tensor(np.array(3.0))
        z = ad.mul(x, y)
    g = ad.backward(tape, z)
    assert g.wrt(x) == 3.0 and g.wrt(y) == 2.0


def test_backward_nonscalar_root_rejected():
    with ad.Tape() as tape:
        x = ad.Tensor(np.ones(3))
        y = ad.scalar_mul(x, 2.0)
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y)


def test_backward_unreachable_leaf_is_zero():
    with ad.Tape() as tape:
        x = ad.Tensor(np.ones(3))
        z = ad.Tensor(np.ones(2))
        y = ad.sum_all(x)
    g = ad.backward(tape, y)
    assert np.array_equal(g.wrt(z), np.zeros(2))


def _mlp(params, x):
    h = x
    for w, b in params:
        rows = ad.gather(b, np.zeros(h.shape[0], dtype=np.intp))
        h = ad.swish(ad.add(ad.matmul(h, w), rows))
    return ad.sum_all(h)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    params = []
    dims = [4, 5, 3, 2]
    for din, dout in zip(dims[:-1], dims[1:]):
        params.append((ad.Tensor(rng.normal(size=(din, dout)) * 0.7),
                       ad.Tensor(rng.normal(size=(1, dout)) * 0.2)))
    x = ad.constant(rng.normal(size=(3, 4)))
    leaves = [t for pair in params for t in pair]
    err = ad.check_gradients(lambda: _mlp(params, x), leaves)
    assert err < 1e-5


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x_data = rng.normal(size=(4, 3))
    w_data = rng.normal(size=(3, 3))

    def run():
        with ad.Tape() as tape:
            x = ad.Tensor(x_data.copy())
            w = ad.Tensor(w_data.copy())
            y = ad.sum_all(ad.swish(ad.matmul(x, w)))
        g = ad.backward(tape, y)
        return g.wrt(w)

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_gradient_linearity_over_roots():
    rng = np.random.default_rng(6)
    x_data = rng.normal(size=(3, 2))

    def grads_of(combine):
        with ad.Tape() as tape:
            x = ad.Tensor(x_data.copy())
            r1 = ad.sum_all(ad.square(x))
            r2 = ad.sum_all(ad.exp(ad.scalar_mul(x, 0.3)))
            root = combine(r1, r2)
        return ad.backward(tape, root).wrt(x)

    both = grads_of(lambda a, b: ad.add(a, b))
    first = grads_of(lambda a, b: a)
    second = grads_of(lambda a, b: b)
    assert np.allclose(both, first + second, atol=1e-14)


def test_vjp_identity_jacobian():
    with ad.Tape() as tape:
        z = ad.Tensor(np.array([[1.0, 2.0, 3.0]]))
        f = ad.add(z, ad.constant(np.zeros((1, 3))))
    eps = ad.constant(np.array([[0.3, -1.2, 2.0]]))
    assert np.allclose(ad.vjp(tape, f, eps, z).data, eps.data)


def test_vjp_doubling_jacobian():
    with ad.Tape() as tape:
        z = ad.Tensor(np.array([[1.0, 1.0, 1.0]]))
        f = ad.scalar_mul(z, 2.0)
    eps = ad.constant(np.ones((1, 3)))
    assert np.allclose(ad.vjp(tape, f, eps, z).data, 2.0 * np.ones((1, 3)))


def test_vjp_against_dense_jacobian_assembly():
    # random 6-dim affine map: eps^T J must equal the explicit matrix product
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6, 6))
    c = rng.normal(size=(1, 6))
    with ad.Tape() as tape:
        z = ad.Tensor(rng.normal(size=(1, 6)))
        f = ad.add(ad.matmul(z, ad.constant(a)), ad.constant(c))
    eps_data = rng.normal(size=(1, 6))
    got = ad.vjp(tape, f, ad.constant(eps_data), z).data
    want = eps_data @ a.T
    assert np.abs(got - want).max() < 1e-10


def test_vjp_rejects_foreign_input():
    with ad.Tape() as t1:
        other = ad.scalar_mul(ad.Tensor(np.ones(2)), 1.0)
    with ad.Tape() as t2:
        z = ad.Tensor(np.ones(2))
        f = ad.scalar_mul(z, 3.0)
    with pytest.raises(ad.TapeError):
        ad.vjp(t2, f, ad.constant(np.ones(2)), other)


def test_check_gradients_linear_function():
    w = ad.Tensor(np.array([[1.0, -2.0, 0.5]]))
    c = ad.constant(np.array([[2.0, 0.3, -1.0]]))
    err = ad.check_gradients(lambda: ad.dot_all(w, c), [w])
    assert err < 1e-9


def test_check_gradients_ignored_parameter():
    used = ad.Tensor(np.array([[1.0]]))
    unused = ad.Tensor(np.array([[5.0]]))
    err = ad.check_gradients(lambda: ad.sum_all(ad.square(used)), [used, unused])
    assert err < 1e-9
    with ad.Tape() as tape:
        y = ad.sum_all(ad.square(used))
    assert np.array_equal(ad.backward(tape, y).wrt(unused), np.zeros((1, 1)))


def test_gradient_through_vjp_is_correct():
    # loss built from a vjp result must still differentiate correctly
    rng = np.random.default_rng(9)
    a = ad.Tensor(rng.normal(size=(1, 3)))
    e = ad.constant(np.array([[1.0, -1.0, 1.0]]))

    def fn():
        tape = ad.active_tape()
        h = ad.swish(ad.mul(a, a))
        g = ad.vjp(tape, h, e, a)
        return ad.dot_all(g, e)

    assert ad.check_gradients(fn, [a]) < 1e-5


def test_parameter_store_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    store = ad.ParameterStore()
    store.add("layer.w", rng.normal(size=(4, 3)) * np.pi)
    store.add("layer.b", rng.normal(size=(1, 3)) / 3.0)
    path = tmp_path / "params.json"
    store.save(path)

    other = ad.ParameterStore()
    other.load(path)
    for name, t in store.items():
        assert np.array_equal(t.data, other[name].data)
        assert t.data.tobytes() == other[name].data.tobytes()


def test_parameter_store_rejects_duplicates():
    store = ad.ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(2))
