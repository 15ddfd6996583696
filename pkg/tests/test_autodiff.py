import numpy as np
import pytest

from hetmeta import autodiff as ad
from hetmeta.autodiff import Tape, Tensor, check_gradients, finite_checks
from hetmeta.errors import (
    InvalidShapeError,
    InvalidValueError,
    NumericalFailureError,
    TapeUsageError,
)


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- mode3_product -----------------------------------------------------------


def test_mode3_product_identity_projection():
    z = Tensor(np.arange(1.0, 9.0).reshape(2, 2, 2))
    w = Tensor(np.eye(2))
    out = ad.mode3_product(z, w)
    np.testing.assert_array_equal(out.data, z.data)


def test_mode3_product_against_triple_loop():
    # frozen from the sum definition: ones(1,1,3) contracted with [1,2,3]
    z = Tensor(np.ones((1, 1, 3)))
    w = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = ad.mode3_product(z, w)
    np.testing.assert_allclose(out.data, [[[6.0]]])

    rng = np.random.default_rng(11)
    z = Tensor(rng.standard_normal((3, 2, 4)))
    w = Tensor(rng.standard_normal((5, 4)))
    got = ad.mode3_product(z, w).data
    want = np.zeros((3, 2, 5))
    for d1 in range(3):
        for d2 in range(2):
            for h in range(5):
                for d3 in range(4):
                    want[d1, d2, h] += z.data[d1, d2, d3] * w.data[h, d3]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_mode3_product_mode1_and_mode2_equivariant_exactly():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d1, d2, d3, h = rng.integers(1, 5, size=4)
        z = rng.standard_normal((d1, d2, d3))
        w = Tensor(rng.standard_normal((h, d3)))
        sigma1 = rng.permutation(d1)
        sigma2 = rng.permutation(d2)
        base = ad.mode3_product(Tensor(z), w).data
        perm1 = ad.mode3_product(Tensor(z[sigma1]), w).data
        np.testing.assert_array_equal(perm1, base[sigma1])
        perm2 = ad.mode3_product(Tensor(z[:, sigma2]), w).data
        np.testing.assert_array_equal(perm2, base[:, sigma2])


def test_mode3_product_shape_error_names_both_shapes():
    z = Tensor(np.zeros((2, 2, 3)))
    w = Tensor(np.zeros((4, 2)))
    with pytest.raises(InvalidShapeError, match=r"\(2, 2, 3\).*\(4, 2\)"):
        ad.mode3_product(z, w)


# -- matricize_mode1 ----------------------------------------------------------


def test_matricize_trivial_and_fibers():
    np.testing.assert_array_equal(
        ad.matricize_mode1(Tensor(np.full((1, 1, 1), 5.0))).data, [[5.0]]
    )
    q = np.arange(4.0).reshape(2, 1, 2)
    rows = ad.matricize_mode1(Tensor(q)).data
    np.testing.assert_array_equal(rows, [[0.0, 1.0], [2.0, 3.0]])


def test_matricized_product_matches_quadruple_loop():
    rng = np.random.default_rng(7)
    q = rng.standard_normal((3, 2, 2))
    k = rng.standard_normal((3, 2, 2))
    got = (ad.matmul(ad.matricize_mode1(Tensor(q)),
                     ad.transpose2d(ad.matricize_mode1(Tensor(k))))).data
    want = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for d2 in range(2):
                for h in range(2):
                    want[i, j] += q[i, d2, h] * k[j, d2, h]
    np.testing.assert_allclose(got, want, atol=1e-12)


# -- mode1_product ------------------------------------------------------------


def test_mode1_product_identity_and_uniform():
    rng = np.random.default_rng(5)
    v = Tensor(rng.standard_normal((4, 3, 2)))
    np.testing.assert_array_equal(ad.mode1_product(v, Tensor(np.eye(4))).data, v.data)
    uniform = Tensor(np.full((4, 4), 0.25))
    out = ad.mode1_product(v, uniform).data
    mean_slice = v.data.mean(axis=0)
    for d1 in range(4):
        np.testing.assert_allclose(out[d1], mean_slice, atol=1e-12)


def test_mode1_product_against_triple_loop():
    rng = np.random.default_rng(9)
    v = rng.standard_normal((3, 2, 1))
    a = rng.standard_normal((3, 3))
    got = ad.mode1_product(Tensor(v), Tensor(a)).data
    want = np.zeros((3, 2, 1))
    for d1 in range(3):
        for dp in range(3):
            want[d1] += a[d1, dp] * v[dp]
    np.testing.assert_allclose(got, want, atol=1e-12)
    with pytest.raises(InvalidShapeError):
        ad.mode1_product(Tensor(v), Tensor(np.zeros((2, 2))))


# -- softmax_rows -------------------------------------------------------------


def test_softmax_rows_analytic_values():
    out = ad.softmax_rows(Tensor(np.zeros((2, 2)))).data
    np.testing.assert_allclose(out, np.full((2, 2), 0.5))
    row = ad.softmax_rows(Tensor(np.array([[0.0, np.log(3.0)]]))).data
    np.testing.assert_allclose(row, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_shift_invariance_and_normalization():
    rng = np.random.default_rng(13)
    m = rng.standard_normal((5, 5)) * 3
    base = ad.softmax_rows(Tensor(m)).data
    shifted = m.copy()
    shifted[2] += 123.456
    np.testing.assert_allclose(ad.softmax_rows(Tensor(shifted)).data[2], base[2], atol=1e-12)
    np.testing.assert_allclose(base.sum(axis=1), np.ones(5), atol=1e-6)
    assert np.all(base > 0) and np.all(base < 1)
    # extreme magnitudes stay finite and normalized thanks to max subtraction
    extreme = ad.softmax_rows(Tensor(rng.standard_normal((4, 4)) * 500)).data
    np.testing.assert_allclose(extreme.sum(axis=1), np.ones(4), atol=1e-6)


def test_softmax_rows_rejects_non_finite():
    bad = np.zeros((2, 2))
    bad[0, 0] = np.nan
    with finite_checks(False):
        t = Tensor(bad)
        with pytest.raises(InvalidValueError):
            ad.softmax_rows(t)


# -- layer_norm ---------------------------------------------------------------


def test_layer_norm_constant_fiber_and_analytic():
    gain = Tensor(np.ones(3))
    bias = Tensor(np.zeros(3))
    const = Tensor(np.full((2, 2, 3), 4.0))
    np.testing.assert_allclose(ad.layer_norm(const, gain, bias).data, 0.0, atol=1e-8)

    g2 = Tensor(np.ones(2))
    b2 = Tensor(np.zeros(2))
    out = ad.layer_norm(Tensor(np.array([[[1.0, 3.0]]])), g2, b2).data
    np.testing.assert_allclose(out, [[[-1.0, 1.0]]], atol=1e-5)


def test_layer_norm_statistics_oracle():
    rng = np.random.default_rng(21)
    z = Tensor(rng.standard_normal((3, 4, 8)))
    out = ad.layer_norm(z, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


# -- transpose12 --------------------------------------------------------------


def test_transpose12_definition_and_involution():
    rng = np.random.default_rng(2)
    thin = rng.standard_normal((1, 1, 4))
    np.testing.assert_array_equal(ad.transpose12(Tensor(thin)).data, thin.transpose(1, 0, 2))

    z = np.arange(6.0).reshape(2, 3, 1)
    out = ad.transpose12(Tensor(z)).data
    for i in range(2):
        for j in range(3):
            assert out[j, i, 0] == z[i, j, 0]

    full = Tensor(rng.standard_normal((3, 2, 5)))
    np.testing.assert_array_equal(ad.transpose12(ad.transpose12(full)).data, full.data)


# -- backward / tape ----------------------------------------------------------


def test_backward_sum_gives_ones():
    rng = np.random.default_rng(1)
    w = leaf(rng, 3, 4)
    with Tape() as tape:
        loss = w.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_backward_mode3_hand_chain_rule():
    rng = np.random.default_rng(4)
    z = Tensor(rng.standard_normal((2, 3, 4)))
    w = leaf(rng, 5, 4)
    with Tape() as tape:
        loss = ad.mode3_product(z, w).sum()
    tape.backward(loss)
    want = np.tile(z.data.sum(axis=(0, 1)), (5, 1))
    np.testing.assert_allclose(w.grad, want, rtol=1e-12)


def test_backward_disconnected_leaf_and_double_backward():
    rng = np.random.default_rng(6)
    w = leaf(rng, 2)
    other = leaf(rng, 2)
    with Tape() as tape:
        loss = w.sum()
    tape.backward(loss)
    assert other.grad is None  # documented: zero gradient for off-path leaves
    with pytest.raises(TapeUsageError):
        tape.backward(loss)


def test_backward_requires_scalar_and_connection():
    rng = np.random.default_rng(8)
    w = leaf(rng, 2, 2)
    with Tape() as tape:
        out = ad.mul(w, 2.0)
    with pytest.raises(InvalidShapeError):
        tape.backward(out)
    with Tape() as tape2:
        pass
    with pytest.raises(TapeUsageError):
        tape2.backward(Tensor(0.0))


# -- gradient fidelity (finite differences) ------------------------------------


def op_cases():
    rng = np.random.default_rng(42)

    def two(shape_a, shape_b, fn):
        a = leaf(rng, *shape_a)
        b = leaf(rng, *shape_b)
        return [a, b], lambda: fn(a, b).sum()

    def one(shape, fn):
        a = leaf(rng, *shape)
        return [a], lambda: fn(a).sum()

    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)
    spd_raw = rng.standard_normal((3, 3))
    spd = Tensor(spd_raw @ spd_raw.T + 3.0 * np.eye(3), requires_grad=True)
    rhs = leaf(rng, 3, 2)

    return [
        ("add", *two((2, 3), (2, 3), ad.add)),
        ("add_broadcast", *two((2, 3), (3,), ad.add)),
        ("sub", *two((2, 3), (2, 3), ad.sub)),
        ("mul", *two((2, 3), (2, 3), ad.mul)),
        ("mul_broadcast", *two((2, 1, 3), (3,), ad.mul)),
        ("div", *two((2, 3), (2, 3), lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)))),
        ("neg", *one((2, 3), ad.neg)),
        ("exp", *one((2, 3), ad.exp)),
        ("log", [pos], lambda: ad.log(pos).sum()),
        ("sqrt", [pos], lambda: ad.sqrt(pos).sum()),
        ("relu", *one((3, 3), ad.relu)),
        ("sum_axis", *one((2, 3, 4), lambda a: a.sum(axis=1))),
        ("sum_keepdims", *one((2, 3), lambda a: a.sum(axis=-1, keepdims=True))),
        ("mean_axis", *one((2, 3, 4), lambda a: a.mean(axis=-1, keepdims=True))),
        ("reshape", *one((2, 3, 2), lambda a: a.reshape(3, 4))),
        ("index", *one((4, 3, 2), lambda a: a[1:3, :2, :])),
        ("concat", *two((2, 2, 2), (2, 3, 2), lambda a, b: ad.concat([a, b], axis=1))),
        ("transpose2d", *one((3, 4), ad.transpose2d)),
        ("transpose12", *one((2, 3, 4), ad.transpose12)),
        ("matmul", *two((3, 4), (4, 2), ad.matmul)),
        ("mode3_product", *two((2, 3, 4), (3, 4), ad.mode3_product)),
        ("mode1_product", *two((3, 2, 2), (3, 3), ad.mode1_product)),
        ("matricize_mode1", *one((3, 2, 2), ad.matricize_mode1)),
        ("softmax_rows", *one((4, 4), ad.softmax_rows)),
        ("clamp_min", *one((3, 3), lambda a: ad.clamp_min(a, 0.1))),
        (
            "layer_norm",
            *(lambda z, g, b: ([z, g, b], lambda: ad.layer_norm(z, g, b).sum()))(
                leaf(rng, 2, 3, 4),
                Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True),
                leaf(rng, 4),
            ),
        ),
        ("solve_spd", [spd, rhs], lambda: ad.mul(ad.solve_spd(spd, rhs),
                                                 ad.solve_spd(spd, rhs)).sum()),
    ]


@pytest.mark.parametrize("name,leaves,build", op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_gradients_match_finite_differences(name, leaves, build):
    worst = check_gradients(build, leaves, step=1e-5, rtol=1e-4, atol=1e-7)
    assert worst <= 1.0


def test_solve_spd_requires_factorizable_matrix():
    bad = Tensor(np.array([[1.0, 0.0], [0.0, -2.0]]))
    with pytest.raises(NumericalFailureError):
        ad.solve_spd(bad, Tensor(np.ones((2, 1))))


def test_solve_spd_matches_dense_solve():
    rng = np.random.default_rng(12)
    raw = rng.standard_normal((4, 4))
    a = raw @ raw.T + 4.0 * np.eye(4)
    b = rng.standard_normal((4, 2))
    got = ad.solve_spd(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, np.linalg.solve(a, b), atol=1e-10)


# -- determinism and finiteness -------------------------------------------------


def test_forward_and_gradients_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(77)
        z = leaf(rng, 3, 3, 2)
        w = leaf(rng, 4, 2)
        with Tape() as tape:
            out = ad.mode3_product(z, w)
            loss = ad.softmax_rows(ad.matmul(ad.matricize_mode1(out),
                                             ad.transpose2d(ad.matricize_mode1(out)))).sum()
        tape.backward(loss)
        return out.data.copy(), z.grad.copy(), w.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_non_finite_results_are_rejected_and_name_the_op():
    big = Tensor(np.array([[1e308]]))
    with pytest.raises(InvalidValueError, match="mul"):
        ad.mul(big, big)
    with finite_checks(False), np.errstate(over="ignore"):
        out = ad.mul(big, big)  # overflow allowed when checks are off
        assert np.isinf(out.data).any()
