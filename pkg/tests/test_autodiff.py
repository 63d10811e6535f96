"""Autodiff engine: forward values, adjoint rules against finite
differences, and the engine-level invariants (linearity, determinism,
single-deposit backward)."""

import numpy as np
import pytest

from paul import autodiff as ad
from paul import gradcheck


def test_matmul_identity():
    s = np.arange(12.0).reshape(3, 4)
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(s))
    np.testing.assert_array_equal(out.value, s)


def test_matmul_annihilation():
    out = ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.ones((3, 5))))
    np.testing.assert_array_equal(out.value, np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeMismatch) as exc:
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 4))
    err = gradcheck.check_scalar_graph(lambda x, y: ad.total(ad.matmul(x, y)), [a, b])
    assert err <= 1e-5


def test_add_zero_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = ad.add(ad.constant(x), ad.constant(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.value, x)


def test_scale_by_one_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.scale(ad.constant(x), 1.0).value, x)


def test_elementwise_dispatch_and_activation_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] += 0.1  # keep away from the activation kink
    err = gradcheck.check_scalar_graph(
        lambda a: ad.total(ad.elementwise("leaky-activation", a)), [x]
    )
    assert err <= 1e-5
    with pytest.raises(ad.AutodiffError):
        ad.elementwise("nope", ad.constant(x))


def test_frobenius_norm_identity_matrix():
    out = ad.frobenius_norm(ad.constant(np.eye(3)))
    assert out.value[0, 0] == pytest.approx(np.sqrt(3.0), abs=1e-15)


def test_frobenius_norm_zero_matrix_has_zero_gradient():
    a = ad.leaf(np.zeros((2, 2)))
    out = ad.frobenius_norm(a)
    assert out.value[0, 0] == 0.0
    ad.backward(out)
    np.testing.assert_array_equal(a.grad, np.zeros((2, 2)))


def test_frobenius_norm_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    err = gradcheck.check_scalar_graph(
        lambda a: ad.frobenius_norm(a), [rng.normal(size=(5, 7))]
    )
    assert err <= 1e-5


def test_inverse3_identity_and_diagonal():
    np.testing.assert_allclose(
        ad.inverse3(ad.constant(np.eye(3))).value, np.eye(3), atol=1e-9
    )
    out = ad.inverse3(ad.constant(np.diag([2.0, 4.0, 5.0])))
    np.testing.assert_allclose(out.value, np.diag([0.5, 0.25, 0.2]), atol=1e-9)


def test_inverse3_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(3, 3))
    spd = m @ m.T + 2.0 * np.eye(3)
    probe = ad.constant(rng.normal(size=(3, 3)))
    err = gradcheck.check_scalar_graph(
        lambda a: ad.total(ad.mul(ad.inverse3(a), probe)), [spd]
    )
    assert err <= 1e-5


def test_inverse3_rejects_degenerate_matrix():
    with pytest.raises(ad.DegenerateNormalMatrix) as exc:
        ad.inverse3(ad.constant(np.zeros((3, 3))), frame_index=7)
    assert exc.value.frame_index == 7
    assert "degenerate normal matrix" in str(exc.value)


def test_svd_small_orthonormal_input():
    a = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    u, s, v = ad.svd_small(ad.constant(a))
    np.testing.assert_allclose(s.value, [[1.0, 1.0]], atol=1e-14)
    np.testing.assert_allclose(u.value @ v.value.T, a, atol=1e-14)


def test_svd_small_scaling():
    a = 3.0 * np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    u, s, v = ad.svd_small(ad.constant(a))
    np.testing.assert_allclose(s.value, [[3.0, 3.0]], atol=1e-14)
    np.testing.assert_allclose(u.value @ v.value.T, a / 3.0, atol=1e-14)


def test_svd_small_reconstruction_and_gradient():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(10):
        while True:
            a = rng.normal(size=(2, 3))
            s = np.linalg.svd(a, compute_uv=False)
            if s[-1] > 0.1 and np.abs(np.diff(s)).min() > 0.1:
                break
        u, sig, v = ad.svd_small(ad.constant(a))
        recon = u.value @ np.diag(sig.value[0]) @ v.value.T
        assert np.abs(recon - a).max() <= 1e-12

        pu = ad.constant(rng.normal(size=(2, 2)))
        ps = ad.constant(rng.normal(size=(1, 2)))
        pv = ad.constant(rng.normal(size=(3, 2)))

        def build(x):
            uu, ss, vv = ad.svd_small(x)
            return ad.add(
                ad.add(ad.total(ad.mul(pu, uu)), ad.total(ad.mul(ps, ss))),
                ad.total(ad.mul(pv, vv)),
            )

        worst = max(worst, gradcheck.check_scalar_graph(build, [a]))
    assert worst <= 1e-4


def test_backward_of_sum_is_all_ones():
    x = ad.leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.total(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_unreferenced_leaf_gets_zeros():
    x = ad.leaf(np.ones((2, 2)))
    y = ad.leaf(np.ones((2, 2)))
    ad.backward(ad.total(ad.square(x)))
    assert y.grad is None
    np.testing.assert_array_equal(ad.grad_of(y), np.zeros((2, 2)))


def test_backward_rejects_non_scalar_loss():
    with pytest.raises(ad.NonScalarLoss):
        ad.backward(ad.constant(np.ones((2, 2))))


def test_backward_accumulates_once_per_use():
    # loss = sum(x) + sum(x) must give gradient 2, not 1 or 4
    x = ad.leaf(np.ones((2, 2)))
    ad.backward(ad.add(ad.total(x), ad.total(x)))
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones((2, 2)))


def test_backward_linearity():
    rng = np.random.default_rng(17)
    x = ad.leaf(rng.normal(size=(3, 3)))

    def build_losses(node):
        l1 = ad.frobenius_norm(ad.sub(node, ad.constant(np.ones((3, 3)))))
        l2 = ad.total(ad.square(node))
        return l1, l2

    l1, l2 = build_losses(x)
    ad.backward(ad.add(l1, l2))
    combined = x.grad.copy()

    l1, l2 = build_losses(x)
    ad.backward(l1)
    g1 = x.grad.copy()
    l1, l2 = build_losses(x)
    ad.backward(l2)
    g2 = x.grad.copy()
    np.testing.assert_allclose(combined, g1 + g2, rtol=1e-12, atol=1e-14)


def test_stop_gradient_passthrough_and_blocked_adjoint():
    x = ad.leaf(np.arange(4.0).reshape(2, 2))
    stopped = ad.stop_gradient(x)
    np.testing.assert_array_equal(stopped.value, x.value)
    loss = ad.add(ad.total(ad.square(x)), ad.total(stopped))
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * x.value)  # only the live path


def test_graph_evaluation_is_deterministic():
    def run():
        rng = np.random.default_rng(23)
        x = ad.leaf(rng.normal(size=(3, 4)))
        y = ad.leaf(rng.normal(size=(4, 2)))
        loss = ad.frobenius_norm(ad.leaky(ad.matmul(x, y)))
        ad.backward(loss)
        return loss.value.copy(), x.grad.copy(), y.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_checked_mode_rejects_non_finite():
    ad.set_checked(True)
    try:
        with pytest.raises(ad.NonFiniteValue):
            ad.constant(np.array([[np.nan, 1.0]]))
    finally:
        ad.set_checked(False)


def test_constant_rejects_wrong_rank():
    with pytest.raises(ad.ShapeMismatch):
        ad.constant(np.zeros((2, 2, 2)))


def test_elementary_op_suite_over_seeds():
    worst = gradcheck.run_op_suite(seeds=25)
    assert max(worst.values()) <= 1e-5, worst
