"""Engine tests: every tape op against central finite differences,
optimizer against a textbook reference, and the graph/teardown rules."""

import numpy as np
import pytest

from _oracles import adam_reference, fd_grad, grads_close
from jamflow import numerics as nm
from jamflow.numerics import (
    NumericError,
    OptimizerState,
    ShapeError,
    Tensor,
    adam_step,
    global_grad_norm,
    zero_grads,
)

RNG = np.random.default_rng(20240811)


def _proj(shape):
    """Fixed random projection weights so the scalar output has a
    nontrivial gradient everywhere."""
    return RNG.normal(size=shape)


def check_op(build, arrays, rtol=1e-5, atol=1e-8):
    """build(*tensors) -> scalar Tensor; verify every input's gradient."""
    with nm.dtype_scope(np.float64):
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*ts)
        assert out.data.size == 1
        out.backward()

        def f(arrs):
            return float(build(*[Tensor(a) for a in arrs]).data)

        for i, t in enumerate(ts):
            assert t.grad is not None, f"input {i} got no gradient"
            fd = fd_grad(f, arrays, i)
            ok, worst = grads_close(t.grad, fd, rtol, atol)
            assert ok, f"input {i}: analytic vs finite-difference off by {worst:.3g}"


def scalarize(t, w):
    return nm.sum_all(nm.mul(t, Tensor(w)))


# -- elementwise / linear -------------------------------------------------------


def test_add_grad():
    w = _proj((3, 4))
    check_op(lambda a, b: scalarize(nm.add(a, b), w),
             [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))])


def test_add_broadcast_grad():
    w = _proj((3, 4))
    check_op(lambda a, b: scalarize(nm.add(a, b), w),
             [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))])


def test_sub_grad():
    w = _proj((2, 5))
    check_op(lambda a, b: scalarize(nm.sub(a, b), w),
             [RNG.normal(size=(2, 5)), RNG.normal(size=(2, 5))])


def test_mul_broadcast_grad():
    w = _proj((2, 3, 4))
    check_op(lambda a, b: scalarize(nm.mul(a, b), w),
             [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(1, 1, 4))])


def test_scale_grad():
    w = _proj((4, 2))
    check_op(lambda a: scalarize(nm.scale(a, -1.7), w), [RNG.normal(size=(4, 2))])


def test_matmul_grad():
    w = _proj((3, 5))
    check_op(lambda a, b: scalarize(nm.matmul(a, b), w),
             [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 5))])


def test_matmul_batched_grad():
    w = _proj((2, 3, 5))
    check_op(lambda a, b: scalarize(nm.matmul(a, b), w),
             [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 5))])


def test_linear_grad_with_bias():
    w = _proj((2, 3, 5))
    check_op(lambda x, wt, b: scalarize(nm.linear(x, wt, b), w),
             [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 5)),
              RNG.normal(size=(5,))])


def test_linear_grad_no_bias():
    w = _proj((3, 5))
    check_op(lambda x, wt: scalarize(nm.linear(x, wt), w),
             [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 5))])


def test_linear_matches_matmul_add():
    with nm.dtype_scope(np.float64):
        x = Tensor(RNG.normal(size=(2, 3, 4)))
        w = Tensor(RNG.normal(size=(4, 5)))
        b = Tensor(RNG.normal(size=(5,)))
        got = nm.linear(x, w, b).data
        want = (nm.matmul(x, w) + b).data
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_transpose_grad():
    w = _proj((4, 2, 3))
    check_op(lambda a: scalarize(nm.transpose(a, (2, 0, 1)), w),
             [RNG.normal(size=(2, 3, 4))])


def test_reshape_grad():
    w = _proj((6, 2))
    check_op(lambda a: scalarize(nm.reshape(a, (6, 2)), w),
             [RNG.normal(size=(3, 4))])


def test_concat_grad():
    w = _proj((3, 7))
    check_op(lambda a, b: scalarize(nm.concat([a, b], axis=1), w),
             [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 3))])


def test_narrow_grad():
    w = _proj((3, 2))
    check_op(lambda a: scalarize(nm.narrow(a, 1, 1, 2), w),
             [RNG.normal(size=(3, 5))])


def test_sum_mean_grad():
    check_op(lambda a: nm.sum_all(a), [RNG.normal(size=(3, 4))])
    check_op(lambda a: nm.mean_all(a), [RNG.normal(size=(3, 4))])


# -- nonlinearities -------------------------------------------------------------


def test_gelu_grad():
    w = _proj((3, 4))
    check_op(lambda a: scalarize(nm.gelu(a), w), [RNG.normal(size=(3, 4)) * 2.0])


def test_silu_grad():
    w = _proj((3, 4))
    check_op(lambda a: scalarize(nm.silu(a), w), [RNG.normal(size=(3, 4)) * 2.0])


def test_softmax_grad():
    w = _proj((2, 3, 5))
    check_op(lambda a: scalarize(nm.softmax_lastdim(a), w),
             [RNG.normal(size=(2, 3, 5))])


def test_softmax_masked_grad():
    mask = np.array([[True, False, True, True, False],
                     [True, True, False, True, True],
                     [False, True, True, False, True]])
    w = _proj((3, 5))
    check_op(lambda a: scalarize(nm.softmax_lastdim(a, mask), w),
             [RNG.normal(size=(3, 5))])


def test_softmax_masked_exact_zero():
    mask = np.array([[True, False, True], [False, True, True]])
    p = nm.softmax_lastdim(Tensor(RNG.normal(size=(2, 3))), mask).data
    assert p[0, 1] == 0.0 and p[1, 0] == 0.0
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-6)


def test_softmax_empty_row_rejected():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(ShapeError):
        nm.softmax_lastdim(Tensor(np.zeros((2, 2))), mask)


def test_layer_norm_grad():
    w = _proj((2, 3, 6))
    check_op(lambda a: scalarize(nm.layer_norm(a), w),
             [RNG.normal(size=(2, 3, 6)) * 1.5])


def test_modulated_norm_grad():
    w = _proj((2, 3, 6))
    check_op(lambda x, s, h: scalarize(nm.modulated_norm(x, s, h), w),
             [RNG.normal(size=(2, 3, 6)), RNG.normal(size=(2, 1, 6)) * 0.3,
              RNG.normal(size=(2, 1, 6))])


def test_modulated_norm_matches_composition():
    with nm.dtype_scope(np.float64):
        x = Tensor(RNG.normal(size=(2, 4, 6)))
        s = Tensor(RNG.normal(size=(2, 1, 6)))
        h = Tensor(RNG.normal(size=(2, 1, 6)))
        got = nm.modulated_norm(x, s, h).data
        want = (nm.layer_norm(x) * (1.0 + s) + h).data
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gated_add_grad():
    w = _proj((2, 3, 4))
    check_op(lambda x, g, a: scalarize(nm.gated_add(x, g, a), w),
             [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 1, 4)),
              RNG.normal(size=(2, 3, 4))])


def test_gated_add_matches_composition():
    with nm.dtype_scope(np.float64):
        x = Tensor(RNG.normal(size=(2, 3, 4)))
        g = Tensor(RNG.normal(size=(2, 1, 4)))
        a = Tensor(RNG.normal(size=(2, 3, 4)))
        np.testing.assert_allclose(nm.gated_add(x, g, a).data,
                                   (x + g * a).data, rtol=1e-12)


def test_rotate_pairs_grad():
    L, H, D = 3, 2, 6
    ang = RNG.uniform(0, 2 * np.pi, size=(L, 1, D // 2))
    cos, sin = np.cos(ang), np.sin(ang)
    w = _proj((L, H, D))
    check_op(lambda x: scalarize(nm.rotate_pairs(x, cos, sin), w),
             [RNG.normal(size=(L, H, D))])


def test_rotate_pairs_matches_composition():
    with nm.dtype_scope(np.float64):
        L, H, D = 4, 2, 8
        ang = RNG.uniform(0, 2 * np.pi, size=(L, 1, D // 2))
        cos, sin = np.cos(ang), np.sin(ang)
        x = Tensor(RNG.normal(size=(L, H, D)))
        xe, xo = x.data[..., 0::2], x.data[..., 1::2]
        want = np.empty_like(x.data)
        want[..., 0::2] = xe * cos - xo * sin
        want[..., 1::2] = xe * sin + xo * cos
        np.testing.assert_allclose(nm.rotate_pairs(x, cos, sin).data, want, rtol=1e-12)


def test_rotate_pairs_preserves_norm():
    with nm.dtype_scope(np.float64):
        L, H, D = 5, 2, 8
        ang = RNG.uniform(0, 2 * np.pi, size=(L, 1, D // 2))
        x = Tensor(RNG.normal(size=(L, H, D)))
        y = nm.rotate_pairs(x, np.cos(ang), np.sin(ang)).data
        np.testing.assert_allclose(
            (y ** 2).sum(axis=-1), (x.data ** 2).sum(axis=-1), rtol=1e-12
        )


def test_embedding_grad():
    ids = np.array([[0, 2, 1], [2, 2, 0]])
    w = _proj((2, 3, 4))
    check_op(lambda t: scalarize(nm.embedding(t, ids), w),
             [RNG.normal(size=(3, 4))])


def test_embedding_rejects_bad_ids():
    t = Tensor(np.zeros((3, 4)), requires_grad=True)
    with pytest.raises(ShapeError):
        nm.embedding(t, np.array([3]))
    with pytest.raises(ShapeError):
        nm.embedding(t, np.array([0.5]))


# -- graph rules ----------------------------------------------------------------


def test_diamond_graph_accumulates_once(f64):
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    c = Tensor(np.array([5.0]), requires_grad=True)
    z = nm.sum_all(nm.mul(a, b) + nm.mul(a, c))
    z.backward()
    np.testing.assert_allclose(a.grad, [8.0])   # b + c
    np.testing.assert_allclose(b.grad, [2.0])
    np.testing.assert_allclose(c.grad, [2.0])


def test_backward_twice_rejected(f64):
    a = Tensor(np.array([1.0]), requires_grad=True)
    z = nm.sum_all(nm.mul(a, a))
    z.backward()
    with pytest.raises(RuntimeError):
        z.backward()


def test_backward_needs_scalar(f64):
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    y = nm.mul(a, a)
    with pytest.raises(ShapeError):
        y.backward()


def test_grad_arrays_not_aliased(f64):
    # A residual pass-through must not hand two leaves the same buffer.
    x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    z = nm.sum_all(nm.add(x, y))
    z.backward()
    assert not np.shares_memory(x.grad, y.grad)
    x.grad += 1.0
    np.testing.assert_allclose(y.grad, np.ones((3, 4)))


def test_no_grad_blocks_tape(f64):
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with nm.no_grad():
        y = nm.mul(a, a)
    assert not y.requires_grad and y._prev == ()


def test_reused_graph_grads_accumulate_per_backward(f64):
    a = Tensor(np.array([3.0]), requires_grad=True)
    nm.sum_all(nm.mul(a, a)).backward()
    first = a.grad.copy()
    nm.sum_all(nm.mul(a, a)).backward()   # new graph, same leaf, no zeroing
    np.testing.assert_allclose(a.grad, 2 * first)


# -- dtype ----------------------------------------------------------------------


def test_default_dtype_is_float32():
    assert Tensor(np.zeros(2)).data.dtype == np.float32


def test_dtype_scope_switches_and_restores():
    with nm.dtype_scope(np.float64):
        assert Tensor(np.zeros(2)).data.dtype == np.float64
    assert Tensor(np.zeros(2)).data.dtype == np.float32


def test_set_default_dtype_rejects_int():
    with pytest.raises(ValueError):
        nm.set_default_dtype(np.int32)


# -- optimizer -------------------------------------------------------------------


def test_adam_matches_reference_scalar():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0], dtype=p.data.dtype)
    st = OptimizerState(lr=0.1)
    adam_step({"p": p}, None, st)
    want, _, _ = adam_reference(1.0, 1.0, 0.0, 0.0, 1, 0.1, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(p.data, [want], rtol=1e-6)


def test_adam_matches_reference_trajectory(f64):
    shape = (3, 4)
    p = Tensor(RNG.normal(size=shape), requires_grad=True)
    p_ref = p.data.copy()
    m_ref = np.zeros(shape)
    v_ref = np.zeros(shape)
    st = OptimizerState(lr=0.01)
    for step in range(1, 6):
        g = RNG.normal(size=shape)
        p.grad = g.copy()
        adam_step({"p": p}, None, st)
        p_ref, m_ref, v_ref = adam_reference(p_ref, g, m_ref, v_ref, step,
                                             0.01, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(p.data, p_ref, rtol=1e-9)
        np.testing.assert_allclose(st.m["p"], m_ref, rtol=1e-9)
        np.testing.assert_allclose(st.v["p"], v_ref, rtol=1e-9)


def test_adam_explicit_and_missing_grads(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    st = OptimizerState(lr=0.1)
    adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": None}, st)
    assert not np.allclose(a.data, 1.0)
    np.testing.assert_allclose(b.data, 1.0)  # zero gradient -> no movement


def test_adam_rejects_nonfinite_grad_by_name(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    st = OptimizerState()
    with pytest.raises(NumericError, match="'b'"):
        adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st)


def test_adam_rejects_shape_mismatch(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    st = OptimizerState()
    with pytest.raises(ShapeError):
        adam_step({"a": a}, {"a": np.ones(3)}, st)


def test_adam_rejects_stale_moments(f64):
    a = Tensor(np.ones(2), requires_grad=True)
    st = OptimizerState()
    st.m["a"] = np.zeros(3)
    st.v["a"] = np.zeros(3)
    with pytest.raises(ShapeError):
        adam_step({"a": a}, {"a": np.ones(2)}, st)


def test_adam_resumes_from_loaded_moments(f64):
    # Continuing from saved moments must equal the uninterrupted run.
    shape = (4,)
    grads = [RNG.normal(size=shape) for _ in range(4)]
    p1 = Tensor(np.ones(shape), requires_grad=True)
    st1 = OptimizerState(lr=0.05)
    for g in grads:
        adam_step({"p": p1}, {"p": g}, st1)

    p2 = Tensor(np.ones(shape), requires_grad=True)
    st2 = OptimizerState(lr=0.05)
    for g in grads[:2]:
        adam_step({"p": p2}, {"p": g}, st2)
    saved_m = np.array(st2.m["p"], copy=True)
    saved_v = np.array(st2.v["p"], copy=True)
    saved_p = p2.data.copy()

    p3 = Tensor(saved_p, requires_grad=True)
    st3 = OptimizerState(lr=0.05)
    st3.m["p"] = saved_m
    st3.v["p"] = saved_v
    st3.step = 2
    for g in grads[2:]:
        adam_step({"p": p3}, {"p": g}, st3)
    np.testing.assert_array_equal(p3.data, p1.data)


def test_grad_norm_and_zeroing(f64):
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 0.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    assert abs(global_grad_norm({"a": a, "b": b}) - 5.0) < 1e-12
    zero_grads({"a": a, "b": b})
    assert a.grad is None and b.grad is None


# -- tensor sugar ----------------------------------------------------------------


def test_item_and_detach(f64):
    t = Tensor(np.array([[2.5]]), requires_grad=True)
    assert t.item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)).item()
    d = t.detach()
    assert not d.requires_grad
    np.testing.assert_array_equal(d.data, t.data)


def test_operator_sugar(f64):
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    z = nm.sum_all((3.0 - (-a) * 2.0) @ Tensor(np.array([[1.0]])))
    z.backward()
    np.testing.assert_allclose(z.data, 7.0)
    np.testing.assert_allclose(a.grad, [[2.0]])


def test_no_grad_is_thread_local():
    # Overlapping no_grad blocks in worker threads must not disturb the
    # main thread's recording state or each other's restores.
    import threading

    barrier = threading.Barrier(4)
    errors = []

    def worker():
        try:
            with nm.no_grad():
                barrier.wait(timeout=10)
                y = nm.add(Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2)))
                assert not y.requires_grad
                barrier.wait(timeout=10)
            z = nm.add(Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2)))
            assert z.requires_grad, "worker lost recording after its own no_grad"
        except Exception as exc:  # pragma: no cover - failure reporting
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors, errors

    x = Tensor(np.ones(3), requires_grad=True)
    out = nm.sum_all(nm.mul(x, x))
    assert out.requires_grad, "main thread lost tape recording"
    out.backward()
    np.testing.assert_allclose(x.grad, 2.0 * np.ones(3))
