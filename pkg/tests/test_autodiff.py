import numpy as np
import pytest

from pentopt import autodiff as ad

from conftest import numeric_grad, rel_err


def check_grads(build, tensors, h=1e-6, tol=1e-5):
    """Compare backpropagated gradients of the scalar build() against FD."""
    for t in tensors:
        t.zero_grad()
    out = build()
    out.backward()
    expected = numeric_grad(lambda: float(build().data), [t.data for t in tensors], h)
    for t, exp in zip(tensors, expected):
        assert t.grad is not None, t
        assert np.max(rel_err(t.grad, exp, floor=1e-6)) < tol, t


def T(data):
    return ad.Tensor(np.asarray(data, dtype=float), requires_grad=True)


class TestElementwiseOps:
    def test_add_broadcast(self, rng):
        a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4,)))
        check_grads(lambda: (a + b).sum(), [a, b])

    def test_add_scalar(self, rng):
        a = T(rng.normal(size=5))
        check_grads(lambda: (a + 2.5).sum(), [a])

    def test_mul(self, rng):
        a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(3, 1)))
        check_grads(lambda: (a * b).sum(), [a, b])

    def test_sub_rsub_neg(self, rng):
        a = T(rng.normal(size=4))
        check_grads(lambda: (3.0 - a).sum(), [a])
        check_grads(lambda: (a - 1.0).sum(), [a])
        check_grads(lambda: (-a).sum(), [a])

    def test_div(self, rng):
        a = T(rng.uniform(1.0, 2.0, size=4))
        b = T(rng.uniform(1.0, 2.0, size=4))
        check_grads(lambda: (a / b).sum(), [a, b])
        check_grads(lambda: (a / 3.0).sum(), [a])

    def test_pow(self, rng):
        a = T(rng.uniform(0.5, 2.0, size=6))
        check_grads(lambda: (a ** 3.0).sum(), [a])
        check_grads(lambda: (a ** -1.5).sum(), [a])

    def test_pow_tensor_exponent_rejected(self):
        with pytest.raises(TypeError):
            T([1.0]) ** T([2.0])

    def test_exp(self, rng):
        a = T(rng.normal(size=5))
        check_grads(lambda: a.exp().sum(), [a])

    def test_log(self, rng):
        a = T(rng.uniform(0.2, 3.0, size=5))
        check_grads(lambda: a.log().sum(), [a])
        assert np.allclose(a.log().data, np.log(a.data))

    def test_sigmoid_with_mean_hits_target_and_grad(self, rng):
        p = T(rng.normal(size=(3, 12)))
        target = np.array([0.25, 0.5, 0.75])
        out = ad.sigmoid_with_mean(p, target)
        assert np.abs(out.data.mean(axis=1) - target).max() < 1e-12
        w = rng.normal(size=(3, 12))
        check_grads(lambda: (ad.sigmoid_with_mean(p, target) * T(w)).sum(), [p])

    def test_sigmoid_with_mean_shift_invariance(self, rng):
        # adding a constant to every pre-activation must not change the output
        p = rng.normal(size=(2, 8))
        target = np.array([0.4, 0.6])
        a = ad.sigmoid_with_mean(T(p), target).data
        b = ad.sigmoid_with_mean(T(p + 7.5), target).data
        assert np.allclose(a, b, atol=1e-9)

    def test_sigmoid(self, rng):
        a = T(rng.normal(size=5))
        check_grads(lambda: a.sigmoid().sum(), [a])
        assert np.all(a.sigmoid().data > 0) and np.all(a.sigmoid().data < 1)

    def test_abs_away_from_kink(self, rng):
        a = T(np.array([-2.0, -0.5, 0.5, 3.0]))
        check_grads(lambda: a.abs().sum(), [a])

    def test_clamp_grad_zero_outside(self):
        a = T(np.array([-1.0, 0.3, 0.7, 2.0]))
        a.clamp(0.0, 1.0).sum().backward()
        assert a.grad.tolist() == [0.0, 1.0, 1.0, 0.0]


class TestLinearAndShapeOps:
    def test_matmul(self, rng):
        a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
        check_grads(lambda: (a @ b).sum(), [a, b])

    def test_reshape_transpose(self, rng):
        a = T(rng.normal(size=(2, 6)))
        w = T(rng.normal(size=(3, 4)))
        check_grads(
            lambda: (a.reshape(4, 3) @ w).transpose((1, 0)).sum(), [a, w])

    def test_sum_axis_variants(self, rng):
        a = T(rng.normal(size=(2, 3, 4)))
        check_grads(lambda: (a.sum(axis=1) ** 2.0).sum(), [a])
        check_grads(lambda: (a.sum(axis=(1, 2)) ** 2.0).sum(), [a])

    def test_mean_matches_sum(self, rng):
        a = T(rng.normal(size=(3, 4)))
        m = a.mean(axis=1)
        assert np.allclose(m.data, a.data.mean(axis=1))
        check_grads(lambda: (a.mean(axis=1) ** 2.0).sum(), [a])

    def test_astype_passthrough(self, rng):
        a = T(rng.normal(size=4))
        out = a.astype(np.float32).sum()
        out.backward()
        assert a.grad.dtype == np.float64
        assert np.allclose(a.grad, 1.0)


class TestDtypeDiscipline:
    def test_scalar_ops_preserve_float32(self):
        a = ad.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        out = ((a * 2.0 + 1.0) - 0.5) / 4.0
        assert out.dtype == np.float32
        out.sum().backward()
        assert a.grad.dtype == np.float32

    def test_mean_preserves_float32(self):
        a = ad.Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        assert a.mean(axis=1).dtype == np.float32


class TestGraphMechanics:
    def test_reuse_accumulates(self):
        x = T(np.array([2.0]))
        y = x * x + x  # dy/dx = 2x + 1 = 5
        y.sum().backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_backward_requires_scalar(self):
        x = T(np.ones(3))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_backward_without_graph_rejected(self):
        with pytest.raises(RuntimeError):
            ad.Tensor(np.array(1.0)).backward()

    def test_no_grad_tracking_when_not_required(self):
        a = ad.Tensor(np.ones(3))
        out = a * 2.0 + 1.0
        assert not out.requires_grad
        assert out._parents == ()

    def test_zero_grad(self):
        x = T(np.array([1.0]))
        (x * 2.0).sum().backward()
        assert x.grad is not None
        x.zero_grad()
        assert x.grad is None

    def test_custom_node_vjp(self, rng):
        x = T(rng.normal(size=4))
        jac = rng.normal(size=(1, 4))

        def build():
            val = jac @ x.data.reshape(4, 1)
            return ad.custom_node([x], val.ravel(), lambda g: [g * jac.ravel()]).sum()

        check_grads(build, [x])

    def test_unbroadcast(self):
        g = np.ones((2, 3, 4))
        assert ad._unbroadcast(g, (3, 4)).tolist() == (2 * np.ones((3, 4))).tolist()
        assert ad._unbroadcast(g, (1, 4)).shape == (1, 4)
        assert np.all(ad._unbroadcast(g, (1, 4)) == 6.0)


class TestNNOps:
    def test_prelu_positive_negative(self, rng):
        x = T(np.array([-2.0, -0.5, 0.5, 3.0]))
        alpha = T(np.array(0.25))
        check_grads(lambda: (ad.prelu(x, alpha) ** 2.0).sum(), [x, alpha])

    def test_prelu_values(self):
        x = T(np.array([-2.0, 3.0]))
        alpha = T(np.array(0.1))
        out = ad.prelu(x, alpha)
        assert np.allclose(out.data, [-0.2, 3.0])

    def test_prelu_numpy_path(self):
        out = ad.prelu(np.array([-2.0, 3.0]), 0.1)
        assert np.allclose(out, [-0.2, 3.0])

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_conv2d_grads(self, rng, padding):
        x = T(rng.normal(size=(2, 5, 5, 3)))
        k = T(rng.normal(size=(3, 3, 3, 2)))
        check_grads(lambda: (ad.conv2d(x, k, padding=padding) ** 2.0).sum(),
                    [x, k], tol=1e-4)

    def test_conv2d_identity_kernel(self, rng):
        x = T(rng.normal(size=(1, 4, 4, 1)))
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        out = ad.conv2d(x, ad.Tensor(k), padding="same")
        assert np.allclose(out.data, x.data)

    def test_conv2d_matches_direct_sum(self, rng):
        # independent triple-loop cross-correlation oracle
        x = rng.normal(size=(1, 6, 6, 1))
        k = rng.normal(size=(3, 3, 1, 1))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), padding="valid").data
        for p in range(4):
            for q in range(4):
                ref = sum(
                    x[0, p + i, q + j, 0] * k[i, j, 0, 0]
                    for i in range(3) for j in range(3)
                )
                assert out[0, p, q, 0] == pytest.approx(ref, rel=1e-12)

    def test_conv2d_shape_errors(self, rng):
        with pytest.raises(ValueError, match="channels"):
            ad.conv2d(T(rng.normal(size=(1, 4, 4, 2))),
                      T(rng.normal(size=(3, 3, 1, 1))))
        with pytest.raises(ValueError, match="smaller"):
            ad.conv2d(T(rng.normal(size=(1, 2, 2, 1))),
                      T(rng.normal(size=(3, 3, 1, 1))), padding="valid")

    def test_avg_pool_value_and_grad(self):
        x = T(np.arange(16.0).reshape(1, 4, 4, 1))
        out = ad.avg_pool2d(x, 2)
        assert out.data[0, 0, 0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
        out.sum().backward()
        assert np.all(x.grad == 0.25)

    def test_upsample_inverse_of_pool(self, rng):
        x = T(rng.normal(size=(1, 3, 3, 2)))
        up = ad.upsample_nearest2d(x, 2)
        assert up.data.shape == (1, 6, 6, 2)
        back = ad.avg_pool2d(up, 2)
        assert np.allclose(back.data, x.data)
        check_grads(lambda: (ad.upsample_nearest2d(x, 2) ** 2.0).sum(), [x])


class TestLayers:
    def test_dense_shapes_and_grads(self, rng):
        layer = ad.Dense(4, 3, rng, "fc", dtype="float64")
        x = T(rng.normal(size=(2, 4)))
        check_grads(lambda: (layer(x) ** 2.0).sum(),
                    [x, layer.w, layer.b])

    def test_dense_width_mismatch(self, rng):
        layer = ad.Dense(4, 3, rng, "fc")
        with pytest.raises(ValueError, match="features"):
            layer(T(np.ones((2, 5))))

    def test_resnet_block_grads(self, rng):
        block = ad.ResNetBlock(2, 3, 3, rng, "blk", dtype="float64")
        x = T(rng.normal(size=(1, 4, 4, 2)))
        assert block.project is not None  # channel change needs projection
        check_grads(lambda: (block(x) ** 2.0).sum(),
                    [x] + block.parameters(), tol=1e-4)

    def test_resnet_block_no_projection_same_channels(self, rng):
        assert ad.ResNetBlock(3, 3, 3, rng, "blk").project is None

    def test_glorot_bounds(self, rng):
        w = ad.glorot_uniform(rng, (100, 100), 100, 100, "float32")
        limit = np.sqrt(6.0 / 200)
        assert w.dtype == np.float32
        assert np.all(np.abs(w) <= limit)
        assert np.abs(w.mean()) < 0.01


class TestAdam:
    def test_first_step_closed_form(self):
        p = T(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, -0.25])
        opt = ad.Adam([p], lr=0.1)
        opt.step()
        # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0]) - 0.1 * np.sign([0.5, -0.25])
        assert np.allclose(p.data, expected, atol=1e-6)

    def test_skips_params_without_grad(self):
        p = T(np.array([1.0]))
        opt = ad.Adam([p], lr=0.1)
        opt.step()
        assert p.data[0] == 1.0

    def test_nonfinite_gradient_raises(self):
        p = T(np.array([1.0]))
        p.grad = np.array([np.nan])
        with pytest.raises(ad.TrainingError):
            ad.Adam([p], lr=0.1).step()

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            ad.Adam([T(np.ones(1))], lr=0.0)

    def test_state_dict_split_run_equals_straight_run(self):
        start = np.array([0.3, -1.2, 2.0])

        def grads():
            g_rng = np.random.default_rng(7)
            while True:
                yield g_rng.normal(size=3)

        # straight run: 6 steps
        p1 = T(start.copy())
        opt1 = ad.Adam([p1], lr=0.05)
        gen = grads()
        for _ in range(6):
            p1.grad = next(gen)
            opt1.step()

        # split run: 3 steps, serialize, restore, 3 more
        p2 = T(start.copy())
        opt2 = ad.Adam([p2], lr=0.05)
        gen = grads()
        for _ in range(3):
            p2.grad = next(gen)
            opt2.step()
        state = opt2.state_dict()
        p3 = T(p2.data.copy())
        opt3 = ad.Adam([p3], lr=0.05)
        opt3.load_state_dict(state)
        for _ in range(3):
            p3.grad = next(gen)
            opt3.step()
        assert np.array_equal(p1.data, p3.data)

    def test_state_size_mismatch_rejected(self):
        opt = ad.Adam([T(np.ones(2))], lr=0.1)
        with pytest.raises(ValueError):
            opt.load_state_dict({"t": 1, "m": [], "v": []})
