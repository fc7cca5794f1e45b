import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadewarp.errors import GradientError, ShapeMismatchError
from cascadewarp.gradcheck import gradcheck
from cascadewarp.optim import Adam
from cascadewarp.tensor import (
    Tensor,
    avg_downsample2,
    concat_channels,
    conv3d,
    leaky_relu,
    tensor_sum,
)
from oracles import adam_scalar_naive, block_mean_naive, conv3d_naive


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestConv3d:
    def test_zero_input_gives_bias(self, rng):
        x = Tensor(np.zeros((2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5]))
        out = conv3d(x, w, b)
        for c in range(3):
            assert np.allclose(out.data[c], b.data[c])

    def test_stride2_halves_spatial_dims(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        w = Tensor(rng.standard_normal((2, 1, 3, 3, 3)))
        out = conv3d(x, w, Tensor(np.zeros(2)), stride=2)
        assert out.shape == (2, 2, 2, 2)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_loop_oracle(self, rng, stride):
        x = rng.standard_normal((2, 5, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
        ref = conv3d_naive(x, w, b, stride=stride)
        assert np.allclose(out.data, ref, rtol=1e-5, atol=1e-8)

    def test_identity_kernel_reproduces_input(self, rng):
        x = rng.standard_normal((1, 4, 5, 6))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        assert np.array_equal(out.data, x)

    def test_channel_mismatch_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4)))
        w = Tensor(rng.standard_normal((3, 4, 3, 3, 3)))
        with pytest.raises(ShapeMismatchError):
            conv3d(x, w, Tensor(np.zeros(3)))

    def test_bad_stride_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeMismatchError):
            conv3d(x, w, Tensor(np.zeros(1)), stride=3)

    def test_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        err = gradcheck(lambda ts: conv3d(ts[0], ts[1], ts[2]), [x, w, b], eps=1e-3)
        assert err < 1e-5


class TestLeakyRelu:
    def test_definition(self):
        out = leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])), 0.1)
        assert np.allclose(out.data, [-0.2, 0.0, 3.0])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
    @settings(max_examples=30, deadline=None)
    def test_slope_one_is_identity(self, values):
        x = np.array(values)
        assert np.array_equal(leaky_relu(Tensor(x), 1.0).data, x)

    @given(st.floats(-5, 5), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_piecewise_definition(self, v, slope):
        out = float(leaky_relu(Tensor(np.array([v])), slope).data[0])
        assert out == (v if v >= 0 else slope * v)

    def test_gradient_away_from_kink(self, rng):
        x = rng.standard_normal((3, 3, 3))
        x = np.where(np.abs(x) < 0.2, np.sign(x) * 0.2 + x, x)
        err = gradcheck(
            lambda ts: leaky_relu(ts[0], 0.1),
            [Tensor(x, requires_grad=True)],
            eps=1e-4,
        )
        assert err < 1e-6


class TestAvgDownsample2:
    def test_constant_volume(self):
        x = Tensor(np.full((1, 4, 4, 4), 2.5))
        assert np.allclose(avg_downsample2(x).data, 2.5)

    def test_single_block_mean(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
        out = avg_downsample2(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 3.5

    def test_matches_block_mean_oracle(self, rng):
        x = rng.standard_normal((1, 4, 4, 4))
        assert np.allclose(avg_downsample2(Tensor(x)).data, block_mean_naive(x))

    def test_odd_dims_rejected(self, rng):
        with pytest.raises(ShapeMismatchError):
            avg_downsample2(Tensor(rng.standard_normal((1, 3, 4, 4))))


class TestConcat:
    def test_channel_counts_sum(self, rng):
        parts = [Tensor(rng.standard_normal((c, 3, 3, 3))) for c in (3, 27, 3, 3)]
        assert concat_channels(parts).shape == (36, 3, 3, 3)

    def test_single_input_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 3, 3)))
        assert np.array_equal(concat_channels([x]).data, x.data)

    def test_slices_preserved(self):
        a = Tensor(np.full((1, 2, 2, 2), 1.0))
        b = Tensor(np.full((1, 2, 2, 2), 2.0))
        out = concat_channels([a, b])
        assert np.allclose(out.data[0], 1.0) and np.allclose(out.data[1], 2.0)

    def test_spatial_mismatch_rejected(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 2, 2)))
        b = Tensor(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ShapeMismatchError):
            concat_channels([a, b])

    def test_gradient_routes_to_each_input(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2, 2, 2)), requires_grad=True)
        tensor_sum(concat_channels([a, b])).backward()
        assert np.allclose(a.grad, 1.0) and np.allclose(b.grad, 1.0)


class TestBackward:
    def test_sum_of_linear_chain_gives_unit_grads(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True)
        y = avg_downsample2(concat_channels([x]) * 2.0 + 0.0)
        tensor_sum(y * 4.0).backward()
        assert np.allclose(x.grad, 1.0)

    def test_backward_is_deterministic(self, rng):
        grads = []
        for _ in range(2):
            r = np.random.default_rng(7)
            x = Tensor(r.standard_normal((2, 4, 4, 4)), requires_grad=True)
            w = Tensor(r.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
            out = conv3d(x, w, Tensor(np.zeros(2)))
            tensor_sum(leaky_relu(out, 0.1)).backward()
            grads.append((x.grad.copy(), w.grad.copy()))
        assert np.array_equal(grads[0][0], grads[1][0])
        assert np.array_equal(grads[0][1], grads[1][1])

    def test_non_scalar_backward_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(GradientError):
            (x * 2.0).backward()


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self, rng):
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        before = p.data.copy()
        p.grad = np.zeros(5)
        Adam({"p": p}, lr=0.1).step()
        assert np.array_equal(p.data, before)

    def test_constant_gradient_matches_scalar_oracle(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.05)
        ref = adam_scalar_naive(1.0, 0.3, 0.05, steps=10)
        for t in range(10):
            p.grad = np.array([0.3])
            opt.step()
            assert abs(float(p.data[0]) - ref[t]) < 1e-12

    def test_quadratic_convergence(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(500):
            p.grad = 2.0 * (p.data - 3.0)
            opt.step()
        assert abs(float(p.data[0]) - 3.0) < 1e-2

    def test_missing_grad_names_parameter(self, rng):
        p = Tensor(rng.standard_normal(3), requires_grad=True)
        opt = Adam({"weights.level2": p})
        with pytest.raises(GradientError, match="weights.level2"):
            opt.step()

    def test_grads_cleared_after_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([1.0])
        opt.step()
        assert p.grad is None
        assert opt.step_count == 1


class TestGradcheck:
    def test_linear_op_near_machine_epsilon(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        err = gradcheck(lambda ts: ts[0] * 2.0, [x], eps=1e-6)
        assert err < 1e-9

    def test_rejects_nonpositive_perturbation(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(GradientError):
            gradcheck(lambda ts: ts[0] * 2.0, [x], eps=0.0)

    def test_rejects_nonfinite_forward(self):
        x = Tensor(np.array([np.inf]), requires_grad=True)
        with pytest.raises(GradientError):
            gradcheck(lambda ts: ts[0] * 2.0, [x])
