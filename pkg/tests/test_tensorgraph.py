import numpy as np
import pytest

from qfpn import qsim
from qfpn import tensorgraph as tg
from qfpn.tensorgraph import Parameter, ShapeError

from oracles import central_diff, dense_expectations


def gradcheck(fn, *arrays, seed=0, rtol=1e-4, atol=1e-8):
    """Compare reverse-mode gradients of sum(fn(...) * R) against central differences."""
    rng = np.random.default_rng(seed)
    leaves = [tg.leaf(a.copy()) for a in arrays]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)
    tg.backward(tg.total(tg.mul(out, tg.constant(weights))))
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [tg.constant(x) for x in arrays]
            args[i] = tg.constant(v)
            return float(np.sum(fn(*args).values * weights))

        np.testing.assert_allclose(leaves[i].grad, central_diff(f, a), rtol=rtol, atol=atol,
                                   err_msg=f"input {i} of {out.op_tag}")


R = np.random.default_rng(42)


class TestPrimitives:
    def test_conv_identity_kernel(self):
        x = R.normal(size=(2, 1, 5, 5))
        out = tg.conv2d(tg.constant(x), tg.constant(np.ones((1, 1, 1, 1))), tg.constant(np.zeros(1)))
        np.testing.assert_array_equal(out.values, x)

    def test_conv_ones_kernel(self):
        x = np.full((1, 1, 5, 5), 0.7)
        out = tg.conv2d(tg.constant(x), tg.constant(np.ones((1, 1, 3, 3))))
        np.testing.assert_allclose(out.values, 9 * 0.7, rtol=1e-15)

    def test_conv_non_integral(self):
        with pytest.raises(ShapeError):
            tg.conv2d(tg.constant(np.zeros((1, 1, 6, 6))), tg.constant(np.zeros((1, 1, 3, 3))), stride=2, padding=1)

    @pytest.mark.parametrize("stride,padding,size", [(1, 1, 5), (1, 0, 5), (2, 0, 7), (2, 1, 5)])
    def test_conv_gradients(self, stride, padding, size):
        x = R.normal(size=(2, 3, size, size))
        w = R.normal(size=(4, 3, 3, 3))
        b = R.normal(size=4)
        gradcheck(lambda x, w, b: tg.conv2d(x, w, b, stride, padding), x, w, b)

    def test_gap_constant(self):
        out = tg.global_avg_pool(tg.constant(np.full((2, 3, 4, 4), 2.5)))
        np.testing.assert_allclose(out.values, 2.5)

    def test_tanh_sigmoid_at_zero(self):
        z = tg.constant(np.zeros(3))
        assert np.all(tg.tanh(z).values == 0.0)
        assert np.all(tg.sigmoid(z).values == 0.5)

    def test_sigmoid_extremes_finite(self):
        y = tg.sigmoid(tg.constant(np.array([-800.0, 800.0]))).values
        assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0

    @pytest.mark.parametrize(
        "name,fn,shapes",
        [
            ("linear", lambda x, w, b: tg.linear(x, w, b), [(3, 5), (4, 5), (4,)]),
            ("gap", tg.global_avg_pool, [(2, 3, 2, 4)]),
            ("upsample", tg.upsample_nearest2x, [(1, 2, 2, 2)]),
            ("concat", lambda a, b: tg.concat([a, b], axis=1), [(2, 2, 2), (2, 3, 2)]),
            ("add", tg.add, [(2, 4), (2, 4)]),
            ("add_broadcast", tg.add, [(3, 4), (4,)]),
            ("mul", tg.mul, [(2, 4), (2, 4)]),
            ("mul_broadcast", tg.mul, [(3, 4), (4,)]),
            ("scalar_mul", lambda a: tg.scalar_mul(a, -1.7), [(5,)]),
            ("add_scalar", lambda a: tg.add_scalar(a, 0.3), [(5,)]),
            ("tanh", tg.tanh, [(6,)]),
            ("sigmoid", tg.sigmoid, [(6,)]),
            ("relu", tg.relu, [(8,)]),
            ("maxpool", tg.maxpool2x, [(1, 2, 4, 4)]),
            ("broadcast", lambda v: tg.broadcast_channelwise(v, 2, 3), [(2, 3)]),
            ("hflip", tg.hflip, [(1, 1, 2, 3)]),
        ],
    )
    def test_primitive_gradients(self, name, fn, shapes):
        arrays = [R.normal(size=s) for s in shapes]
        gradcheck(fn, *arrays)

    def test_shape_errors_name_operands(self):
        a, b = tg.constant(np.zeros((2, 3))), tg.constant(np.zeros((3, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            tg.add(a, b)
        with pytest.raises(ShapeError):
            tg.linear(a, tg.constant(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            tg.concat([tg.constant(np.zeros((2, 2, 2))), tg.constant(np.zeros((3, 2, 2)))], axis=1)


class TestBackward:
    def test_identity_loss(self):
        x = tg.leaf(np.array(3.0))
        tg.backward(x)
        assert x.grad == 1.0

    def test_bilinear(self):
        a, b = tg.leaf(R.normal(size=4)), tg.leaf(R.normal(size=4))
        tg.backward(tg.total(tg.mul(a, b)))
        np.testing.assert_array_equal(a.grad, b.values)
        np.testing.assert_array_equal(b.grad, a.values)

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            tg.backward(tg.leaf(np.zeros(3)))

    def test_fan_out_accumulates(self):
        x = tg.leaf(R.normal(size=5))
        y = tg.add(tg.tanh(x), tg.scalar_mul(x, 3.0))
        tg.backward(tg.total(y))
        np.testing.assert_allclose(x.grad, 1 - np.tanh(x.values) ** 2 + 3.0, rtol=1e-14)

    def test_no_grad_leaves(self):
        c = tg.constant(R.normal(size=3))
        x = tg.leaf(R.normal(size=3))
        tg.backward(tg.total(tg.mul(c, x)))
        assert c.grad is None

    def test_composite_chain(self):
        from qfpn.losses import bce_with_logits

        img = R.normal(size=(2, 2, 4, 4))
        target = (R.random((2, 1, 2, 2)) > 0.5).astype(float)

        def chain(w, lw, lb):
            h = tg.global_avg_pool(tg.conv2d(tg.constant(img), w, padding=1))
            z = tg.linear(h, lw, lb)
            return bce_with_logits(tg.broadcast_channelwise(z, 2, 2), target)

        arrays = [R.normal(size=(3, 2, 3, 3)), R.normal(size=(1, 3)), R.normal(size=1)]
        leaves = [tg.leaf(a.copy()) for a in arrays]
        tg.backward(chain(*leaves))
        for i, a in enumerate(arrays):
            def f(v, i=i):
                args = [tg.constant(x) for x in arrays]
                args[i] = tg.constant(v)
                return float(chain(*args).values)

            np.testing.assert_allclose(leaves[i].grad, central_diff(f, a), rtol=1e-4, atol=1e-9)


class TestQuantumNode:
    def circuit(self, angles):
        return Parameter.create("c", angles, group="quantum")

    def test_identity_rows(self):
        out = tg.quantum_node(tg.constant(np.zeros((3, 4))), self.circuit(np.zeros((2, 4, 3))))
        np.testing.assert_array_equal(out.values, np.ones((3, 4)))

    def test_identical_rows(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=4)
        out = tg.quantum_node(tg.constant(np.tile(row, (5, 1))), self.circuit(rng.normal(size=(2, 4, 3))))
        assert all(np.array_equal(out.values[0], r) for r in out.values)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        x, angles = rng.normal(size=(3, 4)), rng.normal(size=(2, 4, 3))
        out = tg.quantum_node(tg.constant(x), self.circuit(angles))
        for row, res in zip(x, out.values):
            np.testing.assert_allclose(res, dense_expectations(row, angles), atol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tg.quantum_node(tg.constant(np.zeros((2, 3))), self.circuit(np.zeros((2, 4, 3))))

    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(3)
        x0, a0 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4, 3))
        weights = rng.normal(size=(2, 4))
        x, circ = tg.leaf(x0.copy()), self.circuit(a0.copy())
        tg.backward(tg.total(tg.mul(tg.quantum_node(tg.tanh(x), circ), tg.constant(weights))))

        def fx(v):
            return float(np.sum(qsim.run_circuit_batch(np.tanh(v), qsim.CircuitParams(4, 2, a0)) * weights))

        def fa(a):
            return float(np.sum(qsim.run_circuit_batch(np.tanh(x0), qsim.CircuitParams(4, 2, a)) * weights))

        np.testing.assert_allclose(x.grad, central_diff(fx, x0), atol=1e-5)
        np.testing.assert_allclose(circ.grad, central_diff(fa, a0), atol=1e-5)
