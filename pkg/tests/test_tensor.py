"""Tensor-core tests: every op against an independent oracle and the tape
against finite differences."""

import struct

import numpy as np
import pytest

from tldrsum import tensor as tt
from tldrsum.rng import Stream
from tldrsum.tensor import GradTape, Tensor, grad_check


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_kron(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    a, b = p.shape
    c, d = q.shape
    out = np.zeros((a * c, b * d))
    for i in range(a):
        for j in range(b):
            for k in range(c):
                for l in range(d):
                    out[i * c + k, j * d + l] = p[i, j] * q[k, l]
    return out


class TestMatmul:
    def test_identity(self):
        m = Tensor(Stream(1, "m").normal(9).reshape(3, 3))
        out = tt.matmul(Tensor(np.eye(3)), m)
        assert np.array_equal(out.data, m.data)

    def test_hand_case(self):
        out = tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_triple_loop_oracle(self):
        s = Stream(2, "mm")
        a = s.normal(12).reshape(3, 4)
        b = s.normal(20).reshape(4, 5)
        out = tt.matmul(Tensor(a), Tensor(b))
        assert np.allclose(out.data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(tt.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_of_sum_is_ones_bt(self):
        s = Stream(3, "gr")
        a = Tensor(s.normal(6).reshape(2, 3), requires_grad=True)
        b = Tensor(s.normal(12).reshape(3, 4))
        with GradTape() as tape:
            loss = tt.sum_all(tt.matmul(a, b))
        tape.backward(loss)
        expected = np.ones((2, 4)) @ b.data.T
        assert np.allclose(a.grad, expected, atol=1e-12)
        # and against the finite-difference oracle at eps 1e-5
        err = grad_check(lambda x: tt.sum_all(tt.matmul(x, b)), Tensor(a.data), eps=1e-5)
        assert err < 1e-6

    def test_batched_maps_rank2(self):
        s = Stream(4, "bm")
        a = s.normal(24).reshape(2, 3, 4)
        b = s.normal(20).reshape(4, 5)
        out = tt.matmul(Tensor(a), Tensor(b))
        for i in range(2):
            assert np.allclose(out.data[i], naive_matmul(a[i], b), atol=1e-12)

    def test_associativity(self):
        s = Stream(5, "as")
        a, b, c = (Tensor(s.normal(16).reshape(4, 4)) for _ in range(3))
        left = tt.matmul(tt.matmul(a, b), c)
        right = tt.matmul(a, tt.matmul(b, c))
        assert np.allclose(left.data, right.data, atol=1e-9)


class TestSoftmax:
    def test_symmetric_row(self):
        out = tt.softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.array_equal(out.data, [[0.5, 0.5]])

    def test_frozen_values(self):
        out = tt.softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
        assert np.allclose(out.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)

    def test_stabilized(self):
        out = tt.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.array_equal(out.data, [[1.0, 0.0]])
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one(self):
        x = Stream(6, "sm").normal(40).reshape(5, 8) * 10
        out = tt.softmax_rows(Tensor(x))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_shift_invariance(self):
        x = Stream(7, "si").normal(12).reshape(3, 4)
        base = tt.softmax_rows(Tensor(x))
        shifted = tt.softmax_rows(Tensor(x + 17.5))
        assert np.abs(base.data - shifted.data).max() < 1e-12

    def test_non_finite_input_errors(self):
        with pytest.raises(tt.NumericError):
            tt.softmax_rows(Tensor([[np.inf, 0.0]]))


class TestKron:
    def test_identity(self):
        out = tt.kron(Tensor(np.eye(2)), Tensor(np.eye(2)))
        assert np.array_equal(out.data, np.eye(4))

    def test_definition_oracle_exact(self):
        p = np.array([[1.0, 2.0], [3.0, 4.0]])
        q = np.array([[0.0, 1.0], [1.0, 0.0]])
        out = tt.kron(Tensor(p), Tensor(q))
        assert np.array_equal(out.data, naive_kron(p, q))  # same floating ops, exact

    def test_random_exact(self):
        s = Stream(8, "kr")
        p = s.normal(6).reshape(2, 3)
        q = s.normal(20).reshape(4, 5)
        assert np.array_equal(tt.kron(Tensor(p), Tensor(q)).data, naive_kron(p, q))

    def test_shapes(self):
        out = tt.kron(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert out.shape == (8, 15)

    def test_rank_error(self):
        with pytest.raises(tt.ShapeError):
            tt.kron(Tensor([1.0, 2.0]), Tensor(np.zeros((2, 2))))


class TestElementwise:
    def test_relu(self):
        assert np.array_equal(tt.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_tanh_zero(self):
        assert tt.tanh(Tensor([0.0])).data[0] == 0.0

    def test_exp_grad_is_exp(self):
        x = Tensor(Stream(9, "ex").normal(5))
        err = grad_check(lambda t: tt.sum_all(tt.exp(t)), x)
        assert err < 1e-6

    def test_log_non_positive_errors(self):
        with pytest.raises(tt.NumericError):
            tt.log(Tensor([1.0, 0.0]))

    def test_binary_shape_errors(self):
        with pytest.raises(tt.ShapeError):
            tt.add(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestLayerNorm:
    def test_constant_row(self):
        out = tt.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(out.data).max() < 1e-6  # zero variance guarded by epsilon

    def test_two_point_row(self):
        out = tt.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_zero_mean(self):
        x = Stream(10, "ln").normal(24).reshape(4, 6)
        out = tt.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.abs(out.data.mean(axis=1)).max() < 1e-9


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(Stream(11, "b1").normal(6).reshape(2, 3), requires_grad=True)
        with GradTape() as tape:
            loss = tt.sum_all(x)
        tape.backward(loss)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = Tensor(Stream(12, "b2").normal(5), requires_grad=True)
        with GradTape() as tape:
            loss = tt.sum_all(tt.mul(x, x))
        tape.backward(loss)
        assert np.allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_mlp_matches_finite_differences(self):
        s = Stream(13, "mlp")
        w1 = Tensor(s.normal(12).reshape(4, 3))
        b1 = Tensor(s.normal(4))
        w2 = Tensor(s.normal(4).reshape(1, 4))

        def f(x):
            h = tt.relu(tt.add_bias(tt.matmul(x, tt.transpose(w1)), b1))
            return tt.sum_all(tt.matmul(h, tt.transpose(w2)))

        x = Tensor(s.normal(6).reshape(2, 3) + 0.05)  # nudge off relu kinks
        assert grad_check(f, x) < 1e-4

    def test_repeat_backward_errors(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            loss = tt.sum_all(x)
        tape.backward(loss)
        with pytest.raises(tt.GradError, match="already replayed"):
            tape.backward(loss)

    def test_non_scalar_loss_errors(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = tt.mul(x, x)
        with pytest.raises(tt.ShapeError):
            tape.backward(y)

    def test_detached_graph_errors(self):
        x = Tensor([1.0], requires_grad=True)
        y = tt.sum_all(x)  # no active tape
        with pytest.raises(tt.GradError):
            tt.backward(y)
        with GradTape() as tape:
            pass
        with pytest.raises(tt.GradError):
            tape.backward(y)

    def test_deterministic_bit_identical(self):
        def run():
            s = Stream(14, "det")
            x = Tensor(s.normal(12).reshape(3, 4), requires_grad=True)
            w = Tensor(s.normal(16).reshape(4, 4))
            with GradTape() as tape:
                h = tt.softmax_rows(tt.matmul(x, w))
                loss = tt.sum_all(tt.mul(h, h))
            tape.backward(loss)
            return x.grad

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)


class TestGradCheck:
    def test_quadratic_exact(self):
        x = Tensor(Stream(15, "q").normal(6))
        assert grad_check(lambda t: tt.vdot(t, t), x) < 1e-6

    def test_softmax_cross_entropy(self):
        logits = Tensor(Stream(16, "ce").normal(5))
        onehot = np.zeros((1, 5))
        onehot[0, 2] = 1.0

        def f(t):
            logp = tt.log_softmax_rows(tt.reshape(t, (1, 5)))
            return tt.scale(tt.sum_all(tt.mul(logp, Tensor(onehot))), -1.0)

        assert grad_check(f, logits) < 1e-5

    def test_relu_kink_exemption(self):
        # at an exact kink the subgradient convention (0) and the symmetric
        # difference (1/2) legitimately disagree; tolerance does not apply there
        x = Tensor([0.0, 1.0, -1.0])
        err = grad_check(lambda t: tt.sum_all(tt.relu(t)), x)
        assert err > 1e-4
        off_kink = Tensor([0.5, 1.0, -1.0])
        assert grad_check(lambda t: tt.sum_all(tt.relu(t)), off_kink) < 1e-6

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: tt.sum_all(t), Tensor([1.0]), eps=1e-2)

    def test_nondeterminism_detected(self):
        state = {"n": 0}

        def f(t):
            state["n"] += 1
            return tt.scale(tt.sum_all(t), float(state["n"]))

        with pytest.raises(tt.NumericError, match="non-deterministic"):
            grad_check(f, Tensor([1.0, 2.0]))


def _const(s, *shape):
    return Tensor(s.normal(int(np.prod(shape))).reshape(shape))


def _op_cases(s):
    """(loss builder, input shape) per differentiable op; weighting each op's
    output by a fixed random tensor makes every coordinate's gradient count."""
    b43, b33 = _const(s, 4, 3), _const(s, 3, 3)
    k22, k66 = _const(s, 2, 2), _const(s, 6, 6)
    w34a, w34b, w34c = _const(s, 3, 4), _const(s, 3, 4), _const(s, 3, 4)
    v5a, v5b = _const(s, 5), _const(s, 5)
    g4, bi4, v4, w24, v3 = _const(s, 4), _const(s, 4), _const(s, 4), _const(s, 2, 4), _const(s, 3)
    return {
        "matmul": (lambda x: tt.sum_all(tt.mul(tt.matmul(x, b43), b33)), (3, 4)),
        "kron": (lambda x: tt.sum_all(tt.mul(tt.kron(x, k22), k66)), (3, 3)),
        "softmax": (lambda x: tt.sum_all(tt.mul(tt.softmax_rows(x), w34a)), (3, 4)),
        "log_softmax": (lambda x: tt.sum_all(tt.mul(tt.log_softmax_rows(x), w34b)), (3, 4)),
        "tanh": (lambda x: tt.sum_all(tt.mul(tt.tanh(x), v5a)), (5,)),
        "exp": (lambda x: tt.sum_all(tt.mul(tt.exp(x), v5b)), (5,)),
        "layer_norm": (lambda x: tt.sum_all(tt.mul(tt.layer_norm(x, g4, bi4), w34c)), (3, 4)),
        "add_bias": (lambda x: tt.sum_all(tt.mul(tt.add_bias(x, v4), w24)), (2, 4)),
        "sqnorm_rows": (lambda x: tt.vdot(tt.sqnorm_rows(x), v3), (3, 4)),
        "mean_rows": (lambda x: tt.vdot(tt.mean_rows(x), v4), (3, 4)),
    }


DIFFERENTIABLE_OPS = sorted(_op_cases(Stream(0, "probe")))


@pytest.mark.parametrize("name", DIFFERENTIABLE_OPS)
def test_gradients_over_seeded_inputs(name):
    """Ten seeded random inputs per differentiable op, all < 1e-4 rel error."""
    for trial in range(10):
        s = Stream(100 + trial, "ops", name)
        f, shape = _op_cases(s)[name]
        x = Tensor(s.normal(int(np.prod(shape))).reshape(shape))
        assert grad_check(f, x) < 1e-4, f"{name} trial {trial}"


class TestSerialization:
    def test_round_trip(self):
        x = Tensor(Stream(17, "ser").normal(24).reshape(2, 3, 4))
        blob = tt.tensor_to_bytes(x)
        y, end = tt.tensor_from_bytes(blob)
        assert end == len(blob)
        assert y.shape == x.shape
        assert np.array_equal(y.data, x.data)

    def test_layout(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        blob = tt.tensor_to_bytes(x)
        magic, rank = struct.unpack_from("<4sI", blob, 0)
        assert magic == b"TNSR" and rank == 2
        dims = struct.unpack_from("<2Q", blob, 8)
        assert dims == (2, 2)
        payload = np.frombuffer(blob, dtype="<f8", offset=24)
        assert np.array_equal(payload, [1.0, 2.0, 3.0, 4.0])

    def test_file_round_trip(self, tmp_path):
        x = Tensor(Stream(18, "f").normal(6).reshape(2, 3))
        tt.save_tensor(tmp_path / "t.tnsr", x)
        y = tt.load_tensor(tmp_path / "t.tnsr")
        assert np.array_equal(x.data, y.data)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tt.tensor_from_bytes(b"XXXX" + b"\0" * 20)

    def test_trailing_bytes(self, tmp_path):
        x = Tensor([1.0])
        with open(tmp_path / "t.tnsr", "wb") as fh:
            fh.write(tt.tensor_to_bytes(x) + b"junk")
        with pytest.raises(ValueError, match="trailing"):
            tt.load_tensor(tmp_path / "t.tnsr")


class TestTensorInvariants:
    def test_rank_cap(self):
        with pytest.raises(tt.ShapeError):
            Tensor(np.zeros((2, 2, 2, 2)))

    def test_scalar_is_rank_one(self):
        t = tt.scalar(3.5)
        assert t.shape == (1,) and t.item() == 3.5

    def test_finite_forward_on_finite_inputs(self):
        s = Stream(19, "fin")
        x = Tensor(s.normal(12).reshape(3, 4) * 5)
        for op in (tt.relu, tt.tanh, tt.exp, tt.softmax_rows, tt.log_softmax_rows):
            assert np.isfinite(op(x).data).all()
