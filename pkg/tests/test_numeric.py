import numpy as np
import pytest

from modules.numeric import Mlp
from modules.numeric import MlpSpec
from modules.numeric import ModelParams
from modules.numeric import Optimizer
from modules.numeric import adam_step
from modules.numeric import check_finite
from modules.numeric import conv3x3_backward
from modules.numeric import conv3x3_forward
from modules.numeric import dtype_for
from modules.numeric import grad_check
from modules.numeric import linear_backward
from modules.numeric import linear_forward
from modules.numeric import max_pool_rows
from modules.numeric import max_pool_rows_backward
from modules.numeric import namespace_slots
from modules.numeric import relu_backward
from modules.numeric import relu_forward
from modules.numeric import sgd_step
from modules.util import Failed
from modules.util import NumericError
from modules.util import ShapeError


def triple_loop_matmul(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            total = b[j]
            for k in range(x.shape[1]):
                total += x[i, k] * w[k, j]
            out[i, j] = total
    return out


def scalar_params(value, grad):
    params = ModelParams(dtype=np.float64)
    params.add("g.x", np.array([value]))
    params.accumulate("g.x", np.array([grad]))
    return params


class TestLinear:
    def test_zero_input_passes_bias(self):
        y = linear_forward(np.zeros((1, 2)), np.ones((2, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_identity_input_returns_weights(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(linear_forward(np.eye(2), w, np.zeros(2)), w)

    @pytest.mark.parametrize("shape", [(3, 4, 2), (1, 1, 1), (17, 64, 64)])
    def test_matches_triple_loop(self, rng, shape):
        b_rows, d_in, d_out = shape
        x = rng.standard_normal((b_rows, d_in))
        w = rng.standard_normal((d_in, d_out))
        b = rng.standard_normal(d_out)
        np.testing.assert_allclose(linear_forward(x, w, b), triple_loop_matmul(x, w, b), rtol=1e-6, atol=1e-9)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 1\)"):
            linear_forward(np.zeros((2, 3)), np.zeros((4, 1)), np.zeros(1))

    def test_scalar_chain_rule(self):
        dx, dw, db = linear_backward(np.array([[2.0]]), np.array([[3.0]]), np.array([[1.0]]))
        assert dx[0, 0] == 3.0
        assert dw[0, 0] == 2.0
        assert db[0] == 1.0

    def test_zero_upstream_gives_zero_gradients(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        for grad in linear_backward(x, w, np.zeros((3, 2))):
            assert not np.any(grad)

    def test_backward_rejects_wrong_dy(self):
        with pytest.raises(ShapeError):
            linear_backward(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 5)))

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        inputs = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2)), "b": rng.standard_normal(2)}

        def grads(dy, x, w, b):
            dx, dw, db = linear_backward(x, w, dy)
            return {"x": dx, "w": dw, "b": db}

        report = grad_check(linear_forward, grads, inputs, rtol=1e-4, seed=seed)
        assert report.passed, list(report.lines())


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_backward_gates_at_zero(self):
        dx = relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
        np.testing.assert_array_equal(dx, [0.0, 0.0, 5.0])

    def test_locally_linear_check_is_exact(self):
        report = grad_check(relu_forward, lambda dy, x: {"x": relu_backward(x, dy)}, {"x": np.array([5.0])})
        assert report.max_error < 1e-6


class TestMaxPool:
    def test_single_row(self):
        y, argmax = max_pool_rows(np.array([[1.0, -2.0, 3.0]]))
        np.testing.assert_array_equal(y, [1.0, -2.0, 3.0])
        np.testing.assert_array_equal(argmax, [0, 0, 0])

    def test_columnwise_max(self):
        y, argmax = max_pool_rows(np.array([[1.0, 4.0], [3.0, 2.0]]))
        np.testing.assert_array_equal(y, [3.0, 4.0])
        np.testing.assert_array_equal(argmax, [1, 0])

    def test_backward_routes_to_argmax(self):
        _, argmax = max_pool_rows(np.array([[1.0, 4.0], [3.0, 2.0]]))
        dx = max_pool_rows_backward(argmax, np.array([1.0, 1.0]), 2)
        np.testing.assert_array_equal(dx, [[0.0, 1.0], [1.0, 0.0]])

    def test_ties_go_to_lowest_row(self):
        _, argmax = max_pool_rows(np.array([[2.0], [2.0], [1.0]]))
        assert argmax[0] == 0

    def test_empty_group(self):
        with pytest.raises(ShapeError, match="empty group"):
            max_pool_rows(np.zeros((0, 3)))


class TestConv:
    def test_center_tap_is_pointwise_linear(self, rng):
        x = rng.standard_normal((4, 5, 2))
        w = np.zeros((18, 3))
        center = rng.standard_normal((2, 3))
        w[8:10] = center
        y, _ = conv3x3_forward(x, w, np.zeros(3))
        np.testing.assert_allclose(y, x @ center)

    def test_finite_differences(self, rng):
        inputs = {"x": rng.standard_normal((5, 4, 2)), "w": rng.standard_normal((18, 3)), "b": rng.standard_normal(3)}

        def grads(dy, x, w, b):
            _, cols = conv3x3_forward(x, w, b)
            dx, dw, db = conv3x3_backward(cols, w, dy)
            return {"x": dx, "w": dw, "b": db}

        report = grad_check(lambda x, w, b: conv3x3_forward(x, w, b)[0], grads, inputs)
        assert report.passed, list(report.lines())


class TestModelParams:
    def test_names_are_unique(self):
        params = ModelParams()
        params.add("g.w", np.zeros(2))
        with pytest.raises(Failed, match="duplicate"):
            params.add("g.w", np.zeros(2))

    def test_namespace_required(self):
        with pytest.raises(Failed, match="namespaces"):
            ModelParams().add("x.w", np.zeros(2))

    def test_grad_has_value_shape(self):
        params = ModelParams()
        params.add("h.w", np.ones((3, 2)))
        assert params.grad("h.w").shape == (3, 2)

    def test_digest_depends_only_on_selected_namespaces(self):
        params = ModelParams()
        params.add("g.w", np.ones(3))
        params.add("h.w", np.ones(3))
        before = params.digest(["g"])
        params.assign("h.w", np.zeros(3))
        assert params.digest(["g"]) == before
        params.assign("g.w", np.zeros(3))
        assert params.digest(["g"]) != before

    def test_dtype_for(self):
        assert dtype_for("fast") is np.float32
        assert dtype_for("high") is np.float64
        with pytest.raises(Failed):
            dtype_for("half")


class TestOptimizers:
    def test_sgd_zero_grad_is_identity(self):
        params = scalar_params(1.5, 0.0)
        sgd_step(params, 0.1)
        assert params.value("g.x")[0] == 1.5

    def test_sgd_arithmetic(self):
        params = scalar_params(1.0, 2.0)
        sgd_step(params, 0.5)
        assert params.value("g.x")[0] == 0.0
        assert params.grad("g.x")[0] == 0.0

    def test_small_learning_rate_accepted(self):
        optimizer = Optimizer.from_config(
            {"kind": "sgd", "lr": 6.25e-5, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}
        )
        params = scalar_params(1.0, 1.0)
        optimizer.step(params)
        assert params.value("g.x")[0] == pytest.approx(1.0 - 6.25e-5)

    def test_adam_zero_grad_is_identity(self):
        params = scalar_params(0.7, 0.0)
        adam_step(params, 0.001)
        assert params.value("g.x")[0] == 0.7

    def test_adam_first_step_closed_form(self):
        params = scalar_params(0.0, 1.0)
        state = adam_step(params, 0.001)
        assert params.value("g.x")[0] == pytest.approx(-0.001, rel=1e-6)
        assert state["step"] == 1

    def test_non_finite_grad_aborts(self):
        params = scalar_params(1.0, np.nan)
        with pytest.raises(NumericError, match="g.x"):
            sgd_step(params, 0.1)
        assert params.value("g.x")[0] == 1.0

    def test_state_round_trip_through_dict(self):
        optimizer = Optimizer("adam", lr=0.01)
        params = scalar_params(1.0, 1.0)
        optimizer.step(params)
        restored = Optimizer("adam", lr=0.01)
        restored.load_state_dict(optimizer.state_dict())
        assert restored.state["step"] == 1
        np.testing.assert_array_equal(restored.state["m"]["g.x"], optimizer.state["m"]["g.x"])

    def test_fresh_parameter_ignores_inherited_step(self):
        params = scalar_params(0.0, 1.0)
        state = adam_step(params, 0.001, state={"step": 50, "m": {}, "v": {}, "t": {}})
        assert params.value("g.x")[0] == pytest.approx(-0.001, rel=1e-6)
        assert state["step"] == 51
        assert int(state["t"]["g.x"]) == 1

    def test_resumed_state_matches_uninterrupted(self):
        straight = Optimizer("adam", lr=0.01)
        a = scalar_params(1.0, 0.5)
        straight.step(a)
        a.accumulate("g.x", np.array([-2.0]))
        straight.step(a)

        first = Optimizer("adam", lr=0.01)
        b = scalar_params(1.0, 0.5)
        first.step(b)
        second = Optimizer("adam", lr=0.01)
        second.load_state_dict(first.state_dict())
        b.accumulate("g.x", np.array([-2.0]))
        second.step(b)
        assert b.value("g.x")[0] == a.value("g.x")[0]
        assert int(second.state["t"]["g.x"]) == 2

    def test_namespace_slots(self):
        state = {
            "kind": "adam",
            "step": 3,
            "m": {"g.w": np.ones(2), "s.w": np.zeros(2)},
            "v": {"g.w": np.ones(2), "s.w": np.zeros(2)},
            "t": {"g.w": np.array(3.0), "s.w": np.array(1.0)},
        }
        slots = namespace_slots(state, ["s"])
        assert {slot: list(values) for slot, values in slots.items()} == {"m": ["s.w"], "v": ["s.w"], "t": ["s.w"]}
        assert namespace_slots(None, ["g"]) == {"m": {}, "v": {}, "t": {}}

    def test_unknown_kind(self):
        with pytest.raises(Failed):
            Optimizer("rmsprop")


class TestGradCheck:
    def test_two_layer_mlp(self, rng):
        mlp = Mlp("g.test", 3, MlpSpec([5, 2], ["relu", "none"]))
        params = ModelParams(dtype=np.float64)
        mlp.init(params, rng)
        x = rng.standard_normal((6, 3))

        def forward(x):
            return mlp.forward(params, x)[0]

        def backward(dy, x):
            _, cache = mlp.forward(params, x)
            return {"x": mlp.backward(params, cache, dy)}

        report = grad_check(forward, backward, {"x": x})
        assert report.passed, list(report.lines())

    def test_wrong_gradient_is_reported_not_raised(self, rng):
        report = grad_check(lambda x: x * x, lambda dy, x: {"x": dy * x}, {"x": rng.uniform(1.0, 2.0, 4)})
        assert not report.passed
        assert next(report.lines()).startswith("FAIL")

    def test_check_finite(self):
        check_finite("ok", np.ones(3))
        with pytest.raises(NumericError, match="1 non-finite"):
            check_finite("bad", np.array([1.0, np.inf]))
