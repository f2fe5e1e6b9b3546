import numpy as np
import pytest

from caat import (
    LossKind,
    ModelSpec,
    ModelState,
    flatten,
    forward,
    init_params,
    input_gradient,
    model_from_vector,
    param_gradient,
    sgd_step,
    unflatten,
)
from caat.losses import sigmoid

import helpers


def linear_model(w, b):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    spec = ModelSpec((w.shape[1], 1), output_head="single_logit")
    return ModelState(spec, [w], [np.asarray([b], dtype=np.float64)])


class TestSpec:
    def test_rejects_short_dims(self):
        with pytest.raises(ValueError):
            ModelSpec((3,))

    def test_rejects_single_logit_with_wide_output(self):
        with pytest.raises(ValueError):
            ModelSpec((3, 2), output_head="single_logit")

    def test_param_count(self):
        assert ModelSpec((4, 3, 2)).param_count() == 4 * 3 + 3 + 3 * 2 + 2


class TestInit:
    def test_deterministic_per_seed(self):
        spec = ModelSpec((2, 1), output_head="single_logit")
        a, b = init_params(spec, 7), init_params(spec, 7)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        assert not np.array_equal(init_params(spec, 8).weights[0], a.weights[0])

    def test_biases_zero(self):
        model = init_params(ModelSpec((2, 1), output_head="single_logit"), 3)
        assert np.all(model.biases[0] == 0.0)

    def test_weight_bound(self):
        # first layer of [4,3,2] has fan_in+fan_out=7; check many draws
        spec = ModelSpec((4, 3, 2))
        bound = np.sqrt(6.0 / 7.0)
        draws = []
        for seed in range(900):
            draws.append(init_params(spec, seed).weights[0].ravel())
        draws = np.concatenate(draws)
        assert draws.size >= 10_000
        assert np.all(np.abs(draws) <= bound)


class TestForward:
    def test_zero_model_gives_zero_logits(self):
        spec = ModelSpec((3, 2))
        model = ModelState(spec, [np.zeros((2, 3))], [np.zeros(2)])
        logits, _ = forward(model, np.random.default_rng(0).random((5, 3)))
        assert np.all(logits == 0.0)

    def test_hand_linear(self):
        model = linear_model([[1.0, -2.0]], 0.5)
        logits, _ = forward(model, np.array([[1.0, 1.0]]))
        assert logits[0, 0] == pytest.approx(-0.5, abs=0.0)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(11)
        spec = ModelSpec((4, 5, 3), activation="relu")
        model = init_params(spec, 42)
        for _ in range(20):
            x = rng.random(4)
            logits, _ = forward(model, x[None, :])
            ref = helpers.scalar_forward(model, x)
            assert np.max(np.abs(logits[0] - ref)) < 1e-12

    def test_dimension_mismatch(self):
        model = init_params(ModelSpec((4, 2)), 0)
        with pytest.raises(ValueError):
            forward(model, np.zeros((3, 5)))


class TestParamGradient:
    def test_zero_loss_grad(self):
        model = init_params(ModelSpec((3, 2)), 0)
        _, cache = forward(model, np.random.default_rng(1).random((4, 3)))
        g = param_gradient(model, cache, np.zeros((4, 2)))
        assert np.all(g == 0.0)

    def test_logistic_closed_form(self):
        # gradient of log(1+exp(-y f)) wrt (w, b) is -y*sigmoid(-y f)*(x, 1)
        rng = np.random.default_rng(5)
        for _ in range(25):
            w = rng.standard_normal((1, 3))
            b = rng.standard_normal()
            x = rng.random(3)
            y = 1 if rng.random() < 0.5 else -1
            model = linear_model(w, b)
            logits, cache = forward(model, x[None, :])
            scale = -y * sigmoid(-y * logits[0, 0])
            g = param_gradient(model, cache, np.array([[scale]]))
            expected = scale * np.concatenate([x, [1.0]])
            assert np.max(np.abs(g - expected)) < 1e-12

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_finite_differences(self, activation):
        rng = np.random.default_rng(9)
        spec = ModelSpec((4, 6, 3), activation=activation)
        loss = LossKind.softmax_ce()
        for seed in range(10):
            model = init_params(spec, seed)
            X = rng.random((3, 4))
            Y = rng.integers(0, 3, size=3)
            g = helpers.mean_param_gradient(model, X, Y, loss)
            g_fd = helpers.fd_param_gradient(
                model, lambda m: helpers.batch_loss_value(m, X, Y, loss)
            )
            assert helpers.rel_error(g_fd, g) < 1e-6

    def test_stale_cache_rejected(self):
        model = init_params(ModelSpec((3, 2)), 0)
        _, cache = forward(model, np.zeros((4, 3)))
        with pytest.raises(ValueError):
            param_gradient(model, cache, np.zeros((5, 2)))


class TestInputGradient:
    def test_zero_weights(self):
        spec = ModelSpec((3, 1), output_head="single_logit")
        model = ModelState(spec, [np.zeros((1, 3))], [np.zeros(1)])
        g = input_gradient(model, np.array([0.1, 0.2, 0.3]), 1, LossKind.bce())
        assert np.all(g == 0.0)

    def test_logistic_direction(self):
        w = np.array([[1.0, -2.0]])
        model = linear_model(w, 0.0)
        for y in (1, -1):
            x = np.array([0.3, 0.4])
            g = input_gradient(model, x, y, LossKind.bce())
            f = float(w[0] @ x)
            expected = -y * sigmoid(-y * f) * w[0]
            assert np.max(np.abs(g - expected)) < 1e-14

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec((5, 4, 2), activation="tanh")
        loss = LossKind.softmax_ce()
        for seed in range(10):
            model = init_params(spec, seed)
            x = rng.random(5)
            y = int(rng.integers(0, 2))
            g = input_gradient(model, x, y, loss)
            g_fd = helpers.fd_input_gradient(
                lambda xv: helpers.batch_loss_value(model, xv[None, :], np.array([y]), loss), x
            )
            assert helpers.rel_error(g_fd, g) < 1e-6


class TestSgdStep:
    def test_plain_step(self):
        p = np.array([1.0, 2.0])
        g = np.array([0.5, -0.5])
        p2, v2 = sgd_step(p, g, np.zeros(2), lr=0.1, momentum=0.0)
        assert np.array_equal(p2, p - 0.1 * g)
        assert np.array_equal(v2, g)

    def test_zero_lr_updates_velocity_only(self):
        p = np.array([1.0])
        p2, v2 = sgd_step(p, np.array([2.0]), np.array([1.0]), lr=0.0, momentum=0.5)
        assert np.array_equal(p2, p)
        assert v2[0] == 0.5 * 1.0 + 2.0

    def test_three_step_unroll(self):
        g = np.array([1.0, -2.0])
        lr, mom = 0.1, 0.9
        p = np.zeros(2)
        v = np.zeros(2)
        for _ in range(3):
            p, v = sgd_step(p, g, v, lr, mom)
        # hand recurrence: v1=g, v2=1.9g, v3=2.71g; p3 = -lr*(v1+v2+v3)
        expected_v = (1.0 + 0.9 + 0.81) * g
        expected_p = -lr * (1.0 + 1.9 + 2.71) * g
        assert np.max(np.abs(v - expected_v)) < 1e-15
        assert np.max(np.abs(p - expected_p)) < 1e-15

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            sgd_step(np.array([np.inf]), np.zeros(1), np.zeros(1), 0.1, 0.0)


class TestFlatten:
    def test_round_trips(self):
        spec = ModelSpec((4, 3, 2), activation="tanh")
        model = init_params(spec, 123)
        vec = flatten(model)
        rebuilt = model_from_vector(spec, vec)
        for a, b in zip(model.weights, rebuilt.weights):
            assert np.array_equal(a, b)
        for a, b in zip(model.biases, rebuilt.biases):
            assert np.array_equal(a, b)
        assert np.array_equal(flatten(rebuilt), vec)

    def test_vector_round_trip(self):
        spec = ModelSpec((3, 2))
        vec = np.arange(spec.param_count(), dtype=np.float64)
        weights, biases = unflatten(spec, vec)
        model = ModelState(spec, weights, biases)
        assert np.array_equal(flatten(model), vec)

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            unflatten(ModelSpec((3, 2)), np.zeros(5))


class TestGradientExactnessSweep:
    def test_many_random_instances(self):
        # >=100 instances across architectures; relative error < 1e-4 at h=1e-5
        rng = np.random.default_rng(77)
        cases = [
            (ModelSpec((3, 1), output_head="single_logit"), LossKind.bce()),
            (ModelSpec((3, 4, 1), activation="tanh", output_head="single_logit"), LossKind.bce()),
            (ModelSpec((3, 4, 3), activation="tanh"), LossKind.softmax_ce()),
        ]
        checked = 0
        for spec, loss in cases:
            for seed in range(35):
                model = init_params(spec, seed)
                X = rng.random((2, 3))
                if loss.kind == "bce":
                    Y = rng.choice([-1, 1], size=2)
                else:
                    Y = rng.integers(0, 3, size=2)
                g = helpers.mean_param_gradient(model, X, Y, loss)
                g_fd = helpers.fd_param_gradient(
                    model, lambda m: helpers.batch_loss_value(m, X, Y, loss)
                )
                assert helpers.rel_error(g_fd, g) < 1e-4
                checked += 1
        assert checked >= 100
