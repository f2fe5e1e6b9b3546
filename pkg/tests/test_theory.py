import numpy as np
import pytest

from caat import (
    AttackSpec,
    LossKind,
    ModelSpec,
    ModelState,
    SizeGuardError,
    finite_diff_H,
    init_params,
    mu_upper_bound,
    power_iteration_lmax,
    verify_bound,
)
from caat.losses import sigmoid
from caat.theory import _sample_gradient

import helpers


def linear_model(w, b=0.0):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    spec = ModelSpec((w.shape[1], 1), output_head="single_logit")
    return ModelState(spec, [w], [np.asarray([b], dtype=np.float64)])


def logistic_H_analytic(w, b, x, y):
    """Closed-form d(grad)/dx for the logistic model, rows in canonical order."""
    f = float(w @ x + b)
    s = float(sigmoid(-y * f))
    s_prime = s * (1.0 - s)
    d = x.size
    H = np.zeros((d + 1, d))
    H[:d, :] = s_prime * np.outer(x, w) - y * s * np.eye(d)
    H[d, :] = s_prime * w
    return H


class TestFiniteDiffH:
    def test_matches_logistic_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            w = rng.standard_normal(5)
            b = float(rng.normal())
            x = rng.uniform(size=5)
            y = 1 if rng.random() < 0.5 else -1
            model = linear_model(w[None, :], b)
            H = finite_diff_H(model, x, y, LossKind.bce())
            H_exact = logistic_H_analytic(w, b, x, y)
            assert helpers.rel_error(H, H_exact) < 1e-4

    def test_saturated_region_is_flat(self):
        # enormous margin -> sigmoid factors vanish -> H ~ 0
        w = np.array([[50.0, 50.0]])
        model = linear_model(w, 0.0)
        H = finite_diff_H(model, np.array([0.9, 0.9]), 1, LossKind.bce())
        assert np.max(np.abs(H)) < 1e-8

    def test_step_size_consistency(self):
        # halving truncation error: entries move by O(h^2) between h and 2h
        rng = np.random.default_rng(1)
        w = rng.standard_normal(4)
        model = linear_model(w[None, :], 0.1)
        x = rng.uniform(size=4)
        H_small = finite_diff_H(model, x, 1, LossKind.bce(), h=1e-5)
        H_large = finite_diff_H(model, x, 1, LossKind.bce(), h=2e-5)
        scale = max(1.0, float(np.max(np.abs(H_small))))
        assert np.max(np.abs(H_small - H_large)) < 1e-6 * scale

    def test_size_guard(self):
        model = init_params(ModelSpec((2000, 3000, 2)), 0)
        with pytest.raises(SizeGuardError):
            finite_diff_H(model, np.zeros(2000), 0, LossKind.softmax_ce())


class TestPowerIteration:
    def test_diagonal(self):
        result = power_iteration_lmax(np.diag([4.0, 1.0]))
        assert result.lambda_max == pytest.approx(4.0, abs=1e-9)
        assert result.converged

    def test_identity(self):
        result = power_iteration_lmax(np.eye(5))
        assert result.lambda_max == pytest.approx(1.0, abs=1e-12)
        assert result.residual < 1e-12

    def test_zero_matrix(self):
        result = power_iteration_lmax(np.zeros((4, 4)))
        assert result.lambda_max == 0.0 and result.converged

    def test_against_dense_eigensolver(self):
        rng = np.random.default_rng(2)
        for trial in range(25):
            M = rng.standard_normal((5, 5))
            K = M.T @ M
            result = power_iteration_lmax(K, seed=trial)
            exact = float(np.linalg.eigvalsh(K)[-1])
            assert abs(result.lambda_max - exact) / exact < 1e-8
            assert result.residual < 1e-6

    def test_asymmetric_input_symmetrized(self):
        K = np.array([[2.0, 1.0], [0.0, 1.0]])
        result = power_iteration_lmax(K)
        exact = float(np.linalg.eigvalsh(0.5 * (K + K.T))[-1])
        assert result.lambda_max == pytest.approx(exact, rel=1e-9)

    def test_rejects_nonsquare(self):
        with pytest.raises(ValueError):
            power_iteration_lmax(np.zeros((2, 3)))

    def test_iteration_cap_flags_nonconvergence(self):
        rng = np.random.default_rng(9)
        M = rng.standard_normal((8, 8))
        result = power_iteration_lmax(M.T @ M, max_iter=1)
        assert not result.converged
        assert np.isfinite(result.lambda_max)


class TestMuUpperBound:
    def test_zero_delta(self):
        assert mu_upper_bound(3.0, 0.0, 10, "linf") == 0.0

    def test_l2_value(self):
        assert mu_upper_bound(2.0, 0.1, 99, "l2") == pytest.approx(0.01, abs=1e-15)

    def test_linf_value(self):
        # adopted constant sums d coordinate bounds: lam*d*delta^2/2
        assert mu_upper_bound(2.0, 0.1, 4, "linf") == pytest.approx(0.04, abs=1e-15)

    def test_monotone_in_each_argument(self):
        base = mu_upper_bound(1.0, 0.1, 5, "linf")
        assert mu_upper_bound(2.0, 0.1, 5, "linf") >= base
        assert mu_upper_bound(1.0, 0.2, 5, "linf") >= base
        assert mu_upper_bound(1.0, 0.1, 9, "linf") >= base

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            mu_upper_bound(-1.0, 0.1, 5, "l2")


class TestVerifyBound:
    def test_zero_delta_trivially_satisfied(self):
        model = linear_model(np.array([[0.4, -0.2]]), 0.1)
        attack = AttackSpec(family="fgsm", delta=0.0)
        report = verify_bound(model, np.array([0.4, 0.6]), 1, LossKind.bce(), attack)
        assert report.mu_observed == 0.0
        assert report.mu_bound == 0.0
        assert report.satisfied

    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_random_logistic_instances(self, norm):
        rng = np.random.default_rng(3)
        family = "fgsm" if norm == "linf" else "pgd"
        for trial in range(25):
            w = 0.5 * rng.standard_normal(6)
            model = linear_model(w[None, :], float(rng.normal() * 0.2))
            x = rng.uniform(0.3, 0.7, size=6)
            y = 1 if rng.random() < 0.5 else -1
            delta = float(rng.choice([0.05, 0.1, 0.2, 0.3]))
            attack = AttackSpec(family=family, norm=norm, delta=delta,
                                alpha=delta / 4, steps=8, random_init=False)
            report = verify_bound(model, x, y, LossKind.bce(), attack)
            assert report.satisfied
            assert report.power_iter_residual < 1e-6
            assert report.lambda_max >= 0.0

    def test_loose_constant_dominates_adopted(self):
        model = linear_model(np.array([[0.5, -0.3, 0.2]]))
        attack = AttackSpec(family="fgsm", delta=0.1)
        report = verify_bound(model, np.array([0.4, 0.5, 0.6]), 1, LossKind.bce(), attack)
        assert report.mu_bound_loose == pytest.approx(report.mu_bound * 3)

    def test_first_order_consistency(self):
        # |g_a - g_c - H*eps| / |eps| should shrink linearly with the budget
        model = init_params(ModelSpec((4, 5, 2), activation="tanh"), 7)
        rng = np.random.default_rng(8)
        x = rng.uniform(0.3, 0.7, size=4)
        y = 1
        loss = LossKind.softmax_ce()
        H = finite_diff_H(model, x, y, loss)
        g_c = _sample_gradient(model, x, y, loss)

        def residual_ratio(delta):
            attack = AttackSpec(family="fgsm", delta=delta)
            from caat.attacks import perturb_batch
            x_adv = perturb_batch(model, x[None, :], np.array([y]), loss, attack)[0]
            eps = x_adv - x
            g_a = _sample_gradient(model, x_adv, y, loss)
            return np.linalg.norm(g_a - g_c - H @ eps) / np.linalg.norm(eps)

        r_small = residual_ratio(1e-3)
        r_large = residual_ratio(1e-2)
        assert r_small < 10.0 * r_large * (1e-3 / 1e-2)
