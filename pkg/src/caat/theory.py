"""Numerical audit of the quadratic conflict bound.

For a single input x the adversarial gradient expands as
g_a = g_c + H*eps + O(|eps|^2) with H = d(g_c)/dx, so the conflict score is
bounded by lambda_max(H^T H) * |eps|^2 / 2. This module builds H by central
differences, estimates lambda_max by power iteration, and checks the bound on
concrete (model, input, attack) triples.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import losses as losses_mod
from .attacks import AttackSpec, perturb_batch
from .errors import NumericError, SizeGuardError
from .model import ModelState, forward, param_gradient
from .surgery import conflict_mu

SIZE_GUARD = 10**7  # refuse H larger than this many entries


@dataclass
class BoundReport:
    """Outcome of one bound check; ``mu_bound_loose`` uses the d^2 constant."""

    lambda_max: float
    mu_observed: float
    mu_bound: float
    norm: str
    delta: float
    d: int
    satisfied: bool
    power_iter_residual: float
    mu_bound_loose: float
    power_iter_converged: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PowerIterationResult:
    lambda_max: float
    residual: float
    converged: bool
    iterations: int


def _sample_gradient(model: ModelState, x: np.ndarray, y, loss: losses_mod.LossKind) -> np.ndarray:
    logits, cache = forward(model, x[None, :])
    _, grad_logits = losses_mod.pointwise_loss_grad(loss, logits, np.asarray([y]))
    return param_gradient(model, cache, grad_logits)


def finite_diff_H(
    model: ModelState, x: np.ndarray, y, loss: losses_mod.LossKind, h: float = 1e-5
) -> np.ndarray:
    """Central-difference Jacobian of the parameter gradient wrt the input.

    Column j is (g(x + h*e_j) - g(x - h*e_j)) / (2h). Guarded to desk scale:
    the result must have at most 10^7 entries.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    n_params = model.spec.param_count()
    if n_params * d > SIZE_GUARD:
        raise SizeGuardError(
            f"H would hold {n_params * d} entries, above the {SIZE_GUARD} guard"
        )
    H = np.empty((n_params, d))
    xp = x.copy()
    for j in range(d):
        orig = x[j]
        xp[j] = orig + h
        g_plus = _sample_gradient(model, xp, y, loss)
        xp[j] = orig - h
        g_minus = _sample_gradient(model, xp, y, loss)
        xp[j] = orig
        H[:, j] = (g_plus - g_minus) / (2.0 * h)
    if not np.all(np.isfinite(H)):
        raise NumericError("non-finite entries in finite-difference Jacobian")
    return H


def power_iteration_lmax(
    K: np.ndarray,
    seed: int = 0,
    tol: float = 1e-10,
    residual_tol: float = 1e-8,
    max_iter: int = 10**4,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The input is symmetrized as (K + K^T)/2 first. Iterates until the
    Rayleigh quotient changes by less than tol*max(1, lambda) and the
    residual |Kv - lambda v| drops below residual_tol*max(1, lambda), or the
    iteration cap is hit (then the best estimate is returned, flagged).
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    K = 0.5 * (K + K.T)
    n = K.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = np.inf
    converged = False
    iterations = 0
    residual = np.inf
    for iterations in range(1, max_iter + 1):
        w = K @ v
        norm_w = float(np.linalg.norm(w))
        if norm_w < 1e-300:
            # v is (numerically) in the nullspace; for PSD K this means 0
            return PowerIterationResult(0.0, 0.0, True, iterations)
        lam_new = float(v @ w)
        residual = float(np.linalg.norm(w - lam_new * v))
        scale = max(1.0, abs(lam_new))
        if abs(lam_new - lam) < tol * scale and residual < residual_tol * scale:
            lam = lam_new
            converged = True
            break
        lam = lam_new
        v = w / norm_w
    return PowerIterationResult(max(lam, 0.0), residual, converged, iterations)


def mu_upper_bound(lambda_max: float, delta: float, d: int, norm: str) -> float:
    """Quadratic conflict bound: lambda_max*delta^2/2 (l2) or *d more (linf)."""
    if lambda_max < 0.0 or delta < 0.0 or d < 0:
        raise ValueError("lambda_max, delta and d must be nonnegative")
    if norm == "l2":
        return 0.5 * lambda_max * delta * delta
    if norm == "linf":
        return 0.5 * lambda_max * d * delta * delta
    raise ValueError(f"unknown norm {norm!r}")


def verify_bound(
    model: ModelState,
    x: np.ndarray,
    y,
    loss: losses_mod.LossKind,
    attack: AttackSpec,
    attack_seed: int = 0,
    h: float = 1e-5,
    power_seed: int = 0,
) -> BoundReport:
    """Check mu(g_c, g_a) against its quadratic bound for one input."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    rng = np.random.default_rng(attack_seed)
    x_adv = perturb_batch(model, x[None, :], np.asarray([y]), loss, attack, rng=rng)[0]
    eps = x_adv - x
    eps_norm = np.max(np.abs(eps)) if attack.norm == "linf" else np.linalg.norm(eps)
    if eps_norm > attack.delta * (1.0 + 1e-9) + 1e-12:
        raise ValueError("attack stepped outside its own budget")

    g_c = _sample_gradient(model, x, y, loss)
    g_a = _sample_gradient(model, x_adv, y, loss)
    mu, _ = conflict_mu(g_c, g_a)

    H = finite_diff_H(model, x, y, loss, h=h)
    power = power_iteration_lmax(H.T @ H, seed=power_seed)
    bound = mu_upper_bound(power.lambda_max, attack.delta, d, attack.norm)
    loose = bound * d if attack.norm == "linf" else bound
    return BoundReport(
        lambda_max=power.lambda_max,
        mu_observed=mu,
        mu_bound=bound,
        norm=attack.norm,
        delta=attack.delta,
        d=d,
        satisfied=bool(mu <= bound + 1e-9),
        power_iter_residual=power.residual,
        mu_bound_loose=loose,
        power_iter_converged=power.converged,
    )
