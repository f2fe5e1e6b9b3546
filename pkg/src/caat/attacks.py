"""Inner-maximization solvers: FGSM, PGD, and the closed form for linear models.

All attacks operate on raw [0, 1] pixel inputs and respect both the norm ball
around the clean input and the clip box exactly. Randomness (PGD restarts)
comes from an explicit generator so runs are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import losses as losses_mod
from .errors import NumericError
from .model import ModelState, forward, input_gradient_batch

ATTACK_FAMILIES = ("fgsm", "pgd", "analytic_linear", "none")
NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackSpec:
    """Attack family, norm ball, budget and iteration schedule."""

    family: str = "pgd"
    norm: str = "linf"
    delta: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    steps: int = 10
    random_init: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        # delta = 0 is allowed so every attack can collapse to the identity
        if not (np.isfinite(self.delta) and self.delta >= 0.0):
            raise ValueError("delta must be finite and >= 0")
        if not (np.isfinite(self.alpha) and self.alpha > 0.0):
            raise ValueError("alpha must be finite and > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be < clip_max")


def _project_ball(x: np.ndarray, origin: np.ndarray, norm: str, delta: float) -> np.ndarray:
    diff = x - origin
    if norm == "linf":
        diff = np.clip(diff, -delta, delta)
    else:
        norms = np.linalg.norm(diff, axis=1, keepdims=True)
        scale = np.ones_like(norms)
        outside = norms > delta
        np.divide(delta, norms, out=scale, where=outside)
        diff = diff * scale
    return origin + diff


def _random_in_ball(shape: tuple[int, int], norm: str, delta: float, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-delta, delta, size=shape)
    n, d = shape
    direction = rng.standard_normal(shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-30)
    radius = delta * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    return direction * radius


def _step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(norms > 1e-30, grad / np.where(norms > 0.0, norms, 1.0), 0.0)


def perturb_batch(
    model: ModelState,
    X: np.ndarray,
    labels: np.ndarray,
    loss: losses_mod.LossKind,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Adversarial inputs for a batch under ``spec``; rows stay in ball and box."""
    X = np.asarray(X, dtype=np.float64)
    if spec.family == "none" or spec.delta == 0.0:
        return X.copy()
    if spec.family == "analytic_linear":
        w = _linear_weights(model)
        eps = analytic_linear_attack_batch(w, labels, spec.delta)
        return X + eps
    if spec.family == "fgsm":
        # FGSM is the single full-step special case of the PGD engine
        spec = replace(spec, family="pgd", steps=1, alpha=spec.delta, random_init=False)
    x = X.copy()
    if spec.random_init:
        if rng is None:
            rng = np.random.default_rng(0)
        x = x + _random_in_ball(x.shape, spec.norm, spec.delta, rng)
        x = np.clip(x, spec.clip_min, spec.clip_max)
    for _ in range(spec.steps):
        logits, cache = forward(model, x)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits during attack")
        _, grad_logits = losses_mod.pointwise_loss_grad(loss, logits, labels)
        grad = input_gradient_batch(model, cache, grad_logits)
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite input gradient during attack")
        x = x + spec.alpha * _step_direction(grad, spec.norm)
        x = _project_ball(x, X, spec.norm, spec.delta)
        x = np.clip(x, spec.clip_min, spec.clip_max)
    return x


def fgsm(
    model: ModelState,
    x: np.ndarray,
    y,
    loss: losses_mod.LossKind,
    delta: float,
    clip_min: float = 0.0,
    clip_max: float = 1.0,
) -> np.ndarray:
    """Single signed-gradient step of size delta, clipped to the box."""
    spec = AttackSpec(
        family="fgsm", norm="linf", delta=delta, alpha=max(delta, 1e-30),
        steps=1, random_init=False, clip_min=clip_min, clip_max=clip_max,
    )
    x = np.asarray(x, dtype=np.float64)
    return perturb_batch(model, x[None, :], np.asarray([y]), loss, spec)[0]


def pgd(
    model: ModelState,
    x: np.ndarray,
    y,
    loss: losses_mod.LossKind,
    spec: AttackSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Projected gradient ascent on a single input."""
    if spec.family != "pgd":
        raise ValueError("spec.family must be 'pgd'")
    x = np.asarray(x, dtype=np.float64)
    return perturb_batch(model, x[None, :], np.asarray([y]), loss, spec, rng=rng)[0]


def _linear_weights(model: ModelState) -> np.ndarray:
    if model.spec.n_layers != 1 or model.spec.output_head != "single_logit":
        raise ValueError("analytic attack needs a linear single-logit model")
    return model.weights[0][0]


def analytic_linear_attack(w: np.ndarray, y, delta: float) -> np.ndarray:
    """Worst-case L-inf perturbation for a linear single-logit model.

    eps* = -y * delta * sign(w), with sign(0) = 0.
    """
    y = losses_mod._check_binary_label(y)
    w = np.asarray(w, dtype=np.float64)
    return -y * delta * np.sign(w)


def analytic_linear_attack_batch(w: np.ndarray, labels: np.ndarray, delta: float) -> np.ndarray:
    y = losses_mod._check_labels_binary(np.asarray(labels))
    return -y[:, None] * delta * np.sign(np.asarray(w, dtype=np.float64))[None, :]


def analytic_adv_loss(
    w: np.ndarray, b: float, x: np.ndarray, y, delta: float
) -> tuple[float, np.ndarray, float]:
    """Closed-form adversarial BCE for a linear model, with exact gradients.

    loss = log(1 + exp(-y*(w.x + b) + delta*|w|_1)); the |w|_1 subgradient at
    zero weights is taken as 0.
    """
    y = losses_mod._check_binary_label(y)
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    t = -y * (float(w @ x) + float(b)) + delta * float(np.abs(w).sum())
    loss = float(losses_mod.softplus(t))
    s = float(losses_mod.sigmoid(t))
    grad_w = s * (-y * x + delta * np.sign(w))
    grad_b = s * (-y)
    return loss, grad_w, grad_b
