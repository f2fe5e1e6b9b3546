"""Gradient surgery: conflict measurement and cone projection.

The conflict between a clean-loss gradient g_c and an adversarial-loss
gradient g_a is scored as mu = |g_c| * |g_a| * (1 - cos(g_c, g_a)). The
conflict-aware combiner keeps g_a's component orthogonal to g_c and adds just
enough of g_c that the result sits at angle arccos(gamma) from g_c.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ParamVector

ZERO_NORM_EPS = 1e-12
DEGENERATE_RATIO = 1e-3
GAMMA_CAP = 1.0 - 1e-6

BRANCH_PROJECTED = "projected"
BRANCH_STANDARD = "standard_only"
BRANCH_FALLBACK = "fallback_degenerate"


@dataclass
class ConflictReport:
    """Per-pair conflict telemetry; ``branch`` is set by the projector only."""

    norm_gc: float
    norm_ga: float
    phi: float
    mu: float
    lambda_star: float | None = None
    branch: str | None = None


def _check_pair(g_c: np.ndarray, g_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g_c = np.asarray(g_c, dtype=np.float64)
    g_a = np.asarray(g_a, dtype=np.float64)
    if g_c.ndim != 1 or g_a.ndim != 1 or g_c.shape != g_a.shape:
        raise ValueError("gradient vectors must be 1-d and of equal length")
    return g_c, g_a


def cosine_similarity(g_c: ParamVector, g_a: ParamVector) -> float:
    """Cosine of the angle between two gradients, clamped to [-1, 1].

    A vanished gradient carries no directional information, so if either norm
    is below 1e-12 the pair is treated as aligned and 1.0 is returned.
    """
    g_c, g_a = _check_pair(g_c, g_a)
    nc = float(np.linalg.norm(g_c))
    na = float(np.linalg.norm(g_a))
    if nc < ZERO_NORM_EPS or na < ZERO_NORM_EPS:
        return 1.0
    if np.array_equal(g_c, g_a):
        return 1.0
    return float(np.clip(float(g_c @ g_a) / (nc * na), -1.0, 1.0))


def conflict_mu(g_c: ParamVector, g_a: ParamVector) -> tuple[float, ConflictReport]:
    """Conflict score |g_c| * |g_a| * (1 - cos(g_c, g_a)) plus a telemetry row."""
    g_c, g_a = _check_pair(g_c, g_a)
    nc = float(np.linalg.norm(g_c))
    na = float(np.linalg.norm(g_a))
    phi = cosine_similarity(g_c, g_a)
    mu = nc * na * (1.0 - phi)
    return mu, ConflictReport(norm_gc=nc, norm_ga=na, phi=phi, mu=mu)


def combine_vanilla(g_c: ParamVector, g_a: ParamVector, lam: float) -> ParamVector:
    """Fixed-weight blend (1 - lam) * g_c + lam * g_a."""
    g_c, g_a = _check_pair(g_c, g_a)
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    return (1.0 - lam) * g_c + lam * g_a


def lambda_star(norm_gc: float, norm_ga: float, phi: float, gamma: float) -> float:
    """Cone-projection coefficient on g_c.

    c = |g_a| * (gamma*sqrt(1-phi^2) - phi*sqrt(1-gamma^2)) / (|g_c| * sqrt(1-gamma^2))

    Positive for phi < gamma, exactly zero at phi = gamma.
    """
    if not (norm_gc > 0.0 and norm_ga > 0.0):
        raise ValueError("norms must be positive")
    if not (-1.0 <= phi <= gamma < 1.0):
        raise ValueError("requires phi <= gamma < 1")
    if gamma <= -1.0:
        raise ValueError("gamma = -1 makes the projection undefined")
    sin_phi = np.sqrt(1.0 - phi * phi)
    sin_gamma = np.sqrt(1.0 - gamma * gamma)
    return float(norm_ga * (gamma * sin_phi - phi * sin_gamma) / (norm_gc * sin_gamma))


def project_conflict_aware(
    g_c: ParamVector, g_a: ParamVector, gamma: float
) -> tuple[ParamVector, ConflictReport]:
    """Conflict-aware combination of a clean and an adversarial gradient.

    If cos(g_a, g_c) already exceeds gamma the clean gradient is returned
    untouched. Otherwise g_a is rotated toward g_c by adding lambda_star *
    g_c, which lands the result on the cone at angle arccos(gamma) around g_c
    while preserving g_a's component orthogonal to g_c. Near-antiparallel
    pairs would collapse to (almost) zero, so results shorter than
    1e-3 * |g_c|, and pairs with a vanished side, fall back to g_c.
    """
    g_c, g_a = _check_pair(g_c, g_a)
    if not (np.all(np.isfinite(g_c)) and np.all(np.isfinite(g_a))):
        raise ValueError("non-finite gradient inputs")
    if not (-1.0 <= gamma <= 1.0):
        raise ValueError("gamma must lie in [-1, 1]")
    gamma = min(float(gamma), GAMMA_CAP)

    nc = float(np.linalg.norm(g_c))
    na = float(np.linalg.norm(g_a))
    phi = cosine_similarity(g_c, g_a)
    mu = nc * na * (1.0 - phi)
    report = ConflictReport(norm_gc=nc, norm_ga=na, phi=phi, mu=mu)

    if nc < ZERO_NORM_EPS or na < ZERO_NORM_EPS:
        report.branch = BRANCH_FALLBACK
        return g_c.copy(), report
    if phi > gamma:
        report.branch = BRANCH_STANDARD
        return g_c.copy(), report
    if phi <= -1.0 + 1e-12:
        # exactly antiparallel: every combination is collinear with g_c, no
        # point on the cone exists (and gamma = -1 would divide by zero)
        report.branch = BRANCH_FALLBACK
        return g_c.copy(), report

    coeff = lambda_star(nc, na, phi, gamma)
    g_star = g_a + coeff * g_c
    if float(np.linalg.norm(g_star)) < DEGENERATE_RATIO * nc:
        report.branch = BRANCH_FALLBACK
        return g_c.copy(), report
    report.branch = BRANCH_PROJECTED
    report.lambda_star = coeff
    return g_star, report
