"""Classification losses and their exact gradients with respect to logits.

Binary losses use +/-1 labels on a single logit; multiclass losses use class
indices. The pair losses (trades, clp) couple clean and adversarial logits
and return one gradient per side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOSS_KINDS = ("bce", "softmax_ce", "trades", "clp")


@dataclass(frozen=True)
class LossKind:
    """Loss selector; ``beta`` weighs the pairing term of trades/clp."""

    kind: str
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not (np.isfinite(self.beta) and self.beta >= 0.0):
            raise ValueError("beta must be finite and >= 0")

    @classmethod
    def bce(cls) -> "LossKind":
        return cls("bce")

    @classmethod
    def softmax_ce(cls) -> "LossKind":
        return cls("softmax_ce")

    @classmethod
    def trades(cls, beta: float = 6.0) -> "LossKind":
        return cls("trades", beta)

    @classmethod
    def clp(cls, beta: float = 1.0) -> "LossKind":
        return cls("clp", beta)

    @property
    def is_pair(self) -> bool:
        return self.kind in ("trades", "clp")


def sigmoid(t):
    # tanh form is stable for large |t|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=np.float64)))


def softplus(t):
    return np.logaddexp(0.0, np.asarray(t, dtype=np.float64))


def _check_binary_label(y) -> float:
    y = float(y)
    if y not in (-1.0, 1.0):
        raise ValueError(f"binary label must be +1 or -1, got {y}")
    return y


def bce_loss(logit: float, y: int) -> tuple[float, float]:
    """Binary cross-entropy on a +/-1 label: log(1 + exp(-y*logit))."""
    y = _check_binary_label(y)
    t = -y * float(logit)
    loss = float(softplus(t))
    grad = float(-y * sigmoid(t))
    return loss, grad


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and gradient (softmax - onehot) for one sample."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("logits must be a 1-d vector")
    label = int(label)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} logits")
    logp = _log_softmax(logits)
    loss = float(-logp[label])
    grad = np.exp(logp)
    grad[label] -= 1.0
    return loss, grad


def _kl_from_logits(logits_p: np.ndarray, logits_q: np.ndarray):
    """KL(softmax(p) || softmax(q)) with intermediates, computed in log space."""
    logp = _log_softmax(logits_p)
    logq = _log_softmax(logits_q)
    p = np.exp(logp)
    ratio = logp - logq
    kl = float(np.sum(p * ratio))
    return kl, p, np.exp(logq), ratio


def trades_pair_loss(
    logits_clean: np.ndarray, logits_adv: np.ndarray, label: int, beta: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """CE on clean logits plus beta * KL(softmax(clean) || softmax(adv)).

    Returns the loss and its exact gradients wrt each logit vector.
    """
    lc = np.asarray(logits_clean, dtype=np.float64)
    la = np.asarray(logits_adv, dtype=np.float64)
    if lc.shape != la.shape:
        raise ValueError("clean and adversarial logits must have equal lengths")
    ce, grad_ce = softmax_ce(lc, label)
    kl, p, q, ratio = _kl_from_logits(lc, la)
    loss = ce + beta * kl
    grad_clean = grad_ce + beta * p * (ratio - kl)
    grad_adv = beta * (q - p)
    return float(loss), grad_clean, grad_adv


def clp_pair_loss(
    logits_clean: np.ndarray, logits_adv: np.ndarray, label: int, beta: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """CE on adversarial logits plus beta * squared-L2 logit pairing."""
    lc = np.asarray(logits_clean, dtype=np.float64)
    la = np.asarray(logits_adv, dtype=np.float64)
    if lc.shape != la.shape:
        raise ValueError("clean and adversarial logits must have equal lengths")
    ce, grad_ce = softmax_ce(la, label)
    diff = lc - la
    loss = ce + beta * float(diff @ diff)
    grad_clean = 2.0 * beta * diff
    grad_adv = grad_ce - 2.0 * beta * diff
    return float(loss), grad_clean, grad_adv


def _check_labels_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (-1, 1))
    if bad.any():
        raise ValueError("binary labels must be +1 or -1")
    return labels.astype(np.float64)


def _check_labels_multi(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels out of range for {n_classes} classes")
    return labels


def pointwise_loss_grad(loss: LossKind, logits: np.ndarray, labels: np.ndarray):
    """Per-sample classification loss and dloss/dlogits for a batch.

    For the pair losses this is their classification term alone (CE on the
    given logits), which is what attacks maximize and evaluation scores.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be 2-d (batch x classes)")
    n, width = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError("labels must be one per sample")
    if loss.kind == "bce":
        if width != 1:
            raise ValueError("bce needs a single logit per sample")
        y = _check_labels_binary(labels)[:, None]
        t = -y * logits
        return softplus(t)[:, 0], -y * sigmoid(t)
    # softmax cross-entropy path, shared by softmax_ce / trades / clp
    lab = _check_labels_multi(labels, width)
    logp = _log_softmax(logits)
    losses = -logp[np.arange(n), lab]
    grad = np.exp(logp)
    grad[np.arange(n), lab] -= 1.0
    return losses, grad


def pair_loss_grads(loss: LossKind, logits_clean: np.ndarray, logits_adv: np.ndarray, labels: np.ndarray):
    """Batch form of the pair losses: per-sample loss, grad_clean, grad_adv."""
    if not loss.is_pair:
        raise ValueError(f"{loss.kind} is not a pair loss")
    lc = np.asarray(logits_clean, dtype=np.float64)
    la = np.asarray(logits_adv, dtype=np.float64)
    if lc.shape != la.shape or lc.ndim != 2:
        raise ValueError("pair losses need matching 2-d logit batches")
    n, width = lc.shape
    lab = _check_labels_multi(labels, width)
    rows = np.arange(n)
    if loss.kind == "trades":
        logp = _log_softmax(lc)
        logq = _log_softmax(la)
        p = np.exp(logp)
        q = np.exp(logq)
        ratio = logp - logq
        kl = np.sum(p * ratio, axis=1)
        ce = -logp[rows, lab]
        grad_ce = p.copy()
        grad_ce[rows, lab] -= 1.0
        losses = ce + loss.beta * kl
        grad_clean = grad_ce + loss.beta * p * (ratio - kl[:, None])
        grad_adv = loss.beta * (q - p)
        return losses, grad_clean, grad_adv
    # clp
    logq = _log_softmax(la)
    ce = -logq[rows, lab]
    grad_ce = np.exp(logq)
    grad_ce[rows, lab] -= 1.0
    diff = lc - la
    losses = ce + loss.beta * np.sum(diff * diff, axis=1)
    grad_clean = 2.0 * loss.beta * diff
    grad_adv = grad_ce - 2.0 * loss.beta * diff
    return losses, grad_clean, grad_adv
