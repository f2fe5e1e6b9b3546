"""Training loops: standard, fixed-weight adversarial, and conflict-aware.

Each batch computes the clean gradient, solves the inner maximization with
the configured attack, computes the adversarial gradient, combines the two
per the configured method, and applies an SGD+momentum step under the chosen
learning-rate schedule. Everything is seeded, so identical configurations
produce bitwise-identical trajectories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as losses_mod
from .attacks import AttackSpec, perturb_batch
from .data import Dataset
from .errors import NumericError
from .model import (
    ModelState,
    flatten,
    forward,
    model_from_vector,
    param_gradient,
    sgd_step,
)
from .surgery import ConflictReport, combine_vanilla, conflict_mu, project_conflict_aware

METHODS = ("standard", "vanilla_at", "ca_at")
LR_SCHEDULES = ("constant", "one_cycle")

# sub-stream tags so shuffling, attacks and evaluation draw independent noise
_SHUFFLE, _ATTACK, _EVAL = 1, 2, 3

EVAL_CHUNK = 512


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) % 2**64, *key])


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ca_at"
    lam: float = 0.5
    gamma: float = 0.8
    loss: losses_mod.LossKind = field(default_factory=losses_mod.LossKind.softmax_ce)
    attack: AttackSpec = field(default_factory=AttackSpec)
    epochs: int = 20
    batch_size: int = 128
    lr_max: float = 0.1
    momentum: float = 0.9
    lr_schedule: str = "one_cycle"
    lr_warmup_frac: float = 0.3
    lr_div: float = 25.0
    lr_floor_div: float = 1e4
    seed: int = 0
    eval_limit: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        if not (-1.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [-1, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (np.isfinite(self.lr_max) and self.lr_max > 0.0):
            raise ValueError("lr_max must be finite and > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.method == "standard" and self.loss.is_pair:
            raise ValueError("pair losses need adversarial batches; use vanilla_at or ca_at")


@dataclass
class TrainRecord:
    """One per-epoch metrics row."""

    epoch: int
    std_acc: float
    adv_acc: float
    mean_mu: float
    mean_phi: float
    mean_lambda_star: float | None
    lr: float
    branch_counts: dict


@dataclass
class EpochResult:
    model: ModelState
    velocity: np.ndarray
    record: TrainRecord
    reports: list[ConflictReport]


@dataclass
class TrainResult:
    model: ModelState
    records: list[TrainRecord]
    epoch_reports: list[list[ConflictReport]]


def one_cycle_lr(
    step: int,
    total_steps: int,
    lr_max: float,
    warmup_frac: float = 0.3,
    div: float = 25.0,
    floor_div: float = 1e4,
) -> float:
    """Linear warmup to lr_max over the first warmup fraction of steps,
    then cosine annealing down to lr_max/floor_div."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    if total_steps == 1:
        return lr_max
    warm = max(1, round(warmup_frac * total_steps))
    warm = min(warm, total_steps - 1)
    if step == warm:
        return lr_max
    lr_start = lr_max / div
    if step < warm:
        return lr_start + (lr_max - lr_start) * (step / warm)
    lr_floor = lr_max / floor_div
    t = (step - warm) / (total_steps - 1 - warm)
    return lr_floor + (lr_max - lr_floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def _scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr_max
    return one_cycle_lr(step, total_steps, cfg.lr_max,
                        cfg.lr_warmup_frac, cfg.lr_div, cfg.lr_floor_div)


def _check_model_loss(model: ModelState, loss: losses_mod.LossKind) -> None:
    head = model.spec.output_head
    if loss.kind == "bce" and head != "single_logit":
        raise ValueError("bce loss requires a single_logit head")
    if loss.kind != "bce" and head != "multi_logit":
        raise ValueError(f"{loss.kind} loss requires a multi_logit head")


def predictions(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Hard labels: sign of the logit (single_logit) or argmax (multi_logit)."""
    logits, _ = forward(model, X)
    if model.spec.output_head == "single_logit":
        return np.where(logits[:, 0] > 0.0, 1, -1).astype(np.int64)
    return np.argmax(logits, axis=1).astype(np.int64)


def evaluate(
    model: ModelState,
    data: Dataset,
    attack: AttackSpec | None,
    loss: losses_mod.LossKind,
    seed: int = 0,
    limit: int = 0,
) -> float:
    """Accuracy on (optionally attacked) inputs; deterministic given seed."""
    ds = data.subset(limit) if limit else data
    correct = 0
    for chunk_idx, start in enumerate(range(0, len(ds), EVAL_CHUNK)):
        X = ds.images[start : start + EVAL_CHUNK]
        Y = ds.labels[start : start + EVAL_CHUNK]
        if attack is not None and attack.family != "none" and attack.delta > 0.0:
            X = perturb_batch(model, X, Y, loss, attack, rng=_rng(seed, _EVAL, chunk_idx))
        correct += int(np.sum(predictions(model, X) == Y))
    return correct / len(ds)


def _batch_gradient(
    model: ModelState,
    X: np.ndarray,
    Y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    where: str,
) -> tuple[np.ndarray, ConflictReport | None]:
    logits_c, cache_c = forward(model, X)
    if not np.all(np.isfinite(logits_c)):
        raise NumericError(f"non-finite clean logits at {where}")
    if cfg.method == "standard":
        _, G = losses_mod.pointwise_loss_grad(cfg.loss, logits_c, Y)
        g_c = param_gradient(model, cache_c, G)
        if not np.all(np.isfinite(g_c)):
            raise NumericError(f"non-finite gradient at {where}")
        return g_c, None

    X_adv = perturb_batch(model, X, Y, cfg.loss, cfg.attack, rng=rng)
    logits_a, cache_a = forward(model, X_adv)
    if not np.all(np.isfinite(logits_a)):
        raise NumericError(f"non-finite adversarial logits at {where}")
    if cfg.loss.is_pair:
        _, G_c, G_a = losses_mod.pair_loss_grads(cfg.loss, logits_c, logits_a, Y)
    else:
        _, G_c = losses_mod.pointwise_loss_grad(cfg.loss, logits_c, Y)
        _, G_a = losses_mod.pointwise_loss_grad(cfg.loss, logits_a, Y)
    g_c = param_gradient(model, cache_c, G_c)
    g_a = param_gradient(model, cache_a, G_a)

    if cfg.method == "vanilla_at":
        combined = combine_vanilla(g_c, g_a, cfg.lam)
        _, report = conflict_mu(g_c, g_a)
    else:
        combined, report = project_conflict_aware(g_c, g_a, cfg.gamma)
    if not np.all(np.isfinite(combined)):
        raise NumericError(f"non-finite combined gradient at {where}")
    return combined, report


def train_epoch(
    model: ModelState,
    data: Dataset,
    cfg: TrainConfig,
    epoch_index: int,
    velocity: np.ndarray | None = None,
    eval_data: Dataset | None = None,
    total_epochs: int | None = None,
) -> EpochResult:
    """One pass over seeded-shuffled batches; returns the updated model,
    optimizer state, a metrics record, and the per-batch conflict reports."""
    _check_model_loss(model, cfg.loss)
    if len(data) == 0:
        raise ValueError("empty dataset")
    total_epochs = cfg.epochs if total_epochs is None else total_epochs
    n = len(data)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = total_epochs * n_batches

    params = flatten(model)
    if velocity is None:
        velocity = np.zeros_like(params)
    order = _rng(cfg.seed, _SHUFFLE, epoch_index).permutation(n)

    reports: list[ConflictReport] = []
    first_lr = None
    for b in range(n_batches):
        idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        work = model_from_vector(model.spec, params, model.rng_seed)
        lr = _scheduled_lr(cfg, epoch_index * n_batches + b, total_steps)
        if first_lr is None:
            first_lr = lr
        g_star, report = _batch_gradient(
            work, data.images[idx], data.labels[idx], cfg,
            _rng(cfg.seed, _ATTACK, epoch_index, b),
            where=f"epoch {epoch_index} batch {b}",
        )
        if report is not None:
            reports.append(report)
        params, velocity = sgd_step(params, g_star, velocity, lr, cfg.momentum)

    new_model = model_from_vector(model.spec, params, model.rng_seed)
    eval_ds = data if eval_data is None else eval_data
    std_acc = evaluate(new_model, eval_ds, None, cfg.loss,
                       seed=cfg.seed, limit=cfg.eval_limit)
    adv_acc = evaluate(new_model, eval_ds, cfg.attack, cfg.loss,
                       seed=cfg.seed, limit=cfg.eval_limit)

    if reports:
        mean_mu = float(np.mean([r.mu for r in reports]))
        mean_phi = float(np.mean([r.phi for r in reports]))
    else:
        mean_mu, mean_phi = 0.0, 1.0
    stars = [r.lambda_star for r in reports if r.lambda_star is not None]
    mean_star = float(np.mean(stars)) if stars else None
    counts: dict[str, int] = {}
    for r in reports:
        if r.branch is not None:
            counts[r.branch] = counts.get(r.branch, 0) + 1

    record = TrainRecord(
        epoch=epoch_index,
        std_acc=std_acc,
        adv_acc=adv_acc,
        mean_mu=mean_mu,
        mean_phi=mean_phi,
        mean_lambda_star=mean_star,
        lr=float(first_lr),
        branch_counts=counts,
    )
    return EpochResult(model=new_model, velocity=velocity, record=record, reports=reports)


def train(
    model: ModelState,
    data: Dataset,
    cfg: TrainConfig,
    eval_data: Dataset | None = None,
) -> TrainResult:
    """Run cfg.epochs epochs, threading the optimizer state through."""
    velocity = None
    records: list[TrainRecord] = []
    epoch_reports: list[list[ConflictReport]] = []
    for epoch in range(cfg.epochs):
        result = train_epoch(model, data, cfg, epoch, velocity=velocity,
                             eval_data=eval_data, total_epochs=cfg.epochs)
        model, velocity = result.model, result.velocity
        records.append(result.record)
        epoch_reports.append(result.reports)
    return TrainResult(model=model, records=records, epoch_reports=epoch_reports)
