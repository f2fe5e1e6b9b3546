"""Experiment command line: train, eval, sweep, synthetic, bound-check, export-gradients.

Exit codes: 0 success, 1 validation error, 2 resource-guard refusal,
3 runtime numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import losses as losses_mod
from . import theory as theory_mod
from . import training as training_mod
from .attacks import analytic_linear_attack_batch
from .config import DEFAULTS, RunManifest, resolve
from .errors import (
    CheckpointError,
    ConfigError,
    IdxError,
    NumericError,
    SizeGuardError,
)
from .model import ModelSpec, forward, init_params, param_gradient

FRONT_HEADER = ["method", "knob", "std_acc", "adv_acc", "dominated"]


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; remap to a validation error
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "sweep", "synthetic", "bound-check", "export-gradients"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file (key = value lines, or a manifest .json)")
        p.add_argument("--out", dest="out_dir", default=None, help="output directory")
        p.add_argument("--data", dest="data_dir", default=None, help="data directory")
        for key in DEFAULTS:
            if key in ("out_dir", "data_dir"):
                continue
            p.add_argument(f"--{key}", dest=key, type=str, default=None)
    return parser


def _load_datasets(resolved: dict):
    """Build (train, eval) datasets per config; eval may equal train."""
    if resolved["dataset"] == "blobs":
        train = data_mod.synthetic_blobs(
            resolved["seed"], resolved["blob_n"], resolved["blob_dim"], resolved["blob_sep"]
        )
        test = data_mod.synthetic_blobs(
            resolved["seed"] + 1, resolved["blob_n"], resolved["blob_dim"], resolved["blob_sep"]
        )
    elif resolved["dataset"] == "idx":
        root = Path(resolved["data_dir"] or ".")
        train_images = root / resolved["train_images"]
        train_labels = root / resolved["train_labels"]
        if not (train_images.exists() and train_labels.exists()):
            raise ConfigError(f"missing data files under {root}")
        train = data_mod.load_idx(train_images, train_labels)
        test_images = root / resolved["test_images"]
        test_labels = root / resolved["test_labels"]
        test = None
        if test_images.exists() and test_labels.exists():
            test = data_mod.load_idx(test_images, test_labels)
    else:
        raise ConfigError(f"config field 'dataset': unknown dataset {resolved['dataset']!r}")

    if resolved["class_a"] != "" or resolved["class_b"] != "":
        if resolved["class_a"] == "" or resolved["class_b"] == "":
            raise ConfigError("class_a and class_b must be set together")
        a, b = int(resolved["class_a"]), int(resolved["class_b"])
        pad = resolved["pad_to"] or 32
        train = data_mod.select_binary_task(train, a, b, pad_to=pad)
        if test is not None:
            test = data_mod.select_binary_task(test, a, b, pad_to=pad)
    elif resolved["pad_to"]:
        train = data_mod.pad_images(train, resolved["pad_to"])
        if test is not None:
            test = data_mod.pad_images(test, resolved["pad_to"])

    if resolved["limit"]:
        train = train.subset(resolved["limit"])
    return train, test


def _model_spec_for(resolved: dict, train_ds) -> ModelSpec:
    labels = np.unique(train_ds.labels)
    binary = set(labels.tolist()) <= {-1, 1}
    if binary:
        out_dim, head = 1, "single_logit"
    else:
        out_dim, head = int(labels.max()) + 1, "multi_logit"
    dims = [train_ds.dim] + list(resolved["hidden_dims"]) + [out_dim]
    try:
        return ModelSpec(tuple(dims), activation=resolved["activation"], output_head=head)
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}") from exc


def _run_meta(resolved: dict) -> dict:
    method = resolved["method"]
    return {
        "run_id": resolved["run_id"],
        "method": method,
        "lambda": resolved["lambda"] if method == "vanilla_at" else None,
        "gamma": resolved["gamma"] if method == "ca_at" else None,
        "delta": resolved["delta"],
    }


def _execute_training(resolved: dict):
    """Train per config, write the run's artifacts, return (manifest, records)."""
    t0 = time.perf_counter()
    train_ds, test_ds = _load_datasets(resolved)
    spec = _model_spec_for(resolved, train_ds)
    cfg = config_mod.train_config_from(resolved, spec.output_head)
    model = init_params(spec, resolved["seed"])
    try:
        result = training_mod.train(model, train_ds, cfg, eval_data=test_ds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    run_dir = Path(resolved["out_dir"]) / resolved["run_id"]
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.csv"
    checkpoint_path = run_dir / "model.caat"
    data_mod.write_metrics_csv(metrics_path, result.records, _run_meta(resolved))
    data_mod.write_checkpoint(checkpoint_path, result.model)
    (run_dir / "config.resolved").write_text(config_mod.config_snapshot_text(resolved))

    manifest = RunManifest(
        run_id=resolved["run_id"],
        config=resolved,
        artifacts={
            "metrics_csv": str(metrics_path),
            "checkpoint": str(checkpoint_path),
            "config_resolved": str(run_dir / "config.resolved"),
        },
        deviations=config_mod.deviations_from(resolved),
        duration_s=time.perf_counter() - t0,
    )
    manifest.write(run_dir / "manifest.json")
    return manifest, result.records


def cmd_train(resolved: dict) -> int:
    manifest, records = _execute_training(resolved)
    final = records[-1]
    print(
        f"run {manifest.run_id} method={resolved['method']} epochs={len(records)} "
        f"std_acc={final.std_acc:.4f} adv_acc={final.adv_acc:.4f} "
        f"-> {manifest.artifacts['metrics_csv']}"
    )
    return 0


def _load_model(resolved: dict):
    path = resolved["checkpoint"]
    if not path:
        raise ConfigError("config field 'checkpoint': a checkpoint path is required")
    return data_mod.read_checkpoint(path, activation=resolved["activation"])


def _eval_split(resolved: dict):
    train_ds, test_ds = _load_datasets(resolved)
    if resolved["split"] == "train":
        return train_ds
    return test_ds if test_ds is not None else train_ds


def cmd_eval(resolved: dict) -> int:
    model = _load_model(resolved)
    ds = _eval_split(resolved)
    loss = config_mod.loss_kind_from(resolved, model.spec.output_head)
    attack = config_mod.attack_spec_from(resolved)
    std = training_mod.evaluate(model, ds, None, loss, seed=resolved["seed"],
                                limit=resolved["eval_limit"])
    adv = training_mod.evaluate(model, ds, attack, loss, seed=resolved["seed"],
                                limit=resolved["eval_limit"])
    print(json.dumps({"std_acc": std, "adv_acc": adv, "n": len(ds),
                      "attack": attack.family, "delta": attack.delta}))
    return 0


def mark_dominated(rows: list[dict]) -> None:
    """Pairwise Pareto scan: dominated iff some other row is >= on both
    accuracies and strictly better on one."""
    for row in rows:
        row["dominated"] = 0
        for other in rows:
            if other is row:
                continue
            ge = other["std_acc"] >= row["std_acc"] and other["adv_acc"] >= row["adv_acc"]
            strict = other["std_acc"] > row["std_acc"] or other["adv_acc"] > row["adv_acc"]
            if ge and strict:
                row["dominated"] = 1
                break


def _sweep_point(resolved_point: dict) -> dict:
    manifest, records = _execute_training(resolved_point)
    final = records[-1]
    knob = resolved_point["lambda"] if resolved_point["method"] == "vanilla_at" else resolved_point["gamma"]
    return {
        "method": resolved_point["method"],
        "knob": float(knob),
        "std_acc": final.std_acc,
        "adv_acc": final.adv_acc,
        "run_id": manifest.run_id,
    }


def _front_svg(path, rows: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for method, marker, color in (("vanilla_at", "o", "tab:blue"), ("ca_at", "^", "tab:red")):
        pts = [r for r in rows if r["method"] == method]
        if pts:
            ax.scatter([r["std_acc"] for r in pts], [r["adv_acc"] for r in pts],
                       marker=marker, color=color, label=method)
            for r in pts:
                ax.annotate(f"{r['knob']:g}", (r["std_acc"], r["adv_acc"]), fontsize=7)
    ax.set_xlabel("standard accuracy")
    ax.set_ylabel("adversarial accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_sweep(resolved: dict) -> int:
    lambda_grid = resolved["lambda_grid"]
    gamma_grid = resolved["gamma_grid"]
    if not lambda_grid and not gamma_grid:
        raise ConfigError("sweep needs a nonempty lambda_grid or gamma_grid")
    points = []
    for lam in lambda_grid:
        p = dict(resolved, method="vanilla_at")
        p["lambda"] = float(lam)
        points.append(p)
    for gamma in gamma_grid:
        p = dict(resolved, method="ca_at")
        p["gamma"] = float(gamma)
        points.append(p)
    for p in points:
        p["run_id"] = config_mod.run_digest(p)

    rows, failures = [], []
    workers = max(1, resolved["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_point, p) for p in points]
            for p, fut in zip(points, futures):
                try:
                    rows.append(fut.result())
                except Exception as exc:  # keep remaining points alive
                    failures.append((p["method"], exc))
    else:
        for p in points:
            try:
                rows.append(_sweep_point(p))
            except Exception as exc:
                failures.append((p["method"], exc))
    for method, exc in failures:
        print(f"sweep point failed ({method}): {exc}", file=sys.stderr)
    if not rows:
        raise ConfigError("every sweep point failed")

    rows.sort(key=lambda r: (r["method"] != "vanilla_at", r["knob"]))
    mark_dominated(rows)
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    front_path = out_dir / "front.csv"
    with open(front_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(FRONT_HEADER)
        for r in rows:
            writer.writerow([r["method"], repr(r["knob"]), repr(r["std_acc"]),
                             repr(r["adv_acc"]), r["dominated"]])
    if resolved["svg"]:
        _front_svg(out_dir / "front.svg", rows)
    print(f"sweep: {len(rows)} points -> {front_path}")
    return 0


def _analytic_conflict_stats(model, ds, delta: float):
    """Full-dataset mean clean/adversarial gradients and their conflict."""
    from .surgery import conflict_mu

    X, Y = ds.images, ds.labels
    logits, cache = forward(model, X)
    _, G = losses_mod.pointwise_loss_grad(losses_mod.LossKind.bce(), logits, Y)
    g_c = param_gradient(model, cache, G)
    w = model.weights[0][0]
    X_adv = X + analytic_linear_attack_batch(w, Y, delta)
    logits_a, cache_a = forward(model, X_adv)
    _, G_a = losses_mod.pointwise_loss_grad(losses_mod.LossKind.bce(), logits_a, Y)
    g_a = param_gradient(model, cache_a, G_a)
    mu, report = conflict_mu(g_c, g_a)
    return mu, report


def cmd_synthetic(resolved: dict) -> int:
    t0 = time.perf_counter()
    if resolved["dataset"] != "idx":
        raise ConfigError("the synthetic experiment needs dataset=idx image files")
    base = dict(resolved)
    base["method"] = "vanilla_at"
    base["loss"] = "bce"
    base["attack"] = "analytic_linear"
    base["norm"] = "linf"
    base["hidden_dims"] = []
    if base["class_a"] == "" and base["class_b"] == "":
        base["class_a"], base["class_b"] = "1", "2"
    if not base["pad_to"]:
        base["pad_to"] = 32

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report_rows = []
    bound_rows = []
    for delta in base["delta_list"]:
        point = dict(base)
        point["delta"] = float(delta)
        point["run_id"] = config_mod.run_digest(point)
        manifest, records = _execute_training(point)
        model = data_mod.read_checkpoint(manifest.artifacts["checkpoint"])
        train_ds, test_ds = _load_datasets(point)
        eval_ds = test_ds if test_ds is not None else train_ds

        mu, rep = _analytic_conflict_stats(model, train_ds, point["delta"])
        attack = config_mod.attack_spec_from(point)
        loss = losses_mod.LossKind.bce()
        std = training_mod.evaluate(model, eval_ds, None, loss, seed=point["seed"])
        adv = training_mod.evaluate(model, eval_ds, attack, loss, seed=point["seed"])

        sample_bounds = []
        n_bound = min(point["bound_samples"], len(train_ds))
        # spread the audited inputs across the set, not just its head
        for i in np.linspace(0, len(train_ds) - 1, n_bound).astype(int):
            br = theory_mod.verify_bound(
                model, train_ds.images[i], int(train_ds.labels[i]), loss, attack
            )
            row = br.to_dict()
            row["sample"] = int(i)
            bound_rows.append(row)
            sample_bounds.append(br.mu_bound)
        mu_bound = max(sample_bounds) if sample_bounds else 0.0
        report_rows.append({
            "delta": point["delta"],
            "std_acc": std,
            "adv_acc": adv,
            "mu": mu,
            "norm_gc": rep.norm_gc,
            "norm_ga": rep.norm_ga,
            "one_minus_cos": 1.0 - rep.phi,
            "mu_bound": mu_bound,
            "satisfied": int(mu <= mu_bound + 1e-9),
        })

    report_path = out_dir / "synthetic_report.csv"
    with open(report_path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["delta", "std_acc", "adv_acc", "mu", "norm_gc", "norm_ga",
                  "one_minus_cos", "mu_bound", "satisfied"]
        writer.writerow(header)
        for row in report_rows:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in header])
    bounds_path = out_dir / "bound_reports.jsonl"
    with open(bounds_path, "w") as f:
        for row in bound_rows:
            f.write(json.dumps(row) + "\n")
    manifest = RunManifest(
        run_id=config_mod.run_digest(base),
        config=base,
        artifacts={"report_csv": str(report_path), "bound_jsonl": str(bounds_path)},
        deviations=config_mod.deviations_from(base),
        duration_s=time.perf_counter() - t0,
    )
    manifest.write(out_dir / "synthetic_manifest.json")
    print(f"synthetic: {len(report_rows)} deltas -> {report_path}")
    return 0


def cmd_bound_check(resolved: dict) -> int:
    model = _load_model(resolved)
    ds = _eval_split(resolved)
    loss = config_mod.loss_kind_from(resolved, model.spec.output_head)
    attack = config_mod.attack_spec_from(resolved)
    n = min(resolved["samples"], len(ds))
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "bound_checks.jsonl"
    satisfied = 0
    with open(path, "w") as f:
        for i in range(n):
            report = theory_mod.verify_bound(
                model, ds.images[i], int(ds.labels[i]), loss, attack,
                attack_seed=resolved["seed"] + i,
            )
            satisfied += int(report.satisfied)
            row = report.to_dict()
            row["sample"] = i
            f.write(json.dumps(row) + "\n")
    print(f"bound-check: {satisfied}/{n} satisfied -> {path}")
    return 0


def cmd_export_gradients(resolved: dict) -> int:
    model = _load_model(resolved)
    ds = _eval_split(resolved)
    loss = config_mod.loss_kind_from(resolved, model.spec.output_head)
    attack = config_mod.attack_spec_from(resolved)
    n = min(resolved["export_limit"], len(ds))
    X, Y = ds.images[:n], ds.labels[:n]
    from .attacks import perturb_batch

    X_adv = perturb_batch(model, X, Y, loss, attack,
                          rng=np.random.default_rng(resolved["seed"]))
    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "gradients.csv"
    n_params = model.spec.param_count()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample", "label", "kind"] + [f"g{j}" for j in range(n_params)])
        for i in range(n):
            for kind, inputs in (("clean", X), ("adv", X_adv)):
                logits, cache = forward(model, inputs[i : i + 1])
                _, G = losses_mod.pointwise_loss_grad(loss, logits, Y[i : i + 1])
                g = param_gradient(model, cache, G)
                writer.writerow([i, int(Y[i]), kind] + [repr(v) for v in g])
    print(f"export-gradients: {n} samples -> {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "synthetic": cmd_synthetic,
    "bound-check": cmd_bound_check,
    "export-gradients": cmd_export_gradients,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        flags = vars(args)
        overrides = {k: v for k, v in flags.items() if k in DEFAULTS and v is not None}
        resolved = resolve(flags.get("config"), overrides)
        return COMMANDS[args.command](resolved)
    except (ConfigError, IdxError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SizeGuardError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
