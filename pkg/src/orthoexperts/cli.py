"""Command-line interface.

Subcommands: ``decompose``, ``reconstruct``, ``dog``, ``train``, ``metrics``,
``analyze``. Exit codes: 0 success (all invariant checks passed), 1 usage
error, 2 input validation error, 3 numeric invariant failure.
"""

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import activated_neurons, overlap_report, weight_gradient_stats
from .decomposition import decompose, load_bank, pairwise_orthogonality, reconstruct, save_bank
from .exceptions import NumericInvariantError, ValidationError
from .grouping import dog_run, gradient_angles, normalize_gradients
from .layer import GATE_SCALAR, GATE_TOPK, load_layer
from .matio import read_matrix, write_matrix
from .metrics import (
    load_grid_csv,
    metric_avg_score,
    metric_backward,
    metric_forget,
    metric_forward,
    published_comparison,
)
from .tasks import build_layer, make_tasks
from .training import TrainConfig, compute_baselines, train_mixed, train_sequential

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

FORMAT_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _jsonable(value):
    """Make a value JSON-safe and deterministic (NaN/Inf become null)."""
    if isinstance(value, dict):
        return {key: _jsonable(val) for key, val in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(value):
    value = float(value)
    return repr(value) if math.isfinite(value) else "nan"


def _load_json_file(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def cmd_decompose(args):
    w = read_matrix(args.input)
    m, n = w.shape
    if args.r == "full":
        r = min(m, n) // args.k
        if r < 1:
            raise ValidationError(
                f"--r full gives rank 0 for shape {w.shape} with k={args.k}"
            )
    else:
        r = int(args.r)
    bank = decompose(w, args.k, r, args.scale)
    rebuilt = reconstruct(bank)
    denom = float(np.linalg.norm(w))
    recon_err = float(np.linalg.norm(rebuilt - w)) / denom if denom else float(
        np.linalg.norm(rebuilt - w)
    )
    report = pairwise_orthogonality(bank)
    max_offdiag = report.max_abs_off_diagonal
    if recon_err > 1e-10:
        raise NumericInvariantError(
            f"reconstruction relative error {recon_err:.3e} > 1e-10"
        )
    if max_offdiag > 1e-10:
        raise NumericInvariantError(
            f"max off-diagonal orthogonality {max_offdiag:.3e} > 1e-10"
        )
    out = Path(args.out)
    save_bank(bank, out)
    _write_json(
        out / "ortho.json",
        {
            "format_version": FORMAT_VERSION,
            "k": bank.k,
            "r": bank.r,
            "scale": bank.scale,
            "max_offdiag": max_offdiag,
            "reconstruction_rel_error": recon_err,
            "residual_fro_norm": float(np.linalg.norm(bank.residual)),
            "zero_norm_experts": list(report.zero_norm_experts),
        },
    )
    print(
        f"decomposed {m}x{n} into k={bank.k} r={bank.r}: "
        f"max_offdiag={max_offdiag:.3e} recon_err={recon_err:.3e}"
    )
    return EXIT_OK


def cmd_reconstruct(args):
    bank = load_bank(args.bank)
    write_matrix(args.out, reconstruct(bank))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_dog(args):
    raw = read_matrix(args.input)
    if raw.shape[0] != args.k * args.r:
        raise ValidationError(
            f"gradient file has {raw.shape[0]} rows; expected r*k = {args.k * args.r}"
        )
    batch = normalize_gradients(raw, args.eps_g)
    result = dog_run(
        batch,
        args.k,
        args.r,
        max_iter=args.max_iter,
        seed=args.seed,
        mode=args.mode,
        n_init=args.n_init,
    )
    angles = gradient_angles(batch, result.policy)
    new_expert = result.policy.expert_of()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "iterations": result.iterations,
        "objective_trace": list(result.objective_trace),
        "intra_deg": angles.intra_deg,
        "inter_deg": angles.inter_deg,
        "intra_expert_count": angles.intra_expert_count,
        "inter_aggregate_count": angles.inter_aggregate_count,
        "assignment": [int(e) for e in new_expert],
        "mode": result.mode,
        "seed": result.seed,
        "dead_count": int(batch.dead_mask.sum()),
    }
    if result.all_dead:
        payload["warning"] = (
            "all gradient components are below eps_g; deterministic identity "
            "fill used instead of clustering"
        )
    _write_json(out / "dog.json", payload)
    _write_csv_rows(
        out / "assignment.csv",
        ["component_index", "old_expert", "new_expert"],
        [[i, i // args.r, int(new_expert[i])] for i in range(len(new_expert))],
    )
    print(
        f"grouping finished in {result.iterations} iterations; "
        f"objective={result.objective_trace[-1]:.6f}"
    )
    return EXIT_OK


def _run_config_defaults(config):
    tasks_cfg = dict(config.get("tasks") or {})
    model_cfg = dict(config.get("model") or {})
    train_cfg = dict(config.get("train") or {})
    dog_cfg = dict(train_cfg.get("dog") or {})
    for section, name in ((tasks_cfg, "tasks"), (model_cfg, "model")):
        if not section:
            raise ValidationError(f"run config is missing the '{name}' section")
    return tasks_cfg, model_cfg, train_cfg, dog_cfg


def _run_single_seed(config, seed, out_dir):
    tasks_cfg, model_cfg, train_cfg, dog_cfg = _run_config_defaults(config)
    task_set = make_tasks(
        t=tasks_cfg["t"],
        n=tasks_cfg["n"],
        m=tasks_cfg["m"],
        rank=tasks_cfg.get("rank", 4),
        noise=tasks_cfg.get("noise", 0.05),
        seed=seed,
        train_count=tasks_cfg.get("train_count", 64),
        eval_count=tasks_cfg.get("eval_count", 64),
        rotation_strength=tasks_cfg.get("rotation_strength", 0.25),
    )
    gate_mode = model_cfg.get("gate_mode", GATE_SCALAR)
    if gate_mode not in (GATE_SCALAR, GATE_TOPK):
        raise ValidationError(f"unknown gate_mode {gate_mode!r}")

    def fresh_layer():
        return build_layer(
            task_set,
            k=model_cfg.get("k", 8),
            r=model_cfg.get("r", 4),
            scale=model_cfg.get("scale", 1.0),
            gate_mode=gate_mode,
            top_k=model_cfg.get("top_k"),
            background=model_cfg.get("background", 0.1),
        )

    config_obj = TrainConfig(
        epochs=train_cfg.get("epochs", 30),
        lr=train_cfg.get("lr", 1e-2),
        batch_size=train_cfg.get("batch_size", 8),
        dog_enabled=bool(dog_cfg.get("enabled", True)),
        regroup_interval=dog_cfg.get("interval", 1),
        assign_mode=dog_cfg.get("mode", "exact"),
        max_iter=dog_cfg.get("max_iter", 10),
        eps_g=dog_cfg.get("eps_g", 1e-12),
    )
    regime = train_cfg.get("regime", "sequential")
    layer = fresh_layer()
    if regime == "sequential":
        order = train_cfg.get("order", "seed")
        if order == "seed":
            order = [
                int(v)
                for v in np.random.default_rng([int(seed), 20]).permutation(
                    task_set.count
                )
            ]
        result = train_sequential(layer, task_set, order, config_obj, seed=seed)
    elif regime == "mixed":
        result = train_mixed(layer, task_set, config_obj, seed=seed)
    else:
        raise ValidationError(f"unknown regime {regime!r}")

    grid = result.grid
    baseline = None
    if train_cfg.get("include_baseline", True):
        baseline = compute_baselines(task_set, fresh_layer, config_obj, seed=seed)
        grid = type(grid)(a=grid.a, baseline=baseline)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv_rows(
        out_dir / "scores.csv",
        ["stage", "task", "score"],
        [
            [stage, task, _fmt(grid.a[stage, task])]
            for stage in range(grid.a.shape[0])
            for task in range(grid.a.shape[1])
        ],
    )
    _write_csv_rows(
        out_dir / "angles.csv",
        ["epoch", "intra_deg", "inter_deg"],
        [
            [epoch, _fmt(intra), _fmt(inter)]
            for epoch, intra, inter in result.epoch_angle_trace()
        ],
    )
    square = grid.a.shape[0] == grid.a.shape[1] and grid.a.shape[1] >= 2
    metrics = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "regime": regime,
        "order": [int(v) for v in order] if regime == "sequential" else None,
        "avg_score": metric_avg_score(grid),
        "forward": (
            metric_forward(grid, mode=regime) if baseline is not None else None
        ),
        "forget_as_written": metric_forget(grid, "as_written") if square else None,
        "forget_max_over_history": (
            metric_forget(grid, "max_over_history") if square else None
        ),
        "backward": metric_backward(grid) if square else None,
        "baseline": None if baseline is None else [float(b) for b in baseline],
    }
    _write_json(out_dir / "metrics.json", metrics)
    return metrics


def cmd_train(args):
    config = _load_json_file(args.config)
    out = Path(args.out)
    if "seeds" in config:
        seeds = [int(s) for s in config["seeds"]]
        jobs = max(1, int(args.jobs))
        targets = [(seed, out / f"seed_{seed}") for seed in seeds]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [
                    pool.submit(_run_single_seed, config, seed, path)
                    for seed, path in targets
                ]
                for future in futures:
                    future.result()
        else:
            for seed, path in targets:
                _run_single_seed(config, seed, path)
        print(f"trained {len(seeds)} seeds into {out}")
    else:
        seed = int(config.get("seed", 0))
        metrics = _run_single_seed(config, seed, out)
        print(
            f"trained seed {seed}: avg_score={metrics['avg_score']:.4f} "
            f"(outputs in {out})"
        )
    return EXIT_OK


def cmd_metrics(args):
    baseline = None
    if args.baseline:
        baseline_matrix = read_matrix(args.baseline)
        baseline = baseline_matrix.ravel()
    grid, info = load_grid_csv(args.grid, baseline=baseline)
    square = grid.a.shape[0] == grid.a.shape[1] and grid.a.shape[1] >= 2
    payload = {
        "format_version": FORMAT_VERSION,
        "avg_score": metric_avg_score(grid),
        "forward": (
            metric_forward(grid, mode=args.mode) if baseline is not None else None
        ),
        "forget_as_written": metric_forget(grid, "as_written") if square else None,
        "forget_max_over_history": (
            metric_forget(grid, "max_over_history") if square else None
        ),
        "backward": metric_backward(grid) if square else None,
    }
    published = info.get("published")
    if args.published_forget is not None:
        published = dict(published or {})
        published["forget"] = args.published_forget
    if published and square:
        payload["published_comparison"] = published_comparison(grid, published)
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args):
    layer = load_layer(args.model)
    config = _load_json_file(args.tasks)
    tasks_cfg = dict(config.get("tasks") or {})
    if not tasks_cfg:
        raise ValidationError("tasks config is missing the 'tasks' section")
    seed = int(config.get("seed", 0))
    task_set = make_tasks(
        t=tasks_cfg["t"],
        n=tasks_cfg["n"],
        m=tasks_cfg["m"],
        rank=tasks_cfg.get("rank", 4),
        noise=tasks_cfg.get("noise", 0.05),
        seed=seed,
        train_count=tasks_cfg.get("train_count", 64),
        eval_count=tasks_cfg.get("eval_count", 64),
        rotation_strength=tasks_cfg.get("rotation_strength", 0.25),
    )
    if task_set.count < 2:
        raise ValidationError("analysis needs at least 2 tasks")
    fisher_units = []
    mean_grads = []
    activation_masks = []
    for task in task_set.tasks:
        fisher_w, mean_grad = weight_gradient_stats(layer, task.x_train, task.y_train)
        fisher_units.append(fisher_w.sum(axis=1))
        mean_grads.append(mean_grad)
        activation_masks.append(activated_neurons(layer, task.x_train, args.eps))
    report = overlap_report(
        np.asarray(fisher_units), keep_fraction=args.keep, mean_grads=mean_grads
    )
    activation_counts = np.asarray(activation_masks).sum(axis=0)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "analysis.json",
        {
            "format_version": FORMAT_VERSION,
            "tasks": task_set.count,
            "keep_fraction": args.keep,
            "eps": args.eps,
            "unit_task_counts": report.unit_task_counts,
            "histogram": report.histogram,
            "positive_counts": report.positive_counts,
            "negative_counts": report.negative_counts,
            "activated_counts": activation_counts,
        },
    )
    _write_csv_rows(
        out / "units.csv",
        ["unit", "selected_task_count", "positive_tasks", "negative_tasks", "activated_tasks"],
        [
            [
                i,
                int(report.unit_task_counts[i]),
                int(report.positive_counts[i]),
                int(report.negative_counts[i]),
                int(activation_counts[i]),
            ]
            for i in range(len(report.unit_task_counts))
        ],
    )
    print(f"analysis written to {out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(
        prog="orthoexperts",
        description=(
            "Orthogonal low-rank expert decomposition with dynamic "
            "gradient-driven regrouping"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split a matrix into an expert bank")
    p.add_argument("input", help="input matrix (.bmat or .csv)")
    p.add_argument("--k", type=int, default=8, help="number of experts")
    p.add_argument("--r", default="4", help="rank per expert, or 'full'")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", required=True, help="output bank directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("reconstruct", help="rebuild the matrix from a bank")
    p.add_argument("bank", help="bank directory")
    p.add_argument("--out", required=True, help="output matrix (.bmat or .csv)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("dog", help="group rank-1 gradients into balanced experts")
    p.add_argument("input", help="gradient matrix, r*k rows (.bmat or .csv)")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--mode", choices=("exact", "greedy"), default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=10)
    p.add_argument("--eps-g", type=float, default=1e-12)
    p.add_argument("--n-init", type=int, default=10, help="pipeline restarts")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_dog)

    p = sub.add_parser("train", help="run a synthetic multi-task experiment")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="compute metrics from a score grid CSV")
    p.add_argument("grid", help="grid CSV (stages x tasks)")
    p.add_argument("--baseline", help="baseline CSV (one row of task scores)")
    p.add_argument("--mode", choices=("sequential", "mixed"), default="sequential")
    p.add_argument(
        "--published-forget",
        type=float,
        default=None,
        help="published forget value to compare both variants against",
    )
    p.add_argument("--out", help="write metrics JSON here instead of stdout")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("analyze", help="cross-task importance/activation overlap")
    p.add_argument("model", help="layer directory (bank + layer.json)")
    p.add_argument("--tasks", required=True, help="tasks config JSON")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--keep", type=float, default=0.2)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    return parser


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericInvariantError as exc:
        print(f"numeric invariant violated: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None):
    return run(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
