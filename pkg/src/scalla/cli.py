"""Command-line experiment driver: train-map, fit-surrogate, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 configuration or data error.
Each command echoes its fully resolved configuration into the output
directory before computing, and takes a lockfile so one experiment
directory is owned by one process at a time.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from .checkpoint import (
    load_map_checkpoint,
    load_surrogate_checkpoint,
    save_map_checkpoint,
    save_surrogate_checkpoint,
)
from .config import ConfigError, ExperimentConfig, load_config, write_resolved_config
from .data import IdxBadMagicError, IdxCountMismatchError, IdxTruncatedError
from .models import ORACLE_ENTRY_LIMIT, OracleScaleError, TrainingDivergedError
from .pipeline import (
    build_datasets,
    dataset_identifier,
    evaluate_method,
    exact_posterior_for,
    feature_posterior_for,
    format_report,
    report_key_values,
    resolve_sigma0,
    run_fit_surrogate,
    run_train_map,
)
from .surrogate import ConfigurationError, kernel_error

CONFIG_ERRORS = (
    ConfigError,
    ConfigurationError,
    IdxBadMagicError,
    IdxTruncatedError,
    IdxCountMismatchError,
    FileNotFoundError,
)

MAP_CHECKPOINT = "map.ckpt"


def _surrogate_checkpoint_name(biased: bool) -> str:
    return "scalla_biased.ckpt" if biased else "scalla.ckpt"


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_str = args.out or cfg.output_dir
    if not out_str:
        raise ConfigError("no output directory: pass --out or set [experiment] output_dir")
    out = Path(out_str)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _write_trace(path: Path, trace: np.ndarray) -> None:
    path.write_text("".join(f"{value!r}\n" for value in trace))


def cmd_train_map(args) -> int:
    cfg, out = _load(args)
    write_resolved_config(cfg, out, "train-map")
    splits = build_datasets(cfg)
    spec, result = run_train_map(cfg, splits)
    save_map_checkpoint(
        out / MAP_CHECKPOINT,
        spec,
        result.params,
        cfg.seed,
        {
            "train_dataset": dataset_identifier(cfg, "train"),
            "steps": cfg.map.steps,
            "final_loss": float(result.loss_trace[-1]) if len(result.loss_trace) else None,
            "sigma0_map": cfg.map.sigma0,
        },
    )
    _write_trace(out / "map_trace.txt", result.loss_trace)
    print(f"wrote {out / MAP_CHECKPOINT}")
    return 0


def cmd_fit_surrogate(args) -> int:
    cfg, out = _load(args)
    write_resolved_config(cfg, out, "fit-surrogate")
    splits = build_datasets(cfg)
    map_path = Path(args.map_checkpoint) if args.map_checkpoint else out / MAP_CHECKPOINT
    if not map_path.exists():
        raise ConfigError(f"MAP checkpoint not found: {map_path}")
    ckpt = load_map_checkpoint(map_path)
    biased = cfg.surrogate.biased
    if biased and "context" not in splits:
        raise ConfigurationError("biased surrogate training requires a context dataset")
    sigma0 = resolve_sigma0(cfg, ckpt.spec, ckpt.params, splits["train"])
    result = run_fit_surrogate(cfg, ckpt.spec, ckpt.params, splits, biased)
    metadata = {
        "sigma0": sigma0,
        "steps": cfg.surrogate.steps,
        "final_loss": float(result.loss_trace[-1]) if len(result.loss_trace) else None,
    }
    if ckpt.spec.output_dim * ckpt.spec.param_count <= ORACLE_ENTRY_LIMIT:
        held_out = splits["test"].inputs[: min(32, len(splits["test"]))]
        metadata["kernel_error"] = kernel_error(ckpt.spec, ckpt.params, result.surrogate, held_out)
    name = _surrogate_checkpoint_name(biased)
    save_surrogate_checkpoint(
        out / name,
        result.surrogate,
        cfg.seed,
        str(map_path.name),
        biased,
        dataset_identifier(cfg, "context"),
        metadata,
    )
    _write_trace(out / f"{name.removesuffix('.ckpt')}_trace.txt", result.loss_trace)
    print(f"wrote {out / name} (sigma0 = {sigma0!r})")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out = _load(args)
    write_resolved_config(cfg, out, "evaluate")
    methods = (
        tuple(m.strip() for m in args.methods.split(",") if m.strip())
        if args.methods
        else cfg.evaluation.methods
    )
    for method in methods:
        if method not in ("map", "lla-exact", "scalla", "scalla-biased"):
            raise ConfigError(f"unknown method {method!r}")
    splits = build_datasets(cfg)
    map_path = Path(args.map_checkpoint) if args.map_checkpoint else out / MAP_CHECKPOINT
    if not map_path.exists():
        raise ConfigError(f"MAP checkpoint not found: {map_path}")
    ckpt = load_map_checkpoint(map_path)
    spec, theta = ckpt.spec, ckpt.params

    reports = []
    for method in methods:
        if method == "map":
            reports.append(evaluate_method("map", cfg, spec, theta, splits))
        elif method == "lla-exact":
            if spec.output_dim * spec.param_count > ORACLE_ENTRY_LIMIT:
                raise ConfigError(
                    "lla-exact needs the explicit Jacobian oracle, but C*P = "
                    f"{spec.output_dim * spec.param_count} exceeds {ORACLE_ENTRY_LIMIT}; "
                    "use the scalla surrogate methods instead"
                )
            sigma0 = resolve_sigma0(cfg, spec, theta, splits["train"])
            posterior = exact_posterior_for(cfg, spec, theta, splits["train"], sigma0)
            reports.append(evaluate_method("lla-exact", cfg, spec, theta, splits, posterior))
        else:
            biased = method == "scalla-biased"
            surr_path = out / _surrogate_checkpoint_name(biased)
            if not surr_path.exists():
                raise ConfigError(f"surrogate checkpoint not found: {surr_path}")
            surr_ckpt = load_surrogate_checkpoint(surr_path)
            sigma0 = float(surr_ckpt.metadata["sigma0"])
            posterior = feature_posterior_for(
                cfg, spec, theta, surr_ckpt.surrogate, splits["train"], sigma0
            )
            reports.append(evaluate_method(method, cfg, spec, theta, splits, posterior))

    table = format_report(reports)
    (out / "report.txt").write_text(table)
    (out / "report.kv").write_text(report_key_values(reports))
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalla", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train-map", cmd_train_map),
        ("fit-surrogate", cmd_fit_surrogate),
        ("evaluate", cmd_evaluate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (INI)")
        p.add_argument("--out", default=None, help="experiment output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name != "train-map":
            p.add_argument("--map-checkpoint", default=None, help="path to map.ckpt")
        if name == "evaluate":
            p.add_argument("--methods", default=None, help="comma list of methods to evaluate")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    lock = None
    try:
        out_hint = args.out
        if out_hint is None:
            cfg = load_config(args.config)
            out_hint = cfg.output_dir
        if out_hint:
            Path(out_hint).mkdir(parents=True, exist_ok=True)
            lock = FileLock(Path(out_hint) / ".lock")
            lock.acquire(timeout=0.0)
        return args.fn(args)
    except Timeout:
        print(f"error: output directory {out_hint} is locked by another run", file=sys.stderr)
        return 1
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, OracleScaleError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if lock is not None and lock.is_locked:
            lock.release()


if __name__ == "__main__":
    sys.exit(main())
