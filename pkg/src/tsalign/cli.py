"""Command-line entry point.

Commands: synth, align, finetune, evaluate, gradcheck, inspect-checkpoint.
Configuration is one JSON document; flags override file values which override
defaults. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import torch

from .checkpoint import describe
from .config import ConfigError, RunConfig, load_run_config
from .data import save_csv, sliding_windows
from .evaluation import (
    EvalError,
    HorizonMetrics,
    MetricsReport,
    evaluate_forecast,
    multi_horizon_protocol,
)
from .train import (
    TrainingError,
    build_alignment_modules,
    load_forecast_model,
    run_alignment,
    run_gradient_check,
    seed_all,
)

logger = logging.getLogger("tsalign")


def _parse_horizons(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad horizons list {text!r}: expected comma-separated integers") from exc


def _parse_set_values(pairs: list[str]) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw  # bare strings are fine unquoted
    return overrides


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out_dir", None),
        "data_path": getattr(args, "data", None),
        "t_in": getattr(args, "t_in", None),
        "patch_len": getattr(args, "patch_len", None),
        "stride": getattr(args, "stride", None),
        "split.few_shot_fraction": getattr(args, "few_shot", None),
    }
    if getattr(args, "horizons", None):
        overrides["horizons"] = _parse_horizons(args.horizons)
    overrides.update(_parse_set_values(getattr(args, "set", None) or []))
    return load_run_config(args.config, overrides)


def _out_dirs(run: RunConfig) -> dict[str, Path]:
    root = Path(run.out_dir)
    dirs = {name: root / name for name in ("checkpoints", "reports", "logs")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    run = _config_from_args(args)
    if run.synth is None:
        raise ConfigError("synth command needs a synth section in the config")
    series = run.load_series()
    out = Path(args.out) if args.out else Path(run.out_dir) / "data" / "synthetic.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(series, out)
    print(out)
    return 0


def cmd_align(args: argparse.Namespace) -> int:
    run = _config_from_args(args)
    prepared = run.prepare()  # validates the data source before any output
    dirs = _out_dirs(run)
    seed_all(run.seed)
    encoder, backbone, head = build_alignment_modules(
        run.encoder_config(),
        run.backbone,
        lora_r=run.lora_r,
        lora_alpha=run.lora_alpha,
        seed=run.seed,
    )
    print(f"train rows: {prepared.train_rows}")
    result = run_alignment(
        backbone,
        encoder,
        head,
        prepared.train,
        run.patching(),
        run.align_train,
        policy=run.policy(),
        out_path=dirs["checkpoints"] / "alignment.ckpt",
        log_path=dirs["logs"] / "align.jsonl",
    )
    print(f"final loss: {result.final_loss:.6f} after {result.steps} steps")
    print(result.checkpoint_path)
    return 0


def _alignment_checkpoint_path(args: argparse.Namespace, run: RunConfig) -> Path | None:
    if run.transfer == "none":
        return None
    path = (
        Path(args.alignment_checkpoint)
        if args.alignment_checkpoint
        else Path(run.out_dir) / "checkpoints" / "alignment.ckpt"
    )
    if not path.exists():
        raise ConfigError(f"alignment checkpoint not found: {path} (transfer is required)")
    return path


def cmd_finetune(args: argparse.Namespace) -> int:
    run = _config_from_args(args)
    prepared = run.prepare()
    ckpt = _alignment_checkpoint_path(args, run)
    dirs = _out_dirs(run)
    seed_all(run.seed)
    print(f"train rows: {prepared.train_rows}")
    report = multi_horizon_protocol(
        run, prepared, alignment_checkpoint=ckpt, out_dir=run.out_dir
    )
    report_path = dirs["reports"] / "metrics.json"
    report_path.write_text(report.to_json() + "\n")
    print(report.to_text())
    print(report_path)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = _config_from_args(args)
    ckpt_path = (
        Path(args.checkpoint)
        if args.checkpoint
        else Path(run.out_dir) / "checkpoints" / f"forecast_h{run.horizons[0]}.ckpt"
    )
    if not ckpt_path.exists():
        raise ConfigError(f"forecast checkpoint not found: {ckpt_path}")
    prepared = run.prepare()
    model = load_forecast_model(ckpt_path)
    windows = sliding_windows(prepared.test, model.patching.t_in, model.t_out)
    scaler = prepared.scaler if run.metric_scale == "raw" else None
    mse_v, mae_v = evaluate_forecast(model, windows, scaler=scaler)
    report = MetricsReport.from_rows(
        [HorizonMetrics(t_out=model.t_out, mse=mse_v, mae=mae_v, n_windows=len(windows))],
        dataset=run.dataset_tag(),
        few_shot_fraction=run.split.few_shot_fraction,
        t_in=model.patching.t_in,
        metric_scale=run.metric_scale,
    )
    print(report.to_json())
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = _config_from_args(args)
    reports = run_gradient_check(
        policy=run.policy(),
        lora_r=run.lora_r,
        lora_alpha=run.lora_alpha,
        eps=args.eps,
        seed=run.seed,
    )
    ok = True
    for stage, report in reports.items():
        print(f"{stage}: max relative error {report.max_rel_err:.3e} over "
              f"{len(report.entries)} tensors (eps {report.eps:g})")
        for entry in report.failures():
            ok = False
            print(f"  FAIL {entry.name}: {entry.max_rel_err:.3e}")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 1
    return 0


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    print(describe(path))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out-dir", dest="out_dir", help="override the output directory")
    parser.add_argument("--data", help="override the CSV data path")
    parser.add_argument("--t-in", dest="t_in", type=int, help="look-back length")
    parser.add_argument("--patch-len", dest="patch_len", type=int, help="patch length")
    parser.add_argument("--stride", type=int, help="patch stride")
    parser.add_argument("--horizons", help="comma-separated prediction lengths")
    parser.add_argument(
        "--few-shot", dest="few_shot", type=float,
        help="fraction of the training split to keep (chronological prefix)",
    )
    parser.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override any config field by dotted path, e.g. backbone.l=2",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsalign",
        description="Two-stage fine-tuning pipeline for multivariate time-series forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic series as CSV")
    _add_common(p)
    p.add_argument("--out", help="output CSV path (default <out_dir>/data/synthetic.csv)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("align", help="stage 1: next-patch alignment training")
    _add_common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("finetune", help="stage 2: LP-FT forecasting per horizon")
    _add_common(p)
    p.add_argument("--alignment-checkpoint", help="stage-1 checkpoint to start from")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a forecast checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", help="forecast checkpoint path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of both stage losses")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-4, help="perturbation size")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
