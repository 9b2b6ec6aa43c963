"""Forecast evaluation, the multi-horizon protocol, and linear evaluation.

One alignment checkpoint feeds a separately fine-tuned model per prediction
length; the report aggregates per-horizon MSE/MAE and their plain average.
Linear evaluation probes representation quality: freeze everything, train a
fresh forecast head, and compare against the same protocol on random weights.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import FreezePolicy
from .config import RunConfig
from .data import PreparedData, Scaler, Window, invert_scaler, sliding_windows
from .train import (
    ForecastModel,
    build_forecast_modules,
    run_lp_ft,
    transfer_alignment_weights,
)

logger = logging.getLogger("tsalign.evaluation")


class EvalError(RuntimeError):
    pass


def _global_error_sums(
    model: ForecastModel,
    windows: Sequence[Window],
    scaler: Scaler | None,
    batch_size: int,
) -> tuple[float, float, int]:
    """Sum of squared and absolute errors over every element, in float64."""
    sq = 0.0
    ab = 0.0
    count = 0
    dtype = model.head.weight.dtype
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        x_in = torch.as_tensor(np.stack([w.x_in for w in chunk]), dtype=dtype)
        stamps = np.stack([w.in_timestamps for w in chunk])
        pred = model.predict(x_in, stamps).numpy().astype(np.float64)
        actual = np.stack([w.x_out for w in chunk]).astype(np.float64)
        if scaler is not None:
            pred = invert_scaler(pred, scaler)
            actual = invert_scaler(actual, scaler)
        diff = actual - pred
        sq += float(np.sum(diff * diff))
        ab += float(np.sum(np.abs(diff)))
        count += diff.size
    return sq, ab, count


def evaluate_forecast(
    model: ForecastModel,
    test_windows: Sequence[Window],
    t_out: int | None = None,
    *,
    scaler: Scaler | None = None,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Global elementwise MSE and MAE over windows, horizon steps, channels.

    Pass ``scaler`` to measure on the raw scale (predictions and targets are
    mapped back through the training scaler first); default is the
    standardized scale the model trains on.
    """
    if not test_windows:
        raise EvalError("empty test set")
    t_out = model.t_out if t_out is None else t_out
    if t_out != model.t_out:
        raise EvalError(f"horizon {t_out} does not match the model head's {model.t_out}")
    sq, ab, count = _global_error_sums(model, test_windows, scaler, batch_size)
    return sq / count, ab / count


@dataclass(frozen=True)
class HorizonMetrics:
    t_out: int
    mse: float
    mae: float
    n_windows: int


@dataclass(frozen=True)
class MetricsReport:
    """Per-horizon metrics plus their exact mean."""

    dataset: str
    few_shot_fraction: float
    t_in: int
    metric_scale: str
    horizons: tuple[HorizonMetrics, ...]
    avg_mse: float
    avg_mae: float

    def __post_init__(self):
        if not self.horizons:
            raise EvalError("a report needs at least one horizon row")
        for row in self.horizons:
            if not (math.isfinite(row.mse) and math.isfinite(row.mae)):
                raise EvalError(f"non-finite metrics for horizon {row.t_out}")
        mse_mean = sum(r.mse for r in self.horizons) / len(self.horizons)
        mae_mean = sum(r.mae for r in self.horizons) / len(self.horizons)
        if abs(mse_mean - self.avg_mse) > 1e-12 or abs(mae_mean - self.avg_mae) > 1e-12:
            raise EvalError("averaged metrics must equal the mean of the horizon rows")

    @classmethod
    def from_rows(
        cls,
        rows: Sequence[HorizonMetrics],
        *,
        dataset: str,
        few_shot_fraction: float,
        t_in: int,
        metric_scale: str,
    ) -> "MetricsReport":
        rows = tuple(rows)
        if not rows:
            raise EvalError("a report needs at least one horizon row")
        return cls(
            dataset=dataset,
            few_shot_fraction=few_shot_fraction,
            t_in=t_in,
            metric_scale=metric_scale,
            horizons=rows,
            avg_mse=sum(r.mse for r in rows) / len(rows),
            avg_mae=sum(r.mae for r in rows) / len(rows),
        )

    @property
    def n_windows_total(self) -> int:
        return sum(r.n_windows for r in self.horizons)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "few_shot_fraction": self.few_shot_fraction,
            "t_in": self.t_in,
            "metric_scale": self.metric_scale,
            "horizons": [dataclasses.asdict(r) for r in self.horizons],
            "average": {"mse": self.avg_mse, "mae": self.avg_mae},
            "n_windows_total": self.n_windows_total,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        rows = tuple(HorizonMetrics(**r) for r in doc["horizons"])
        return cls(
            dataset=doc["dataset"],
            few_shot_fraction=doc["few_shot_fraction"],
            t_in=doc["t_in"],
            metric_scale=doc["metric_scale"],
            horizons=rows,
            avg_mse=doc["average"]["mse"],
            avg_mae=doc["average"]["mae"],
        )

    def to_text(self) -> str:
        lines = [
            f"dataset: {self.dataset}  scale: {self.metric_scale}  "
            f"few-shot: {self.few_shot_fraction:g}  t_in: {self.t_in}",
            f"{'t_out':>6} {'mse':>12} {'mae':>12} {'windows':>8}",
        ]
        for r in self.horizons:
            lines.append(f"{r.t_out:>6} {r.mse:>12.6f} {r.mae:>12.6f} {r.n_windows:>8}")
        lines.append(f"{'avg':>6} {self.avg_mse:>12.6f} {self.avg_mae:>12.6f} {self.n_windows_total:>8}")
        return "\n".join(lines)


def _check_lengths(prepared: PreparedData, t_in: int, horizons: Sequence[int]):
    worst = max(horizons)
    for name, split in (("train", prepared.train), ("test", prepared.test)):
        if split.length < t_in + worst:
            raise EvalError(
                f"{name} split has {split.length} rows, fewer than "
                f"t_in + max horizon = {t_in + worst}"
            )


def multi_horizon_protocol(
    run: RunConfig,
    prepared: PreparedData,
    *,
    alignment_checkpoint: str | Path | None = None,
    horizons: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
) -> MetricsReport:
    """Fine-tune and evaluate one model per prediction length.

    Every horizon starts from the same stage-1 checkpoint (when transfer is
    enabled) and shares the stage-2 hyperparameters. When ``out_dir`` is
    given, checkpoints land in ``<out_dir>/checkpoints/forecast_h<t_out>.ckpt``
    and training logs in ``<out_dir>/logs/``.
    """
    horizons = tuple(horizons) if horizons is not None else run.horizons
    if not horizons:
        raise EvalError("horizons must be non-empty")
    _check_lengths(prepared, run.t_in, horizons)
    if run.transfer == "required" and alignment_checkpoint is None:
        raise EvalError("transfer is required but no alignment checkpoint was given")
    scaler = prepared.scaler if run.metric_scale == "raw" else None

    rows = []
    for t_out in horizons:
        model = build_forecast_modules(
            run.encoder_config(),
            run.backbone,
            run.patching(),
            t_out,
            prepared.train.channels,
            lora_r=run.lora_r,
            lora_alpha=run.lora_alpha,
            seed=run.seed,
        )
        if run.transfer == "required":
            transfer_alignment_weights(model.modules(), alignment_checkpoint)
        out_path = None
        log_path = None
        if out_dir is not None:
            out_path = Path(out_dir) / "checkpoints" / f"forecast_h{t_out}.ckpt"
            log_path = Path(out_dir) / "logs" / f"forecast_h{t_out}.jsonl"
        run_lp_ft(
            model.backbone,
            model.encoder,
            model.head,
            model.revin,
            prepared.train,
            run.patching(),
            run.forecast_train,
            policy=run.policy(),
            val_series=prepared.val if run.forecast_train.early_stop_patience else None,
            out_path=out_path,
            log_path=log_path,
        )
        windows = sliding_windows(prepared.test, run.t_in, t_out)
        mse_v, mae_v = evaluate_forecast(model, windows, t_out, scaler=scaler)
        rows.append(HorizonMetrics(t_out=t_out, mse=mse_v, mae=mae_v, n_windows=len(windows)))
        logger.info("horizon %d: mse %.6f mae %.6f (%d windows)", t_out, mse_v, mae_v, len(windows))

    return MetricsReport.from_rows(
        rows,
        dataset=run.dataset_tag(),
        few_shot_fraction=run.split.few_shot_fraction,
        t_in=run.t_in,
        metric_scale=run.metric_scale,
    )


def linear_eval(
    aligned_checkpoint: str | Path | None,
    run: RunConfig,
    prepared: PreparedData,
    t_out: int,
    *,
    steps: int | None = None,
) -> tuple[float, float]:
    """Train only a fresh forecast head on frozen weights; report test metrics.

    ``aligned_checkpoint=None`` runs the control arm on randomly initialized
    weights. A path that does not exist is an error, not a fallback.
    """
    if aligned_checkpoint is not None and not Path(aligned_checkpoint).exists():
        raise EvalError(f"missing alignment checkpoint: {aligned_checkpoint}")
    _check_lengths(prepared, run.t_in, [t_out])
    model = build_forecast_modules(
        run.encoder_config(),
        run.backbone,
        run.patching(),
        t_out,
        prepared.train.channels,
        lora_r=run.lora_r,
        lora_alpha=run.lora_alpha,
        seed=run.seed,
    )
    if aligned_checkpoint is not None:
        transfer_alignment_weights(model.modules(), aligned_checkpoint)

    base = run.forecast_train
    if steps is None:
        lp = base.lp_steps if base.lp_steps is not None else None
        ft = base.ft_steps if base.ft_steps is not None else None
        if lp is not None and ft is not None:
            steps = lp + ft
    config = dataclasses.replace(
        base,
        lp_steps=steps,
        ft_steps=0,
        lp_epochs=base.lp_epochs + base.ft_epochs if steps is None else base.lp_epochs,
    )
    run_lp_ft(
        model.backbone,
        model.encoder,
        model.head,
        model.revin,
        prepared.train,
        run.patching(),
        config,
        policy=FreezePolicy.head_only(),
    )
    windows = sliding_windows(prepared.test, run.t_in, t_out)
    scaler = prepared.scaler if run.metric_scale == "raw" else None
    return evaluate_forecast(model, windows, t_out, scaler=scaler)
