"""Losses, the two training stages, optimizers, and the gradient-check harness.

Stage 1 adapts the stack with a next-patch objective: normalize each window
(affine-free), split channels, patchify, embed, run the backbone, and map each
position back to patch space with a linear head trained against the sequence
shifted one patch ahead. Stage 2 swaps in reversible normalization and a
flatten-and-project forecast head, trained with linear probing first and full
fine-tuning (of the designated trainable groups) second.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    Backbone,
    BackboneConfig,
    FreezePolicy,
    apply_freeze_policy,
    attach_lora,
    backbone_arch,
    load_into,
    named_parameters,
    save_state,
)
from .checkpoint import Checkpoint, load_checkpoint_file
from .data import RawSeries, Window, sliding_windows
from .encode import EncoderConfig, PatchEncoder, TemporalAttributeSpec, extract_calendar
from .transform import (
    RevIN,
    channel_independence,
    instance_normalize,
    n_patches,
    restack_channels,
    unfold_patches,
)

logger = logging.getLogger("tsalign.train")


class TrainingError(RuntimeError):
    pass


def seed_all(seed: int):
    """Seed every RNG the pipeline draws from."""
    import random

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------------------
# metrics


def _as_f64_pair(actual, predicted) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.as_tensor(np.asarray(actual.detach() if torch.is_tensor(actual) else actual), dtype=torch.float64)
    p = torch.as_tensor(np.asarray(predicted.detach() if torch.is_tensor(predicted) else predicted), dtype=torch.float64)
    if a.shape != p.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(p.shape)}")
    if a.numel() == 0:
        raise ValueError("metrics need at least one element")
    return a, p


def mse(actual, predicted) -> float:
    """Mean squared elementwise difference (computed in float64)."""
    a, p = _as_f64_pair(actual, predicted)
    return ((a - p) ** 2).mean().item()


def mae(actual, predicted) -> float:
    """Mean absolute elementwise difference (computed in float64)."""
    a, p = _as_f64_pair(actual, predicted)
    return (a - p).abs().mean().item()


# ---------------------------------------------------------------------------
# heads


class AlignmentHead(nn.Linear):
    """Linear map from backbone embeddings back to patch space (weight P x D)."""

    def __init__(self, patch_len: int, embed_dim: int, dtype=torch.float32):
        super().__init__(embed_dim, patch_len, bias=False, dtype=dtype)
        self.patch_len = patch_len
        self.embed_dim = embed_dim


class ForecastHead(nn.Linear):
    """Flatten-and-project head bound to one prediction length.

    The weight is (T_out, T_p * D); the input is the per-channel backbone
    output flattened over its patch and embedding axes.
    """

    def __init__(self, num_patches: int, embed_dim: int, t_out: int, dtype=torch.float32):
        super().__init__(num_patches * embed_dim, t_out, bias=False, dtype=dtype)
        self.num_patches = num_patches
        self.embed_dim = embed_dim
        self.t_out = t_out

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.linear(z.flatten(-2), self.weight)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PatchSpec:
    """Look-back length and patch geometry shared by both stages."""

    t_in: int
    patch_len: int
    stride: int

    def __post_init__(self):
        if self.patch_len < 1 or self.stride < 1:
            raise ValueError("patch_len and stride must be >= 1")
        if self.t_in < self.patch_len:
            raise ValueError(f"t_in {self.t_in} is shorter than patch_len {self.patch_len}")

    @property
    def num_patches(self) -> int:
        return n_patches(self.t_in, self.patch_len, self.stride)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "alignment"  # "alignment" | "forecast"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_steps: int | None = None  # alignment: overrides epochs when set
    epochs: int = 1
    lp_epochs: int = 1
    ft_epochs: int = 1
    lp_steps: int | None = None  # forecast: phase step overrides
    ft_steps: int | None = None
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in ("alignment", "forecast"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.stage == "forecast":
            lp = self.lp_steps if self.lp_steps is not None else self.lp_epochs
            ft = self.ft_steps if self.ft_steps is not None else self.ft_epochs
            if lp <= 0 and ft <= 0:
                raise ValueError("forecast stage needs a nonzero LP or FT phase")


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, params: Sequence[torch.Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[torch.Tensor] | None = None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        with torch.no_grad():
            for p, g in zip(self.params, grads):
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    raise TrainingError("non-finite gradient")
                p.sub_(self.lr * g)


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(
        self,
        params: Sequence[torch.Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[torch.Tensor] | None = None):
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    raise TrainingError("non-finite gradient")
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.addcdiv_(m / c1, (v / c2).sqrt().add_(self.eps), value=-self.lr)


def make_optimizer(params: Sequence[torch.Tensor], config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(params, lr=config.learning_rate)
    return Adam(
        params,
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )


def optimizer_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    config: TrainConfig,
    state=None,
):
    """Apply one update in place; returns the optimizer state for reuse."""
    if len(params) != len(grads):
        raise ValueError("params and grads must pair up one-to-one")
    if state is None:
        state = make_optimizer(params, config)
    state.step(grads)
    return state


# ---------------------------------------------------------------------------
# batched forward paths


@dataclass
class WindowTensors:
    """Windows stacked for batching: inputs, targets, calendar indices."""

    x_in: torch.Tensor  # (N, T_in, C)
    x_out: torch.Tensor  # (N, T_out, C)
    attr: torch.Tensor | None  # (N, T_p, A) or (N, T_p, P, A)
    channels: int

    def __len__(self) -> int:
        return self.x_in.shape[0]


def window_attr_indices(
    timestamps: np.ndarray,
    patching: PatchSpec,
    temporal: TemporalAttributeSpec,
    pooling: str = "select_first",
) -> torch.Tensor:
    """Calendar indices for stacked window timestamps (N, T_in)."""
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if timestamps.ndim == 1:
        timestamps = timestamps[None, :]
    t_p = patching.num_patches
    starts = np.arange(t_p, dtype=np.int64) * patching.stride
    if pooling == "mean":
        pos = starts[:, None] + np.arange(patching.patch_len, dtype=np.int64)[None, :]
        stamps = timestamps[:, pos]  # (N, T_p, P)
    else:
        stamps = timestamps[:, starts]  # (N, T_p)
    idx = extract_calendar(stamps.ravel(), temporal)
    return torch.from_numpy(idx.reshape(*stamps.shape, -1))


def stack_windows(
    windows: Sequence[Window],
    patching: PatchSpec,
    encoder_config: EncoderConfig | None,
    dtype=torch.float32,
) -> WindowTensors:
    if not windows:
        raise TrainingError("no windows to train on")
    x_in = torch.as_tensor(np.stack([w.x_in for w in windows]), dtype=dtype)
    x_out = torch.as_tensor(np.stack([w.x_out for w in windows]), dtype=dtype)
    attr = None
    if encoder_config is not None and encoder_config.temporal.attributes:
        stamps = np.stack([w.in_timestamps for w in windows])
        attr = window_attr_indices(
            stamps, patching, encoder_config.temporal, encoder_config.pooling
        )
    return WindowTensors(x_in=x_in, x_out=x_out, attr=attr, channels=x_in.shape[-1])


def _per_channel_attr(attr: torch.Tensor | None, channels: int) -> torch.Tensor | None:
    # channel independence merges C into the batch; calendar indices are
    # shared by every channel of a window
    if attr is None:
        return None
    return attr.repeat_interleave(channels, dim=0)


def alignment_loss(
    encoder: PatchEncoder,
    backbone: Backbone,
    head: AlignmentHead,
    x_in: torch.Tensor,
    attr: torch.Tensor | None,
    patching: PatchSpec,
) -> torch.Tensor:
    normed, _ = instance_normalize(x_in)
    samples = channel_independence(normed)
    patches = unfold_patches(samples, patching.patch_len, patching.stride)
    e = encoder(patches, _per_channel_attr(attr, x_in.shape[-1]))
    z = backbone(e)
    pred = head(z)
    # the last patch has no successor, so the loss covers T_p - 1 positions
    return F.mse_loss(pred[:, :-1, :], patches[:, 1:, :])


def forecast_predictions(
    encoder: PatchEncoder,
    backbone: Backbone,
    head: ForecastHead,
    revin: RevIN,
    x_in: torch.Tensor,
    attr: torch.Tensor | None,
    patching: PatchSpec,
) -> torch.Tensor:
    """Batched stage-2 forward: (N, T_in, C) inputs to (N, T_out, C) forecasts."""
    channels = x_in.shape[-1]
    normed, stats = revin.normalize(x_in)
    samples = channel_independence(normed)
    patches = unfold_patches(samples, patching.patch_len, patching.stride)
    e = encoder(patches, _per_channel_attr(attr, channels))
    z = backbone(e)
    out = head(z)  # (N * C, T_out)
    y_normed = restack_channels(out, channels)
    return revin.denormalize(y_normed, stats)


def forecast_loss(
    encoder, backbone, head, revin, x_in, x_out, attr, patching
) -> torch.Tensor:
    pred = forecast_predictions(encoder, backbone, head, revin, x_in, attr, patching)
    return F.mse_loss(pred, x_out)


def forecast_forward(
    backbone: Backbone,
    encoder: PatchEncoder,
    head: ForecastHead,
    revin: RevIN,
    window: Window,
    patching: PatchSpec,
) -> torch.Tensor:
    """Forecast one window; returns a (T_out, C) tensor."""
    if window.t_out != head.t_out:
        raise TrainingError(
            f"window horizon {window.t_out} does not match the head's {head.t_out}"
        )
    if patching.num_patches != head.num_patches:
        raise TrainingError("patch count does not match the head's input width")
    dtype = head.weight.dtype
    x_in = torch.as_tensor(window.x_in, dtype=dtype).unsqueeze(0)
    attr = None
    if encoder.config.temporal.attributes:
        attr = window_attr_indices(
            window.in_timestamps, patching, encoder.config.temporal, encoder.config.pooling
        )
    pred = forecast_predictions(encoder, backbone, head, revin, x_in, attr, patching)
    return pred.squeeze(0)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    steps: int = 0
    checkpoint_path: Path | None = None

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else math.nan


class _JsonlLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, **fields):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")


def _iter_batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    emitted = 0
    while emitted < steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if emitted >= steps:
                return
            yield order[start : start + batch_size]
            emitted += 1


def _steps_for(n: int, batch_size: int, epochs: int, steps: int | None) -> int:
    if steps is not None:
        return steps
    return epochs * math.ceil(n / batch_size)


def _trainable(modules: Mapping[str, nn.Module]) -> list[torch.Tensor]:
    return [p for _, p in named_parameters(modules) if p.requires_grad]


def _train_phase(
    modules: Mapping[str, nn.Module],
    loss_of_batch: Callable[[np.ndarray], torch.Tensor],
    n_samples: int,
    steps: int,
    config: TrainConfig,
    rng: np.random.Generator,
    log: _JsonlLog,
    phase: str,
    step_offset: int = 0,
    val_fn: Callable[[], float] | None = None,
    steps_per_epoch: int | None = None,
) -> list[float]:
    params = _trainable(modules)
    if not params and steps > 0:
        raise TrainingError(f"{phase}: nothing is trainable")
    optim = make_optimizer(params, config)
    history: list[float] = []
    best_val = math.inf
    stale = 0
    for i, batch_idx in enumerate(_iter_batches(n_samples, config.batch_size, steps, rng)):
        for p in params:
            p.grad = None
        loss = loss_of_batch(batch_idx)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss.item()} at {phase} step {i + 1} "
                f"(batch of {len(batch_idx)}, lr {config.learning_rate})"
            )
        loss.backward()
        optim.step()
        value = float(loss.item())
        history.append(value)
        step = step_offset + i + 1
        if step % config.log_every == 0 or i == steps - 1:
            logger.info("%s step %d loss %.6f", phase, step, value)
        log.record(step=step, phase=phase, loss=value, lr=config.learning_rate)
        if (
            val_fn is not None
            and config.early_stop_patience is not None
            and steps_per_epoch
            and (i + 1) % steps_per_epoch == 0
        ):
            val = val_fn()
            if val < best_val - 1e-12:
                best_val = val
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    logger.info("%s: early stop after %d steps (val %.6f)", phase, i + 1, val)
                    break
    return history


def pipeline_arch(
    encoder: PatchEncoder,
    backbone: Backbone,
    patching: PatchSpec,
    channels: int,
    forecast_head: ForecastHead | None = None,
) -> dict:
    cfg = encoder.config
    arch = {
        "backbone": backbone_arch(backbone),
        "encoder": {
            "patch_len": cfg.patch_len,
            "embed_dim": cfg.embed_dim,
            "kernel_width": cfg.kernel_width,
            "max_patches": cfg.max_patches,
            "attributes": list(cfg.temporal.names),
            "pooling": cfg.pooling,
        },
        "patching": {
            "t_in": patching.t_in,
            "patch_len": patching.patch_len,
            "stride": patching.stride,
        },
        "channels": channels,
    }
    if forecast_head is not None:
        arch["forecast_head"] = {"t_out": forecast_head.t_out}
    return arch


def run_alignment(
    backbone: Backbone,
    encoder: PatchEncoder,
    head: AlignmentHead,
    series: RawSeries,
    patching: PatchSpec,
    config: TrainConfig,
    policy: FreezePolicy | None = None,
    out_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Next-patch training over every look-back window of the series.

    The resulting checkpoint carries no horizon-dependent tensors, so one
    alignment run serves every downstream prediction length.
    """
    if config.stage != "alignment":
        raise TrainingError(f"expected an alignment-stage config, got {config.stage!r}")
    policy = policy or FreezePolicy.default()
    modules = {"encoder": encoder, "backbone": backbone, "align_head": head}
    apply_freeze_policy(modules, policy)

    windows = sliding_windows(series, patching.t_in, 0)
    tensors = stack_windows(windows, patching, encoder.config, dtype=head.weight.dtype)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    steps = _steps_for(len(tensors), config.batch_size, config.epochs, config.max_steps)
    log = _JsonlLog(log_path)
    logger.info(
        "alignment: %d windows x %d channels, %d steps", len(tensors), tensors.channels, steps
    )

    def loss_of_batch(idx):
        return alignment_loss(
            encoder,
            backbone,
            head,
            tensors.x_in[idx],
            tensors.attr[idx] if tensors.attr is not None else None,
            patching,
        )

    history = _train_phase(
        modules, loss_of_batch, len(tensors), steps, config, rng, log, phase="align"
    )
    result = TrainResult(history=history, steps=len(history))
    if out_path is not None:
        arch = pipeline_arch(encoder, backbone, patching, tensors.channels)
        result.checkpoint_path = save_state(
            out_path, modules, stage="alignment", arch=arch
        )
    return result


def run_lp_ft(
    backbone: Backbone,
    encoder: PatchEncoder,
    head: ForecastHead,
    revin: RevIN,
    series: RawSeries,
    patching: PatchSpec,
    config: TrainConfig,
    policy: FreezePolicy | None = None,
    val_series: RawSeries | None = None,
    out_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Linear probing (head only) followed by fine-tuning the trainable groups."""
    if config.stage != "forecast":
        raise TrainingError(f"expected a forecast-stage config, got {config.stage!r}")
    policy = policy or FreezePolicy.default()
    modules = {
        "encoder": encoder,
        "backbone": backbone,
        "forecast_head": head,
        "revin": revin,
    }
    windows = sliding_windows(series, patching.t_in, head.t_out)
    tensors = stack_windows(windows, patching, encoder.config, dtype=head.weight.dtype)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(tensors) / config.batch_size)
    lp_steps = _steps_for(len(tensors), config.batch_size, config.lp_epochs, config.lp_steps)
    ft_steps = _steps_for(len(tensors), config.batch_size, config.ft_epochs, config.ft_steps)
    log = _JsonlLog(log_path)
    logger.info(
        "forecast t_out=%d: %d windows, LP %d steps + FT %d steps",
        head.t_out,
        len(tensors),
        lp_steps,
        ft_steps,
    )

    def loss_of_batch(idx):
        return forecast_loss(
            encoder,
            backbone,
            head,
            revin,
            tensors.x_in[idx],
            tensors.x_out[idx],
            tensors.attr[idx] if tensors.attr is not None else None,
            patching,
        )

    val_fn = None
    if val_series is not None:
        val_windows = sliding_windows(val_series, patching.t_in, head.t_out)
        val_tensors = stack_windows(val_windows, patching, encoder.config, dtype=head.weight.dtype)

        def val_fn():
            with torch.no_grad():
                pred = forecast_predictions(
                    encoder, backbone, head, revin,
                    val_tensors.x_in, val_tensors.attr, patching,
                )
            return mse(val_tensors.x_out, pred)

    history: list[float] = []
    apply_freeze_policy(modules, FreezePolicy.head_only())
    history += _train_phase(
        modules, loss_of_batch, len(tensors), lp_steps, config, rng, log,
        phase="lp", val_fn=val_fn, steps_per_epoch=steps_per_epoch,
    )
    apply_freeze_policy(modules, policy)
    history += _train_phase(
        modules, loss_of_batch, len(tensors), ft_steps, config, rng, log,
        phase="ft", step_offset=lp_steps, val_fn=val_fn, steps_per_epoch=steps_per_epoch,
    )
    result = TrainResult(history=history, steps=len(history))
    if out_path is not None:
        arch = pipeline_arch(encoder, backbone, patching, tensors.channels, forecast_head=head)
        result.checkpoint_path = save_state(out_path, modules, stage="forecast", arch=arch)
    return result


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ForecastModel:
    """Everything needed to forecast a window, bundled for evaluation."""

    encoder: PatchEncoder
    backbone: Backbone
    head: ForecastHead
    revin: RevIN
    patching: PatchSpec

    @property
    def t_out(self) -> int:
        return self.head.t_out

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "backbone": self.backbone,
            "forecast_head": self.head,
            "revin": self.revin,
        }

    def predict(self, x_in: torch.Tensor, timestamps: np.ndarray) -> torch.Tensor:
        attr = None
        if self.encoder.config.temporal.attributes:
            attr = window_attr_indices(
                timestamps, self.patching, self.encoder.config.temporal, self.encoder.config.pooling
            )
        with torch.no_grad():
            return forecast_predictions(
                self.encoder, self.backbone, self.head, self.revin, x_in, attr, self.patching
            )


def build_alignment_modules(
    encoder_config: EncoderConfig,
    backbone_config: BackboneConfig,
    *,
    lora_r: int | None,
    lora_alpha: float,
    seed: int,
    dtype=torch.float32,
) -> tuple[PatchEncoder, Backbone, AlignmentHead]:
    torch.manual_seed(seed)
    encoder = PatchEncoder(encoder_config, dtype=dtype)
    backbone = Backbone(backbone_config, dtype=dtype)
    if lora_r is not None:
        attach_lora(backbone, lora_r, lora_alpha)
    head = AlignmentHead(encoder_config.patch_len, encoder_config.embed_dim, dtype=dtype)
    return encoder, backbone, head


def build_forecast_modules(
    encoder_config: EncoderConfig,
    backbone_config: BackboneConfig,
    patching: PatchSpec,
    t_out: int,
    channels: int,
    *,
    lora_r: int | None,
    lora_alpha: float,
    seed: int,
    dtype=torch.float32,
) -> ForecastModel:
    torch.manual_seed(seed)
    encoder = PatchEncoder(encoder_config, dtype=dtype)
    backbone = Backbone(backbone_config, dtype=dtype)
    if lora_r is not None:
        attach_lora(backbone, lora_r, lora_alpha)
    head = ForecastHead(patching.num_patches, encoder_config.embed_dim, t_out, dtype=dtype)
    revin = RevIN(channels, dtype=dtype)
    return ForecastModel(encoder=encoder, backbone=backbone, head=head, revin=revin, patching=patching)


def encoder_config_from_arch(arch: dict) -> EncoderConfig:
    return EncoderConfig(
        patch_len=arch["patch_len"],
        embed_dim=arch["embed_dim"],
        kernel_width=arch["kernel_width"],
        max_patches=arch["max_patches"],
        temporal=TemporalAttributeSpec.from_names(arch["attributes"]),
        pooling=arch["pooling"],
    )


def backbone_config_from_arch(arch: dict) -> BackboneConfig:
    return BackboneConfig(
        l=arch["l"],
        d=arch["d"],
        heads=arch["heads"],
        ffn_dim=arch["ffn_dim"],
        max_positions=arch["max_positions"],
        dropout=arch["dropout"],
    )


def transfer_alignment_weights(
    modules: Mapping[str, nn.Module], ckpt: Checkpoint | str | Path
):
    """Copy aligned encoder and backbone tensors into a stage-2 bundle."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint_file(ckpt)
    if ckpt.stage != "alignment":
        raise TrainingError(f"expected an alignment checkpoint, found stage {ckpt.stage!r}")
    load_into(modules, ckpt, prefixes=("encoder", "backbone"), restore_flags=False)
    return modules


def load_forecast_model(path: str | Path) -> ForecastModel:
    """Rebuild a stage-2 model from its checkpoint."""
    ckpt = load_checkpoint_file(path)
    if ckpt.stage != "forecast":
        raise TrainingError(f"expected a forecast checkpoint, found stage {ckpt.stage!r}")
    arch = ckpt.arch
    patching = PatchSpec(**arch["patching"])
    model = build_forecast_modules(
        encoder_config_from_arch(arch["encoder"]),
        backbone_config_from_arch(arch["backbone"]),
        patching,
        t_out=arch["forecast_head"]["t_out"],
        channels=arch["channels"],
        lora_r=arch["backbone"].get("lora", {}).get("r") if arch["backbone"].get("lora") else None,
        lora_alpha=arch["backbone"].get("lora", {}).get("alpha", 8.0) if arch["backbone"].get("lora") else 8.0,
        seed=0,
    )
    load_into(model.modules(), ckpt)
    return model


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    eps: float
    threshold: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err >= self.threshold]


def run_gradient_check(
    *,
    policy: FreezePolicy | None = None,
    lora_r: int | None = 2,
    lora_alpha: float = 4.0,
    eps: float = 1e-4,
    threshold: float = 1e-3,
    seed: int = 0,
) -> dict[str, GradCheckReport]:
    """Check both stage losses on a small double-precision model.

    The model is deliberately tiny (two blocks, 16-dim embeddings) so that
    perturbing every trainable scalar stays fast, but it exercises every
    trainable tensor the full model has: layer norms, adapter factors,
    encoder tables, heads, and the reversible-normalization affine pair.
    """
    policy = policy or FreezePolicy.default()
    patching = PatchSpec(t_in=32, patch_len=8, stride=4)
    enc_cfg = EncoderConfig(patch_len=8, embed_dim=16, kernel_width=3, max_patches=16)
    bb_cfg = BackboneConfig(l=2, d=16, heads=2, ffn_dim=32, max_positions=16, dropout=0.0)
    t_out, channels, n_windows = 8, 2, 3

    rng = np.random.default_rng(seed)
    base = np.int64(1467331200)
    stamps = base + 3600 * np.arange(patching.t_in, dtype=np.int64)
    stamps = np.stack([stamps + 3600 * k * patching.t_in for k in range(n_windows)])
    x_in = torch.as_tensor(rng.normal(size=(n_windows, patching.t_in, channels)), dtype=torch.float64)
    x_out = torch.as_tensor(rng.normal(size=(n_windows, t_out, channels)), dtype=torch.float64)
    attr = window_attr_indices(stamps, patching, enc_cfg.temporal, enc_cfg.pooling)

    reports: dict[str, GradCheckReport] = {}

    encoder, backbone, align_head = build_alignment_modules(
        enc_cfg, bb_cfg, lora_r=lora_r, lora_alpha=lora_alpha, seed=seed, dtype=torch.float64
    )
    modules = {"encoder": encoder, "backbone": backbone, "align_head": align_head}
    apply_freeze_policy(modules, policy)
    reports["alignment"] = gradient_check(
        named_parameters(modules),
        lambda: alignment_loss(encoder, backbone, align_head, x_in, attr, patching),
        eps=eps,
        threshold=threshold,
    )

    model = build_forecast_modules(
        enc_cfg, bb_cfg, patching, t_out, channels,
        lora_r=lora_r, lora_alpha=lora_alpha, seed=seed, dtype=torch.float64,
    )
    apply_freeze_policy(model.modules(), policy)
    reports["forecast"] = gradient_check(
        named_parameters(model.modules()),
        lambda: forecast_loss(
            model.encoder, model.backbone, model.head, model.revin, x_in, x_out, attr, patching
        ),
        eps=eps,
        threshold=threshold,
    )
    return reports


def gradient_check(
    named_params: Iterable[tuple[str, torch.Tensor]],
    loss_fn: Callable[[], torch.Tensor],
    eps: float = 1e-4,
    threshold: float = 1e-3,
) -> GradCheckReport:
    """Central finite differences against analytic gradients.

    Every trainable parameter is perturbed scalar by scalar; frozen parameters
    are skipped entirely. ``loss_fn`` must be a deterministic closure over the
    parameters (dropout disabled). Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not (1e-5 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-5, 1e-3]")
    params = [(name, p) for name, p in named_params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params
    }
    entries: list[GradCheckEntry] = []
    with torch.no_grad():
        for name, p in params:
            flat = p.reshape(-1)
            grad_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = float(grad_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            entries.append(GradCheckEntry(name=name, max_rel_err=worst, checked=flat.numel()))
    for _, p in params:
        p.grad = None
    return GradCheckReport(entries=entries, eps=eps, threshold=threshold)
