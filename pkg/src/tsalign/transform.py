"""Window-level normalization, channel independence, patching, shift targets.

Instance normalization is per window and per channel (population std with an
epsilon of 1e-5 inside the square root). The reversible variant adds a
trainable per-channel affine shared between its normalize and denormalize
halves, so forecasts can be mapped back to the input scale of each window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

NORM_EPS = 1e-5


class TransformError(ValueError):
    pass


@dataclass
class NormStats:
    """Per-window, per-channel statistics captured at normalization time.

    Shapes broadcast against the normalized input: for (T, C) input both are
    (1, C); for (B, T, C) input both are (B, 1, C).
    """

    mean: torch.Tensor
    std: torch.Tensor


def _window_stats(x: torch.Tensor) -> NormStats:
    if x.shape[-2] < 2:
        raise TransformError(f"need at least 2 time steps, got {x.shape[-2]}")
    mean = x.mean(dim=-2, keepdim=True)
    var = x.var(dim=-2, unbiased=False, keepdim=True)
    std = torch.sqrt(var + NORM_EPS)
    return NormStats(mean=mean, std=std)


def instance_normalize(x_in: torch.Tensor) -> tuple[torch.Tensor, NormStats]:
    """Affine-free per-window standardization over the time axis.

    Accepts (T, C) or batched (B, T, C) input. Near-constant channels come out
    as (near) zeros thanks to the epsilon.
    """
    stats = _window_stats(x_in)
    return (x_in - stats.mean) / stats.std, stats


class RevIN(nn.Module):
    """Reversible instance normalization with a trainable per-channel affine.

    The same (gamma, beta) pair is used by both directions: normalize applies
    ``gamma * (x - mean) / std + beta`` and denormalize inverts it with the
    statistics captured by the matching normalize call.
    """

    def __init__(self, channels: int, trainable: bool = True, dtype=torch.float32):
        super().__init__()
        self.channels = channels
        self.gamma = nn.Parameter(torch.ones(channels, dtype=dtype), requires_grad=trainable)
        self.beta = nn.Parameter(torch.zeros(channels, dtype=dtype), requires_grad=trainable)

    def normalize(self, x_in: torch.Tensor) -> tuple[torch.Tensor, NormStats]:
        stats = _window_stats(x_in)
        normed = (x_in - stats.mean) / stats.std
        return normed * self.gamma + self.beta, stats

    def denormalize(self, y: torch.Tensor, stats: NormStats) -> torch.Tensor:
        if torch.any(self.gamma.abs() < 1e-8):
            raise TransformError("RevIN affine is not invertible (|gamma| < 1e-8)")
        return (y - self.beta) / self.gamma * stats.std + stats.mean


def revin_normalize(x_in: torch.Tensor, params: RevIN) -> tuple[torch.Tensor, NormStats]:
    return params.normalize(x_in)


def revin_denormalize(y: torch.Tensor, stats: NormStats, params: RevIN) -> torch.Tensor:
    return params.denormalize(y, stats)


def channel_independence(x: torch.Tensor) -> torch.Tensor:
    """Split channels into independent univariate samples.

    (T, C) -> (C, T); batched (B, T, C) -> (B*C, T) with window-major order,
    so sample ``b * C + c`` is channel c of window b.
    """
    if x.ndim == 2:
        return x.transpose(0, 1)
    if x.ndim == 3:
        b, t, c = x.shape
        return x.permute(0, 2, 1).reshape(b * c, t)
    raise TransformError(f"expected 2-D or 3-D input, got {x.ndim}-D")


def restack_channels(samples: torch.Tensor, channels: int) -> torch.Tensor:
    """Inverse of :func:`channel_independence` for batched samples.

    (B*C, T) -> (B, T, C), matching the window-major sample order.
    """
    bc, t = samples.shape
    if bc % channels:
        raise TransformError("sample count is not a multiple of the channel count")
    return samples.reshape(bc // channels, channels, t).permute(0, 2, 1)


def unfold_patches(x: torch.Tensor, patch_len: int, stride: int) -> torch.Tensor:
    """Overlapping patches along the last axis: (..., T) -> (..., T_p, P)."""
    if stride < 1:
        raise TransformError("stride must be >= 1")
    if x.shape[-1] < patch_len:
        raise TransformError(
            f"series length {x.shape[-1]} is shorter than patch length {patch_len}"
        )
    return x.unfold(-1, patch_len, stride)


def n_patches(t_in: int, patch_len: int, stride: int) -> int:
    return (t_in - patch_len) // stride + 1


@dataclass
class PatchGrid:
    """Patch matrix for one univariate series.

    ``patches`` is (T_p, P); patch j equals the source slice
    ``[j*stride, j*stride + patch_len)``. ``patch_start_timestamps`` holds the
    first timestamp of each patch; ``sampling_interval`` (when known) lets the
    remaining per-patch timestamps be reconstructed.
    """

    patches: torch.Tensor
    patch_start_timestamps: np.ndarray
    patch_len: int
    stride: int
    sampling_interval: int | None = None

    @property
    def t_p(self) -> int:
        return self.patches.shape[0]


def patchify(
    series: torch.Tensor,
    patch_len: int,
    stride: int,
    timestamps: np.ndarray | None = None,
) -> PatchGrid:
    """Cut a length-T univariate series into overlapping patches.

    Produces floor((T - P) / S) + 1 patches; trailing samples beyond the last
    full patch are dropped.
    """
    if series.ndim != 1:
        raise TransformError(f"expected a 1-D series, got shape {tuple(series.shape)}")
    patches = unfold_patches(series, patch_len, stride)
    t_p = patches.shape[0]
    interval = None
    if timestamps is not None:
        timestamps = np.asarray(timestamps, dtype=np.int64)
        if timestamps.shape[0] != series.shape[0]:
            raise TransformError("timestamps length must match the series length")
        starts = timestamps[: t_p * stride : stride].copy()
        if timestamps.shape[0] >= 2:
            interval = int(timestamps[1] - timestamps[0])
    else:
        starts = np.zeros(t_p, dtype=np.int64)
    return PatchGrid(
        patches=patches,
        patch_start_timestamps=starts,
        patch_len=patch_len,
        stride=stride,
        sampling_interval=interval,
    )


@dataclass
class ShiftedPair:
    """Autoregressive inputs/targets: target row j is patch j+1."""

    inputs: torch.Tensor
    targets: torch.Tensor


def make_shift_targets(grid: PatchGrid) -> ShiftedPair:
    """Drop the last patch from the inputs and the first from the targets.

    The final patch has no successor inside the window, so the training loss
    covers T_p - 1 positions.
    """
    if grid.t_p < 2:
        raise TransformError(f"need at least 2 patches to shift, got {grid.t_p}")
    return ShiftedPair(inputs=grid.patches[:-1], targets=grid.patches[1:])
