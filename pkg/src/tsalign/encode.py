"""Patch embeddings: token convolution, positional lookup, temporal lookup.

The final embedding fed to the backbone is the elementwise sum of three
(T_p, D) pieces. Temporal information is aggregated at two levels: level 1
sums one trainable lookup table per calendar attribute at a single timestamp;
level 2 pools across the timestamps inside a patch, by default selecting the
patch's first timestamp as representative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import torch
from torch import nn

from .transform import PatchGrid


class EncodeError(ValueError):
    pass


# (attribute name, cardinality) in lookup order. Indices are 0-based:
# day 1 of the month maps to 0, January maps to 0, Monday maps to 0.
DEFAULT_ATTRIBUTES: tuple[tuple[str, int], ...] = (
    ("minute_of_hour", 60),
    ("hour_of_day", 24),
    ("day_of_week", 7),
    ("day_of_month", 31),
    ("month_of_year", 12),
)

POOLING_MODES = ("select_first", "mean")


@dataclass(frozen=True)
class TemporalAttributeSpec:
    """Ordered calendar attributes and their index cardinalities."""

    attributes: tuple[tuple[str, int], ...] = DEFAULT_ATTRIBUTES

    def __post_init__(self):
        known = dict(DEFAULT_ATTRIBUTES)
        for name, card in self.attributes:
            if name not in known:
                raise EncodeError(f"unknown temporal attribute {name!r}")
            if card != known[name]:
                raise EncodeError(
                    f"attribute {name!r} has cardinality {known[name]}, got {card}"
                )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)

    @classmethod
    def from_names(cls, names) -> "TemporalAttributeSpec":
        known = dict(DEFAULT_ATTRIBUTES)
        return cls(attributes=tuple((n, known[n]) for n in names))


def extract_calendar(
    timestamps: np.ndarray, spec: TemporalAttributeSpec | None = None
) -> np.ndarray:
    """Decompose epoch-second timestamps into per-attribute indices.

    Returns an int64 array of shape (len(timestamps), len(attributes)) in the
    spec's attribute order. Gregorian calendar, UTC, Monday = 0.
    """
    spec = spec or TemporalAttributeSpec()
    timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
    out = np.empty((timestamps.shape[0], len(spec.attributes)), dtype=np.int64)
    for i, ts in enumerate(timestamps):
        dt = datetime.fromtimestamp(int(ts), tz=timezone.utc)
        values = {
            "minute_of_hour": dt.minute,
            "hour_of_day": dt.hour,
            "day_of_week": dt.weekday(),
            "day_of_month": dt.day - 1,
            "month_of_year": dt.month - 1,
        }
        for j, (name, _) in enumerate(spec.attributes):
            out[i, j] = values[name]
    return out


@dataclass(frozen=True)
class EncoderConfig:
    patch_len: int
    embed_dim: int
    kernel_width: int = 3
    max_patches: int = 256
    temporal: TemporalAttributeSpec = field(default_factory=TemporalAttributeSpec)
    pooling: str = "select_first"

    def __post_init__(self):
        if self.patch_len < 1 or self.embed_dim < 1:
            raise EncodeError("patch_len and embed_dim must be >= 1")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise EncodeError("kernel_width must be a positive odd number")
        if self.max_patches < 1:
            raise EncodeError("max_patches must be >= 1")
        if self.pooling not in POOLING_MODES:
            raise EncodeError(f"pooling must be one of {POOLING_MODES}")


class PatchEncoder(nn.Module):
    """Maps (B, T_p, P) patches plus calendar indices to (B, T_p, D) embeddings.

    The token path is a 1-D convolution along the patch-index axis (P input
    channels, D output channels, stride 1, symmetric zero padding so the
    sequence length is preserved). Positions use a trainable lookup table over
    patch locations; temporal attributes each get their own table.
    """

    def __init__(self, config: EncoderConfig, dtype=torch.float32):
        super().__init__()
        self.config = config
        self.token_conv = nn.Conv1d(
            config.patch_len,
            config.embed_dim,
            kernel_size=config.kernel_width,
            padding=config.kernel_width // 2,
            dtype=dtype,
        )
        self.position_table = nn.Embedding(config.max_patches, config.embed_dim, dtype=dtype)
        self.temporal_tables = nn.ModuleDict(
            {
                name: nn.Embedding(card, config.embed_dim, dtype=dtype)
                for name, card in config.temporal.attributes
            }
        )

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def token_embedding(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-1] != self.config.patch_len:
            raise EncodeError(
                f"patch length {patches.shape[-1]} does not match the "
                f"convolution's {self.config.patch_len} input channels"
            )
        squeeze = patches.ndim == 2
        if squeeze:
            patches = patches.unsqueeze(0)
        # (B, T_p, P) -> (B, P, T_p): the conv slides over the patch index.
        out = self.token_conv(patches.transpose(1, 2)).transpose(1, 2)
        return out.squeeze(0) if squeeze else out

    def positional_embedding(self, patch_indices: torch.Tensor) -> torch.Tensor:
        if torch.any(patch_indices < 0) or torch.any(
            patch_indices >= self.config.max_patches
        ):
            raise EncodeError(
                f"patch index out of range [0, {self.config.max_patches})"
            )
        return self.position_table(patch_indices)

    def temporal_embedding(self, attr_indices: torch.Tensor) -> torch.Tensor:
        """Two-level aggregation over calendar attribute indices.

        ``attr_indices`` is (..., T_p, A) for select-first pooling (one
        timestamp per patch) or (..., T_p, P, A) for mean pooling. Returns
        (..., T_p, D).
        """
        names = self.config.temporal.names
        if attr_indices.shape[-1] != len(names):
            raise EncodeError(
                f"expected {len(names)} attribute columns, got {attr_indices.shape[-1]}"
            )
        summed = None
        for j, name in enumerate(names):
            emb = self.temporal_tables[name](attr_indices[..., j])
            summed = emb if summed is None else summed + emb
        if self.config.pooling == "mean" and summed is not None and summed.ndim >= 3:
            # mean pooling input carries a per-patch timestamp axis
            if attr_indices.ndim >= 3 and attr_indices.shape[-2] == self.config.patch_len:
                summed = summed.mean(dim=-2)
        return summed

    def forward(self, patches: torch.Tensor, attr_indices: torch.Tensor | None) -> torch.Tensor:
        tok = self.token_embedding(patches)
        t_p = patches.shape[-2]
        positions = torch.arange(t_p, device=patches.device)
        pos = self.positional_embedding(positions)
        e = tok + pos
        if attr_indices is not None and self.config.temporal.attributes:
            e = e + self.temporal_embedding(attr_indices)
        return e


def patch_attribute_indices(
    grid: PatchGrid, spec: TemporalAttributeSpec, pooling: str = "select_first"
) -> torch.Tensor:
    """Calendar indices for one grid: (T_p, A) or (T_p, P, A) for mean pooling."""
    if pooling == "select_first":
        idx = extract_calendar(grid.patch_start_timestamps, spec)
        return torch.from_numpy(idx)
    if pooling == "mean":
        if grid.sampling_interval is None:
            raise EncodeError("mean pooling needs the grid's sampling interval")
        offsets = grid.sampling_interval * np.arange(grid.patch_len, dtype=np.int64)
        stamps = grid.patch_start_timestamps[:, None] + offsets[None, :]
        idx = extract_calendar(stamps.ravel(), spec)
        return torch.from_numpy(idx.reshape(grid.t_p, grid.patch_len, -1))
    raise EncodeError(f"pooling must be one of {POOLING_MODES}")


def token_encode(grid: PatchGrid, params: PatchEncoder) -> torch.Tensor:
    """Token embedding of one patch grid: (T_p, P) -> (T_p, D)."""
    return params.token_embedding(grid.patches)


def positional_embed(patch_indices, params: PatchEncoder) -> torch.Tensor:
    indices = torch.as_tensor(patch_indices, dtype=torch.long)
    return params.positional_embedding(indices)


def temporal_embed(
    grid: PatchGrid,
    spec: TemporalAttributeSpec,
    params: PatchEncoder,
    pooling: str = "select_first",
) -> torch.Tensor:
    idx = patch_attribute_indices(grid, spec, pooling)
    if pooling != params.config.pooling:
        raise EncodeError(
            f"encoder is configured for {params.config.pooling!r} pooling"
        )
    return params.temporal_embedding(idx)


def combine_embeddings(
    e_token: torch.Tensor, e_pos: torch.Tensor, e_temp: torch.Tensor
) -> torch.Tensor:
    """Elementwise sum of the three encodings."""
    if not (e_token.shape == e_pos.shape == e_temp.shape):
        raise EncodeError(
            f"shape mismatch: {tuple(e_token.shape)} vs {tuple(e_pos.shape)} "
            f"vs {tuple(e_temp.shape)}"
        )
    return e_token + e_pos + e_temp
