"""Causal transformer stack with a freeze policy and low-rank Q/K adapters.

Pre-layer-norm residual blocks with lower-triangular self-attention and a GELU
feed-forward, followed by a final layer norm. The backbone adds no positional
information of its own; that is the encoder's job. Under the default freeze
policy the attention and feed-forward weights stay fixed and only the layer
norm affines (plus any attached adapters) train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint_file, save_checkpoint

PARAM_GROUPS = ("layer_norm", "lora", "encoder", "head", "revin")


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    l: int
    d: int
    heads: int
    ffn_dim: int | None = None
    max_positions: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.l < 0:
            raise BackboneError("block count must be >= 0")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise BackboneError("embedding dim must be a positive multiple of heads")
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d)
        if self.ffn_dim < 1:
            raise BackboneError("ffn_dim must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise BackboneError("dropout must be in [0, 1)")


class LoRAAdapter(nn.Module):
    """Low-rank delta ``(alpha / r) * B @ A`` added to a frozen projection.

    ``b`` starts at zero, so attaching an adapter never changes the forward
    output until it has been trained.
    """

    def __init__(self, d: int, r: int, alpha: float, dtype=torch.float32):
        super().__init__()
        if r < 1:
            raise BackboneError("LoRA rank must be >= 1")
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        self.a = nn.Parameter(torch.empty(r, d, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(d, r, dtype=dtype))
        with torch.no_grad():
            self.a.uniform_(-1.0 / r, 1.0 / r)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * F.linear(F.linear(x, self.a), self.b)

    def merged_delta(self) -> torch.Tensor:
        return self.scaling * (self.b @ self.a)


class CausalSelfAttention(nn.Module):
    def __init__(self, config: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.d // config.heads
        self.w_q = nn.Linear(config.d, config.d, bias=False, dtype=dtype)
        self.w_k = nn.Linear(config.d, config.d, bias=False, dtype=dtype)
        self.w_v = nn.Linear(config.d, config.d, bias=False, dtype=dtype)
        self.w_o = nn.Linear(config.d, config.d, bias=False, dtype=dtype)
        self.dropout = nn.Dropout(config.dropout)
        self.lora_q: LoRAAdapter | None = None
        self.lora_k: LoRAAdapter | None = None
        mask = torch.tril(torch.ones(config.max_positions, config.max_positions, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, t, d = x.shape
        q = self.w_q(x)
        k = self.w_k(x)
        if self.lora_q is not None:
            q = q + self.lora_q(x)
        if self.lora_k is not None:
            k = k + self.lora_k(x)
        v = self.w_v(x)

        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~self.causal_mask[:t, :t], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        out = out.transpose(1, 2).reshape(b, t, d)
        out = self.w_o(out)
        if need_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, config: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.w1 = nn.Linear(config.d, config.ffn_dim, dtype=dtype)
        self.w2 = nn.Linear(config.ffn_dim, config.d, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(F.gelu(self.w1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, config: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d, dtype=dtype)
        self.attn = CausalSelfAttention(config, dtype=dtype)
        self.ln2 = nn.LayerNorm(config.d, dtype=dtype)
        self.ffn = FeedForward(config, dtype=dtype)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.ln1(x)))
        x = x + self.dropout(self.ffn(self.ln2(x)))
        return x


class Backbone(nn.Module):
    """The transformer stack; parameters plus freeze flags are the state."""

    def __init__(self, config: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            TransformerBlock(config, dtype=dtype) for _ in range(config.l)
        )
        self.ln_f = nn.LayerNorm(config.d, dtype=dtype)
        self.lora_r: int | None = None
        self.lora_alpha: float | None = None

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        squeeze = e.ndim == 2
        if squeeze:
            e = e.unsqueeze(0)
        if e.ndim != 3 or e.shape[-1] != self.config.d:
            raise BackboneError(
                f"expected (*, T_p, {self.config.d}) input, got {tuple(e.shape)}"
            )
        if e.shape[1] > self.config.max_positions:
            raise BackboneError(
                f"sequence length {e.shape[1]} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        x = e
        for block in self.blocks:
            x = block(x)
        z = self.ln_f(x)
        return z.squeeze(0) if squeeze else z

    @property
    def has_lora(self) -> bool:
        return self.lora_r is not None


def attach_lora(backbone: Backbone, r: int, alpha: float) -> Backbone:
    """Attach one trainable Q adapter and one K adapter to every block."""
    if r < 1:
        raise BackboneError("LoRA rank must be >= 1")
    if backbone.has_lora:
        raise BackboneError("LoRA adapters are already attached")
    dtype = backbone.ln_f.weight.dtype
    for block in backbone.blocks:
        block.attn.lora_q = LoRAAdapter(backbone.config.d, r, alpha, dtype=dtype)
        block.attn.lora_k = LoRAAdapter(backbone.config.d, r, alpha, dtype=dtype)
    backbone.lora_r = r
    backbone.lora_alpha = alpha
    return backbone


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter groups train; everything else is frozen.

    ``train_core`` additionally unfreezes the attention and feed-forward
    weights (the no-freeze ablation); it is never on by default.
    """

    trainable: frozenset = frozenset(PARAM_GROUPS)
    train_core: bool = False

    def __post_init__(self):
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise BackboneError(f"unknown parameter group(s): {sorted(unknown)}")
        object.__setattr__(self, "trainable", frozenset(self.trainable))

    @classmethod
    def default(cls) -> "FreezePolicy":
        return cls()

    @classmethod
    def all_frozen(cls) -> "FreezePolicy":
        return cls(trainable=frozenset())

    @classmethod
    def head_only(cls) -> "FreezePolicy":
        return cls(trainable=frozenset({"head"}))

    def is_trainable(self, group: str) -> bool:
        if group == "core":
            return self.train_core
        return group in self.trainable


def parameter_group(name: str) -> str:
    """Classify a (possibly prefixed) parameter name into a policy group."""
    parts = name.split(".")
    if parts[0] == "encoder":
        return "encoder"
    if parts[0] in ("align_head", "forecast_head", "head"):
        return "head"
    if parts[0] == "revin":
        return "revin"
    if any(p in ("lora_q", "lora_k") for p in parts):
        return "lora"
    if any(p in ("ln1", "ln2", "ln_f") for p in parts):
        return "layer_norm"
    return "core"


def named_parameters(modules: Mapping[str, nn.Module] | nn.Module):
    """Flat (prefixed-name, parameter) pairs over one module or a bundle."""
    if isinstance(modules, nn.Module):
        yield from modules.named_parameters()
        return
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            yield f"{prefix}.{name}", param


def apply_freeze_policy(
    modules: Mapping[str, nn.Module] | nn.Module, policy: FreezePolicy
):
    """Set every parameter's trainable flag according to the policy."""
    for name, param in named_parameters(modules):
        param.requires_grad_(policy.is_trainable(parameter_group(name)))
    return modules


def trainable_fraction(backbone: Backbone) -> float:
    """Trainable element count over the backbone's total element count."""
    total = 0
    trainable = 0
    for _, param in backbone.named_parameters():
        n = param.numel()
        total += n
        if param.requires_grad:
            trainable += n
    if total == 0:
        return 0.0
    return trainable / total


def collect_state(modules: Mapping[str, nn.Module]) -> tuple[dict, dict]:
    """Flatten a module bundle into (tensors, trainable flags) for saving."""
    tensors: dict[str, torch.Tensor] = {}
    flags: dict[str, bool] = {}
    for name, param in named_parameters(modules):
        tensors[name] = param.detach()
        flags[name] = bool(param.requires_grad)
    return tensors, flags


def save_state(
    path: str | Path,
    modules: Mapping[str, nn.Module],
    stage: str,
    arch: dict,
    extra: dict | None = None,
) -> Path:
    tensors, flags = collect_state(modules)
    return save_checkpoint(path, tensors, stage=stage, arch=arch, trainable=flags, extra=extra)


def load_into(
    modules: Mapping[str, nn.Module],
    ckpt: Checkpoint,
    prefixes: tuple[str, ...] | None = None,
    strict: bool = True,
    restore_flags: bool = True,
):
    """Copy checkpoint tensors into matching parameters by prefixed name.

    ``prefixes`` restricts which bundle members participate (e.g. transfer
    only the encoder and backbone). With ``strict`` every selected parameter
    must be present in the checkpoint.
    """
    for name, param in named_parameters(modules):
        if prefixes is not None and name.split(".")[0] not in prefixes:
            continue
        if name not in ckpt.tensors:
            if strict:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            continue
        source = ckpt.tensors[name]
        if tuple(source.shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(source.shape)} "
                f"vs model {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(source.to(param.dtype))
        if restore_flags:
            param.requires_grad_(ckpt.trainable[name])
    return modules


def backbone_arch(backbone: Backbone) -> dict:
    cfg = backbone.config
    arch = {
        "l": cfg.l,
        "d": cfg.d,
        "heads": cfg.heads,
        "ffn_dim": cfg.ffn_dim,
        "max_positions": cfg.max_positions,
        "dropout": cfg.dropout,
    }
    if backbone.has_lora:
        arch["lora"] = {"r": backbone.lora_r, "alpha": backbone.lora_alpha}
    return arch


def build_backbone_from_arch(arch: dict, l: int | None = None, dtype=torch.float32) -> Backbone:
    config = BackboneConfig(
        l=l if l is not None else arch["l"],
        d=arch["d"],
        heads=arch["heads"],
        ffn_dim=arch["ffn_dim"],
        max_positions=arch["max_positions"],
        dropout=arch["dropout"],
    )
    backbone = Backbone(config, dtype=dtype)
    if arch.get("lora"):
        attach_lora(backbone, arch["lora"]["r"], arch["lora"]["alpha"])
    return backbone


def load_checkpoint(path: str | Path, first_l: int | None = None) -> Backbone:
    """Rebuild a backbone from a checkpoint, optionally keeping only the
    first ``first_l`` blocks (plus the final layer norm)."""
    ckpt = load_checkpoint_file(path)
    if "backbone" not in ckpt.arch:
        raise CheckpointError("checkpoint carries no backbone architecture")
    stored_l = ckpt.arch["backbone"]["l"]
    if first_l is not None and first_l > stored_l:
        raise CheckpointError(
            f"requested first {first_l} blocks but the checkpoint has only {stored_l}"
        )
    backbone = build_backbone_from_arch(ckpt.arch["backbone"], l=first_l)
    wanted = {name for name, _ in backbone.named_parameters()}
    for name, param in backbone.named_parameters():
        stored = f"backbone.{name}"
        if stored not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {stored!r}")
        source = ckpt.tensors[stored]
        if tuple(source.shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {stored!r}: checkpoint {tuple(source.shape)} "
                f"vs model {tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(source.to(param.dtype))
        param.requires_grad_(ckpt.trainable[stored])
    assert wanted == {name for name, _ in backbone.named_parameters()}
    return backbone
