"""Single-file checkpoint format: plain-text manifest plus raw tensor payload.

Layout::

    magic "TSCKPT01" | u64 little-endian manifest length | manifest JSON | payload

The manifest records the format version, a stage tag, an architecture dict,
and one entry per tensor (name, shape, dtype, payload offset, byte count,
trainable flag). The payload is the row-major little-endian bytes of every
tensor, concatenated in manifest order. Save followed by load is bit-exact,
freeze flags included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TSCKPT01"
FORMAT_VERSION = 1

_DTYPE_TAGS = {torch.float32: "<f4", torch.float64: "<f8"}
_TAG_DTYPES = {"<f4": torch.float32, "<f8": torch.float64}


class CheckpointError(ValueError):
    pass


@dataclass
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int
    nbytes: int
    trainable: bool


@dataclass
class Checkpoint:
    stage: str
    arch: dict
    tensors: dict[str, torch.Tensor]
    trainable: dict[str, bool]
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def entries(self) -> list[TensorEntry]:
        out = []
        offset = 0
        for name in self.tensors:
            t = self.tensors[name]
            nbytes = t.numel() * t.element_size()
            out.append(
                TensorEntry(
                    name=name,
                    shape=tuple(t.shape),
                    dtype=_DTYPE_TAGS[t.dtype],
                    offset=offset,
                    nbytes=nbytes,
                    trainable=self.trainable[name],
                )
            )
            offset += nbytes
        return out


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    stage: str,
    arch: dict,
    trainable: dict[str, bool] | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    for name, t in tensors.items():
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
    if trainable is None:
        trainable = {name: bool(t.requires_grad) for name, t in tensors.items()}
    ckpt = Checkpoint(
        stage=stage, arch=arch, tensors=tensors, trainable=trainable, extra=extra or {}
    )
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "arch": arch,
        "extra": ckpt.extra,
        "tensors": [
            {
                "name": e.name,
                "shape": list(e.shape),
                "dtype": e.dtype,
                "offset": e.offset,
                "nbytes": e.nbytes,
                "trainable": e.trainable,
            }
            for e in ckpt.entries()
        ],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest_bytes).to_bytes(8, "little"))
        fh.write(manifest_bytes)
        for name, t in tensors.items():
            array = t.detach().cpu().numpy()
            fh.write(np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<")).tobytes())
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
        length = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(length).decode("utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )
    return manifest


def load_checkpoint_file(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = read_manifest(path)
    payload_start = len(MAGIC) + 8 + len(
        json.dumps(manifest, sort_keys=True).encode("utf-8")
    )
    raw = path.read_bytes()
    tensors: dict[str, torch.Tensor] = {}
    trainable: dict[str, bool] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        dtype = entry["dtype"]
        if dtype not in _TAG_DTYPES:
            raise CheckpointError(f"unsupported dtype tag {dtype!r} for tensor {name!r}")
        start = payload_start + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            raise CheckpointError(f"payload truncated for tensor {name!r}")
        array = np.frombuffer(raw[start:stop], dtype=np.dtype(dtype)).reshape(
            entry["shape"]
        )
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(dtype).itemsize
        if expected != entry["nbytes"]:
            raise CheckpointError(f"manifest size mismatch for tensor {name!r}")
        tensors[name] = torch.from_numpy(array.copy())
        trainable[name] = bool(entry["trainable"])
    return Checkpoint(
        stage=manifest["stage"],
        arch=manifest["arch"],
        tensors=tensors,
        trainable=trainable,
        extra=manifest.get("extra", {}),
        format_version=manifest["format_version"],
    )


def describe(path: str | Path) -> str:
    """Human-readable manifest listing: one line per tensor."""
    manifest = read_manifest(path)
    lines = [
        f"format_version: {manifest['format_version']}",
        f"stage: {manifest['stage']}",
        f"tensors: {len(manifest['tensors'])}",
    ]
    for entry in manifest["tensors"]:
        shape = "x".join(str(s) for s in entry["shape"]) or "scalar"
        flag = "trainable" if entry["trainable"] else "frozen"
        lines.append(f"{entry['name']}  {shape}  {entry['dtype']}  {flag}")
    return "\n".join(lines)
