"""Checksummed checkpoint container.

Layout: ``MLMCKPT1\\n``, u32 header length, UTF-8 JSON header, tensor data,
then the SHA-256 of everything before it. The header lists each tensor's
name, dtype, shape and byte range. Files are written to a temporary name and
renamed, so a crash never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFile, FingerprintMismatch, MissingCheckpoint, MissingDependencyCheckpoint, VersionUnsupported

MAGIC = b"MLMCKPT1\n"
VERSION = 1
STAGES = ("tokenizer", "pretrain", "instruct")
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64,
           "int32": torch.int32, "bool": torch.bool}
_NAMES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)
    fingerprint: str = ""
    version: int = VERSION


def to_bytes(ck: Checkpoint) -> bytes:
    if ck.stage not in STAGES:
        raise ValueError(f"unknown stage {ck.stage!r}")
    table, blobs, offset = [], [], 0
    for name in sorted(ck.tensors):
        t = ck.tensors[name].detach().contiguous().cpu()
        if t.dtype not in _NAMES:
            raise ValueError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": _NAMES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": ck.version, "stage": ck.stage, "fingerprint": ck.fingerprint,
                         "meta": ck.meta, "tensors": table}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(buf: bytes) -> Checkpoint:
    if not buf.startswith(MAGIC):
        raise CorruptFile("not a checkpoint (bad magic)")
    if len(buf) < len(MAGIC) + 4 + 32:
        raise CorruptFile("checkpoint truncated")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile("checkpoint checksum mismatch (truncated or modified)")
    (hlen,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(body[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"unreadable checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise VersionUnsupported(f"checkpoint version {header.get('version')} (supported: {VERSION})")
    data = body[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        chunk = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CorruptFile(f"tensor {e['name']} truncated")
        dt = _DTYPES[e["dtype"]]
        np_dt = torch.empty(0, dtype=dt).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(chunk, dtype=np_dt).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return Checkpoint(header["stage"], tensors, header["meta"], header["fingerprint"], header["version"])


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = to_bytes(ck)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, stage: str | None = None, fingerprint: str | None = None) -> Checkpoint:
    """Load and verify. ``stage``/``fingerprint`` are checked when given."""
    path = Path(path)
    if not path.exists():
        if stage is not None:
            raise MissingCheckpoint(f"{stage} checkpoint {path} does not exist")
        raise MissingCheckpoint(f"checkpoint {path} does not exist")
    ck = from_bytes(path.read_bytes())
    if stage is not None and ck.stage != stage:
        raise MissingDependencyCheckpoint(f"{path} is a {ck.stage} checkpoint, expected {stage}")
    if fingerprint is not None and ck.fingerprint != fingerprint:
        raise FingerprintMismatch(f"{path} was written under a different configuration")
    return ck


def module_tensors(module: torch.nn.Module, prefix: str = "model.") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "model."):
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
