"""Named-tensor parameter store and the binary checkpoint format.

Layout (all integers little-endian)::

    b"MIXTCKPT"                       magic
    u32  format version
    u64  header length, then UTF-8 JSON header (config snapshot, metadata)
    u32  tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  dtype tag, u8 trainable flag, u8 ndim, ndim x u64 shape
        little-endian payload
    32 bytes  SHA-256 over everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

MAGIC = b"MIXTCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.uint8, "|u1"),
}
_TAG = {tdt: tag for tag, (tdt, _) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParameterStore:
    """Ordered name -> tensor map with a trainable mask."""

    tensors: dict[str, torch.Tensor]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            self.trainable.setdefault(name, False)
        extra = set(self.trainable) - set(self.tensors)
        if extra:
            raise ValueError(f"mask entries without tensors: {sorted(extra)}")

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        tensors, mask = {}, {}
        for name, p in module.named_parameters():
            tensors[name] = p
            mask[name] = p.requires_grad
        return cls(tensors, mask)

    def checksum(self, names=None, trainable: Optional[bool] = None) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            if names is not None and name not in names:
                continue
            if trainable is not None and self.trainable[name] != trainable:
                continue
            h.update(name.encode("utf-8"))
            h.update(str(tuple(t.shape)).encode("ascii"))
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self.trainable.items() if flag]


def save_checkpoint(path, store: ParameterStore, header: Mapping) -> None:
    if not str(path):
        raise CheckpointError("empty checkpoint path")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<Q", len(hdr)), hdr, struct.pack("<I", len(store.tensors))]
    for name, t in store.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _TAG:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        tag = _TAG[t.dtype]
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BBB", tag, int(store.trainable[name]), t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[tag][1], copy=False).tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path, expected_config_hash: Optional[str] = None) -> tuple[dict, ParameterStore]:
    """Read ``path``; returns (header, store). Verifies magic, version and checksum."""
    if not str(path):
        raise CheckpointError("empty checkpoint path")
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 44 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum failure")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {header.get('config_hash')} does not match {expected_config_hash}"
        )
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors, mask = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        tag, flag, ndim = struct.unpack_from("<BBB", body, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        tdt, npdt = _DTYPES[tag]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype=npdt, count=n, offset=pos).reshape(shape)
        pos += arr.nbytes
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        mask[name] = bool(flag)
    return header, ParameterStore(tensors, mask)
