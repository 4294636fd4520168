"""On-disk dataset layout.

::

    <dir>/manifest.jsonl   one JSON record per sample
    <dir>/images/<id>.ppm  binary PPM (P6, maxval 255)
    <dir>/checksums        "<image_file> <fnv1a64 hex>" per line
    <dir>/vocab.txt        vocabulary used to encode the records
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..vocab_io import MultimodalTriple, Vocabulary
from .scene import SceneSpec
from .tasks import TaskSample

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    """Named failure while reading a dataset directory."""


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def fnv1a64_many(blobs: Sequence[bytes]) -> list[int]:
    """FNV-1a over many blobs, vectorized across blobs of equal length."""
    out = [0] * len(blobs)
    by_len: dict[int, list[int]] = {}
    for i, b in enumerate(blobs):
        by_len.setdefault(len(b), []).append(i)
    prime = np.uint64(FNV_PRIME)
    for n, idx in by_len.items():
        mat = np.frombuffer(b"".join(blobs[i] for i in idx), dtype=np.uint8).reshape(len(idx), n)
        mat = mat.astype(np.uint64)
        h = np.full(len(idx), FNV_OFFSET, dtype=np.uint64)
        for col in range(n):
            h ^= mat[:, col]
            h *= prime
        for i, v in zip(idx, h.tolist()):
            out[i] = int(v)
    return out


_PPM_HEADER = re.compile(rb"(P6)\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_ppm(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    # four whitespace-separated header fields, then exactly one whitespace byte
    m = _PPM_HEADER.match(data)
    if m is None or m.group(4) != b"255":
        raise ValueError("only binary P6 PPM with maxval 255 is supported")
    w, h = int(m.group(2)), int(m.group(3))
    if len(data) - m.end() < w * h * 3:
        raise ValueError(f"truncated PPM: expected {w * h * 3} pixel bytes, got {len(data) - m.end()}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pixels.reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def _record(s: TaskSample, image_file: str) -> dict:
    rec = {
        "id": s.id,
        "task": s.task,
        "image_file": image_file,
        "instruction": s.instruction_text,
        "target_text": s.target_text,
        "scene": s.scene.to_dict(),
    }
    if s.bbox is not None:
        rec["bbox"] = list(s.bbox)
    return rec


def write_dataset(samples: Iterable[TaskSample], directory, vocab: Vocabulary) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    blobs = [encode_ppm(s.triple.image) for s in samples]
    hashes = fnv1a64_many(blobs)
    lines, sums = [], []
    for s, blob, h in zip(samples, blobs, hashes):
        image_file = f"images/{s.id}.ppm"
        (d / image_file).write_bytes(blob)
        lines.append(json.dumps(_record(s, image_file), sort_keys=True, separators=(",", ":")))
        sums.append(f"{image_file} {h:016x}")
    (d / "manifest.jsonl").write_bytes("".join(line + "\n" for line in lines).encode("utf-8"))
    (d / "checksums").write_bytes("".join(line + "\n" for line in sums).encode("utf-8"))
    vocab.save(d / "vocab.txt")
    return d


def load_vocabulary(directory) -> Vocabulary:
    path = Path(directory) / "vocab.txt"
    if not path.exists():
        raise DatasetError(f"{directory}: missing vocab.txt")
    return Vocabulary.load(path)


def read_dataset(directory) -> list[TaskSample]:
    d = Path(directory)
    manifest = d / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"{d}: missing manifest.jsonl")
    vocab = load_vocabulary(d)
    sums = {}
    sums_path = d / "checksums"
    if sums_path.exists():
        for line in sums_path.read_text("utf-8").splitlines():
            if line.strip():
                name, hexval = line.rsplit(" ", 1)
                sums[name] = int(hexval, 16)
    records = [json.loads(line) for line in manifest.read_text("utf-8").splitlines() if line.strip()]
    blobs = []
    for rec in records:
        path = d / rec["image_file"]
        if not path.exists():
            raise DatasetError(f"sample {rec['id']}: missing image file {rec['image_file']}")
        blobs.append(path.read_bytes())
    for rec, h in zip(records, fnv1a64_many(blobs)):
        want = sums.get(rec["image_file"])
        if want is None:
            raise DatasetError(f"sample {rec['id']}: no checksum for {rec['image_file']}")
        if want != h:
            raise DatasetError(f"sample {rec['id']}: checksum mismatch for {rec['image_file']}")
    out = []
    for rec, blob in zip(records, blobs):
        triple = MultimodalTriple(
            decode_ppm(blob), vocab.encode(rec["instruction"]), vocab.encode(rec["target_text"])
        )
        bbox = rec.get("bbox")
        out.append(
            TaskSample(
                rec["id"],
                rec["task"],
                triple,
                SceneSpec.from_dict(rec["scene"]),
                rec["instruction"],
                rec["target_text"],
                None if bbox is None else tuple(bbox),
            )
        )
    return out
