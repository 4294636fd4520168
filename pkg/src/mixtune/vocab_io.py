"""Unified token space for text, coordinate bins and special tokens.

Ids are laid out in three contiguous ranges: specials first, then closed
vocabulary words, then ``num_bins`` coordinate tokens spelled ``<bin>k``.
Text is tokenized by whitespace only; the synthetic domain is closed so no
subword model is needed.

The module also packs in-context windows (N context triples plus a query)
and collates them into rectangular numpy batches, padding every shot
position to its own maximum length within the batch.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
DEFAULT_SPECIALS = (PAD, BOS, EOS)
BIN_PREFIX = "<bin>"

MAX_SOURCE_TEXT_LEN = 80
MAX_TARGET_LEN = 30
MAX_VOCAB_SIZE = 65535

_BIN_RE = re.compile(r"<bin>(0|[1-9][0-9]*)")
_VOCAB_MAGIC = "#mixtune-vocab v1"


class VocabError(ValueError):
    """Raised for malformed vocabularies or tokens outside the vocabulary."""


class ContextBudgetError(ValueError):
    """Raised when a packed window exceeds the configured context limit."""

    def __init__(self, budget: int, limit: int):
        self.budget = budget
        self.limit = limit
        self.overflow = budget - limit
        super().__init__(
            f"context window needs {budget} positions, limit is {limit} "
            f"(over by {self.overflow})"
        )


def format_bin(index: int) -> str:
    return f"{BIN_PREFIX}{index}"


def parse_bin(token: str) -> int:
    """Return the bin index of a ``<bin>k`` token string."""
    m = _BIN_RE.fullmatch(token)
    if m is None:
        raise VocabError(f"not a bin token: {token!r}")
    return int(m.group(1))


@dataclass(frozen=True)
class Vocabulary:
    text_tokens: tuple[str, ...]
    num_bins: int
    specials: tuple[str, ...] = DEFAULT_SPECIALS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "text_tokens", tuple(self.text_tokens))
        object.__setattr__(self, "specials", tuple(self.specials))
        index = {}
        for i, tok in enumerate(self.specials + self.text_tokens):
            index[tok] = i
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.specials) + len(self.text_tokens) + self.num_bins

    def __len__(self) -> int:
        return self.size

    @property
    def text_start(self) -> int:
        return len(self.specials)

    @property
    def bin_start(self) -> int:
        return len(self.specials) + len(self.text_tokens)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def is_special(self, i: int) -> bool:
        return 0 <= i < self.text_start

    def is_text(self, i: int) -> bool:
        return self.text_start <= i < self.bin_start

    def is_bin(self, i: int) -> bool:
        return self.bin_start <= i < self.size

    def bin_id(self, index: int) -> int:
        if not 0 <= index < self.num_bins:
            raise VocabError(f"bin index {index} outside [0, {self.num_bins})")
        return self.bin_start + index

    def bin_index(self, i: int) -> int:
        if not self.is_bin(i):
            raise VocabError(f"id {i} is not a bin token")
        return i - self.bin_start

    def token_to_id(self, token: str) -> int:
        i = self._index.get(token)
        if i is not None:
            return i
        if token.startswith(BIN_PREFIX):
            return self.bin_id(parse_bin(token))
        raise VocabError(f"out-of-vocabulary token: {token!r}")

    def id_to_token(self, i: int) -> str:
        if self.is_bin(i):
            return format_bin(i - self.bin_start)
        if 0 <= i < self.bin_start:
            return (self.specials + self.text_tokens)[i]
        raise VocabError(f"id {i} outside vocabulary of size {self.size}")

    def unknown_words(self, text: str) -> list[str]:
        out = []
        for tok in text.split():
            try:
                self.token_to_id(tok)
            except VocabError:
                out.append(tok)
        return out

    def encode(self, text: str) -> list[int]:
        missing = self.unknown_words(text)
        if missing:
            raise VocabError(f"out-of-vocabulary words: {', '.join(missing)}")
        return [self.token_to_id(tok) for tok in text.split()]

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if skip_special and self.is_special(i):
                continue
            toks.append(self.id_to_token(i))
        return " ".join(toks)

    def save(self, path) -> None:
        lines = [_VOCAB_MAGIC, f"num_bins {self.num_bins}", f"num_specials {len(self.specials)}"]
        lines.extend(self.specials)
        lines.extend(self.text_tokens)
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_bytes().decode("utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 3 or lines[0] != _VOCAB_MAGIC:
            raise VocabError(f"{path}: not a vocabulary file")
        try:
            num_bins = int(lines[1].removeprefix("num_bins "))
            num_specials = int(lines[2].removeprefix("num_specials "))
        except ValueError as exc:
            raise VocabError(f"{path}: bad header") from exc
        body = lines[3:]
        return build_vocabulary(body[num_specials:], num_bins, specials=body[:num_specials])


def build_vocabulary(
    text_tokens: Sequence[str], num_bins: int, specials: Sequence[str] = DEFAULT_SPECIALS
) -> Vocabulary:
    """Assign ids specials -> text -> bins, deterministically in input order."""
    if not text_tokens:
        raise VocabError("text_tokens must be non-empty")
    if num_bins < 2:
        raise VocabError(f"num_bins must be >= 2, got {num_bins}")
    for req in DEFAULT_SPECIALS:
        if req not in specials:
            raise VocabError(f"specials must include {req}")
    seen = set()
    for tok in list(specials) + list(text_tokens):
        if tok in seen:
            raise VocabError(f"duplicate token: {tok!r}")
        if not tok or any(c.isspace() for c in tok):
            raise VocabError(f"token must be non-empty without whitespace: {tok!r}")
        if _BIN_RE.fullmatch(tok):
            raise VocabError(f"token collides with bin range: {tok!r}")
        seen.add(tok)
    vocab = Vocabulary(tuple(text_tokens), num_bins, tuple(specials))
    if vocab.size > MAX_VOCAB_SIZE:
        raise VocabError(f"vocabulary size {vocab.size} exceeds {MAX_VOCAB_SIZE}")
    return vocab


def quantize_coord(x: float, num_bins: int) -> int:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"coordinate {x} outside [0, 1]; normalize by image size first")
    b = int(round(x * (num_bins - 1)))
    return min(max(b, 0), num_bins - 1)


def dequantize_coord(b: int, num_bins: int) -> float:
    if not 0 <= b < num_bins:
        raise ValueError(f"bin {b} outside [0, {num_bins})")
    return b / (num_bins - 1)


def serialize_target_box(box: Sequence[float], vocab: Vocabulary) -> list[int]:
    """Four bin ids in x0, y0, x1, y1 order for a normalized box."""
    x0, y0, x1, y1 = box
    if x1 < x0 or y1 < y0:
        raise ValueError(f"inverted box {tuple(box)}")
    return [vocab.bin_id(quantize_coord(v, vocab.num_bins)) for v in (x0, y0, x1, y1)]


def deserialize_box(ids: Sequence[int], vocab: Vocabulary) -> Optional[tuple[float, ...]]:
    """Normalized box from the first four bin tokens of ``ids``; None if fewer exist."""
    bins = [vocab.bin_index(i) for i in ids if vocab.is_bin(int(i))][:4]
    if len(bins) < 4:
        return None
    return tuple(dequantize_coord(b, vocab.num_bins) for b in bins)


@dataclass
class MultimodalTriple:
    image: np.ndarray  # (H, W, 3) uint8
    instruction: list[int]
    target: Optional[list[int]] = None

    def validate(
        self,
        vocab: Vocabulary,
        max_source_len: int = MAX_SOURCE_TEXT_LEN,
        max_target_len: int = MAX_TARGET_LEN,
    ) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError(f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
        if len(self.instruction) > max_source_len:
            raise ValueError(f"instruction length {len(self.instruction)} > {max_source_len}")
        for i in self.instruction:
            if not 0 <= i < vocab.size:
                raise VocabError(f"instruction id {i} outside vocabulary")
        if self.target is not None:
            if len(self.target) > max_target_len:
                raise ValueError(f"target length {len(self.target)} > {max_target_len}")
            for i in self.target:
                if not 0 <= i < vocab.size:
                    raise VocabError(f"target id {i} outside vocabulary")


def patch_count(image_shape: Sequence[int], patch_size: int) -> int:
    h, w = image_shape[0], image_shape[1]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return (h // patch_size) * (w // patch_size)


def example_budget(triple: MultimodalTriple, patch_size: int) -> int:
    tgt = len(triple.target) if triple.target is not None else 0
    return patch_count(triple.image.shape, patch_size) + len(triple.instruction) + tgt + 2


@dataclass
class PackedContextWindow:
    context: list[MultimodalTriple]
    query_image: np.ndarray
    query_instruction: list[int]
    query_target: Optional[list[int]]
    patch_size: int
    # (bos_position, eos_position) of each context example within the prefix
    boundaries: list[tuple[int, int]]

    @property
    def n_shots(self) -> int:
        return len(self.context)

    @property
    def context_budget(self) -> int:
        return sum(example_budget(t, self.patch_size) for t in self.context)

    @property
    def query_source_len(self) -> int:
        return patch_count(self.query_image.shape, self.patch_size) + len(self.query_instruction)

    @property
    def budget(self) -> int:
        return self.context_budget + self.query_source_len


def pack_context_window(
    context: Sequence[MultimodalTriple],
    query: MultimodalTriple,
    patch_size: int = 8,
    context_limit: Optional[int] = None,
) -> PackedContextWindow:
    context = list(context)
    boundaries = []
    pos = 0
    for t in context:
        if t.target is None:
            raise ValueError("context examples must carry a target")
        n = example_budget(t, patch_size)
        boundaries.append((pos, pos + n - 1))
        pos += n
    window = PackedContextWindow(
        context=context,
        query_image=query.image,
        query_instruction=list(query.instruction),
        query_target=None if query.target is None else list(query.target),
        patch_size=patch_size,
        boundaries=boundaries,
    )
    if context_limit is not None and window.budget > context_limit:
        raise ContextBudgetError(window.budget, context_limit)
    return window


@dataclass
class ShotBatch:
    images: np.ndarray  # (B, H, W, 3) uint8
    instruction: np.ndarray  # (B, I) int64
    instruction_mask: np.ndarray  # (B, I) bool
    target: np.ndarray  # (B, T) int64
    target_mask: np.ndarray  # (B, T) bool


@dataclass
class Batch:
    shots: list[ShotBatch]
    query_images: np.ndarray
    query_instruction: np.ndarray
    query_instruction_mask: np.ndarray
    # decoder input is BOS + target, labels are target + EOS
    decoder_input: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    label_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.query_images.shape[0]

    @property
    def n_shots(self) -> int:
        return len(self.shots)


def _pad(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def collate_batch(windows: Sequence[PackedContextWindow], pad_id: int, bos_id: int, eos_id: int) -> Batch:
    if not windows:
        raise ValueError("cannot collate an empty batch")
    n = windows[0].n_shots
    if any(w.n_shots != n for w in windows):
        counts = sorted({w.n_shots for w in windows})
        raise ValueError(f"mixed shot counts in one batch: {counts}")
    shots = []
    for k in range(n):
        exs = [w.context[k] for w in windows]
        instr, instr_mask = _pad([e.instruction for e in exs], pad_id)
        tgt, tgt_mask = _pad([e.target for e in exs], pad_id)
        shots.append(ShotBatch(np.stack([e.image for e in exs]), instr, instr_mask, tgt, tgt_mask))
    q_instr, q_mask = _pad([w.query_instruction for w in windows], pad_id)
    batch = Batch(shots, np.stack([w.query_image for w in windows]), q_instr, q_mask)
    if all(w.query_target is not None for w in windows):
        batch.decoder_input, _ = _pad([[bos_id] + w.query_target for w in windows], pad_id)
        batch.labels, batch.label_mask = _pad([w.query_target + [eos_id] for w in windows], pad_id)
    return batch


def uncollate_batch(batch: Batch) -> list[dict]:
    """Strip padding back off; inverse of collate_batch on token content."""
    out = []
    for b in range(batch.size):
        rec = {
            "context": [
                (
                    s.instruction[b][s.instruction_mask[b]].tolist(),
                    s.target[b][s.target_mask[b]].tolist(),
                )
                for s in batch.shots
            ],
            "query_instruction": batch.query_instruction[b][batch.query_instruction_mask[b]].tolist(),
        }
        if batch.labels is not None:
            rec["query_target"] = batch.labels[b][batch.label_mask[b]].tolist()[:-1]
        out.append(rec)
    return out
