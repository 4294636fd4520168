"""Trainable in-context prefix module over a frozen backbone.

Three components encode N context triples [image, instruction, target]
into a prefix of embeddings: a visual encoder of its own, a text embedding
table and a target embedding table. Each example becomes the segment
``[BOS, patches, instruction, target, EOS]``; segments are concatenated in
order and placed before the query's source embeddings in the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import Backbone, PatchEncoder, init_params, loss_nll, positions_from_mask
from .vocab_io import Batch, MultimodalTriple, PackedContextWindow, collate_batch


@dataclass
class PrefixSequence:
    embeddings: Tensor  # (L, d_model)
    boundaries: list[tuple[int, int]]  # (bos, eos) index per example
    n_shots: int

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


class MixtModule(nn.Module):
    def __init__(self, vocab_size: int, d_model: int, patch_size: int, bos_id: int, eos_id: int,
                 coord_features: bool = True):
        super().__init__()
        self.visual_encoder = PatchEncoder(d_model, patch_size, coord_features)
        self.text_embedding = nn.Embedding(vocab_size, d_model)
        self.target_embedding = nn.Embedding(vocab_size, d_model)
        self.bos_id = bos_id
        self.eos_id = eos_id

    def encode_shots(self, shots) -> tuple[Tensor, Tensor]:
        """Prefix (B, L, d) and mask (B, L) for collated shot tensors."""
        dev = self.text_embedding.weight.device
        dt = self.text_embedding.weight.dtype
        segs, masks = [], []
        for s in shots:
            b = s["images"].shape[0]
            patches = self.visual_encoder(s["images"])
            bos = self.text_embedding(torch.full((b, 1), self.bos_id, device=dev))
            eos = self.text_embedding(torch.full((b, 1), self.eos_id, device=dev))
            segs.append(
                torch.cat(
                    [bos, patches, self.text_embedding(s["instruction"]), self.target_embedding(s["target"]), eos], 1
                )
            )
            ones = torch.ones(b, 1 + patches.shape[1], dtype=torch.bool, device=dev)
            masks.append(
                torch.cat([ones, s["instruction_mask"], s["target_mask"], torch.ones(b, 1, dtype=torch.bool, device=dev)], 1)
            )
        if not segs:
            return torch.zeros(0, 0, self.text_embedding.embedding_dim, dtype=dt, device=dev), None
        return torch.cat(segs, 1), torch.cat(masks, 1)

    def encode_context_example(self, triple: MultimodalTriple) -> Tensor:
        shot = _shot_tensors([triple], self.text_embedding.weight.device)
        seg, _ = self.encode_shots([shot])
        return seg[0]

    def build_prefix(self, context: Sequence[MultimodalTriple], context_limit: Optional[int] = None) -> PrefixSequence:
        segs, bounds, pos = [], [], 0
        for t in context:
            seg = self.encode_context_example(t)
            segs.append(seg)
            bounds.append((pos, pos + seg.shape[0] - 1))
            pos += seg.shape[0]
        if context_limit is not None and pos > context_limit:
            raise ValueError(f"prefix of {pos} positions exceeds limit {context_limit} by {pos - context_limit}")
        d = self.text_embedding.embedding_dim
        emb = torch.cat(segs, 0) if segs else self.text_embedding.weight.new_zeros(0, d)
        return PrefixSequence(emb, bounds, len(context))


def init_from_backbone(backbone: Backbone, rng_seed: int, bos_id: int = 1, eos_id: int = 2) -> MixtModule:
    """Fresh visual encoder from ``rng_seed``; both tables copy the backbone token embedding."""
    cfg = backbone.cfg
    emb = backbone.tok_embed.weight
    if emb.shape[1] != cfg.d_model:
        raise ValueError(f"embedding width {emb.shape[1]} != d_model {cfg.d_model}")
    m = MixtModule(cfg.vocab_size, cfg.d_model, cfg.patch_size, bos_id, eos_id, cfg.coord_features)
    init_params(m.visual_encoder, rng_seed)
    with torch.no_grad():
        m.text_embedding.weight.copy_(emb)
        m.target_embedding.weight.copy_(emb)
    return m.to(dtype=emb.dtype, device=emb.device)


def attach_prefix(prefix: Tensor, prefix_mask: Optional[Tensor], query: Tensor, query_mask: Tensor) -> tuple[Tensor, Tensor]:
    """Concatenate prefix rows before the query source rows."""
    if prefix.shape[-2] == 0 or prefix_mask is None:
        return query, query_mask
    if prefix.shape[-1] != query.shape[-1]:
        raise ValueError(f"prefix width {prefix.shape[-1]} != query width {query.shape[-1]}")
    return torch.cat([prefix, query], -2), torch.cat([prefix_mask, query_mask], -1)


def _shot_tensors(triples: Sequence[MultimodalTriple], device) -> dict:
    # single-example or pre-padded path used outside collate_batch
    width_i = max(len(t.instruction) for t in triples)
    width_t = max(len(t.target) for t in triples)

    def pad(seqs, w):
        ids = torch.zeros(len(seqs), w, dtype=torch.long)
        m = torch.zeros(len(seqs), w, dtype=torch.bool)
        for r, s in enumerate(seqs):
            ids[r, : len(s)] = torch.tensor(s, dtype=torch.long)
            m[r, : len(s)] = True
        return ids.to(device), m.to(device)

    instr, imask = pad([t.instruction for t in triples], width_i)
    tgt, tmask = pad([t.target for t in triples], width_t)
    images = torch.from_numpy(np.stack([t.image for t in triples])).to(device)
    return {"images": images, "instruction": instr, "instruction_mask": imask, "target": tgt, "target_mask": tmask}


def batch_tensors(batch: Batch, device="cpu") -> dict:
    def t(a):
        return None if a is None else torch.from_numpy(a).to(device)

    return {
        "shots": [
            {
                "images": t(s.images),
                "instruction": t(s.instruction),
                "instruction_mask": t(s.instruction_mask),
                "target": t(s.target),
                "target_mask": t(s.target_mask),
            }
            for s in batch.shots
        ],
        "query_images": t(batch.query_images),
        "query_instruction": t(batch.query_instruction),
        "query_instruction_mask": t(batch.query_instruction_mask),
        "decoder_input": t(batch.decoder_input),
        "labels": t(batch.labels),
        "label_mask": t(batch.label_mask),
    }


class IclModel(nn.Module):
    """Backbone with an optional prefix module; without one it is the bare backbone."""

    def __init__(self, backbone: Backbone, mixt: Optional[MixtModule] = None):
        super().__init__()
        self.backbone = backbone
        self.mixt = mixt

    def freeze_backbone(self) -> None:
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        if self.mixt is not None:
            for p in self.mixt.parameters():
                p.requires_grad_(True)

    def encode(self, tb: dict) -> tuple[Tensor, Tensor]:
        bb = self.backbone
        src, smask = bb.embed_source(tb["query_images"], tb["query_instruction"], tb["query_instruction_mask"])
        if not tb["shots"]:
            return bb.encode(src, smask), smask
        if self.mixt is None:
            raise ValueError("context examples given to a model without a prefix module")
        prefix, pmask = self.mixt.encode_shots(tb["shots"])
        # the query keeps the positions it has without context and the prefix
        # is numbered after it, so a backbone pretrained zero-shot sees its
        # query at familiar positions
        qpos = positions_from_mask(smask)
        ppos = smask.sum(-1, keepdim=True) + positions_from_mask(pmask)
        src_all, mask_all = attach_prefix(prefix, pmask, src, smask)
        return bb.encode(src_all, mask_all, torch.cat([ppos, qpos], 1)), mask_all

    def logits(self, tb: dict) -> Tensor:
        memory, mmask = self.encode(tb)
        return self.backbone.decode(tb["decoder_input"], memory, mmask)

    def loss(self, tb: dict) -> Tensor:
        """NLL over the query target only; context targets only condition."""
        if tb["labels"] is None:
            raise ValueError("window has no query target")
        return loss_nll(self.logits(tb), tb["labels"], tb["label_mask"])

    def collate(self, windows: Sequence[PackedContextWindow], vocab) -> dict:
        dev = self.backbone.tok_embed.weight.device
        return batch_tensors(collate_batch(windows, vocab.pad_id, vocab.bos_id, vocab.eos_id), dev)


def icl_loss(window: PackedContextWindow, model: IclModel, vocab) -> Tensor:
    if window.query_target is None:
        raise ValueError("window has no query target")
    return model.loss(model.collate([window], vocab))
