"""Tiny unified encoder-decoder transformer.

The encoder consumes a sequence of embeddings (image patches followed by
instruction tokens, optionally preceded by an in-context prefix); the
decoder predicts target tokens under a causal mask with teacher forcing.
Positions are learned and assigned sequentially over the non-padding
entries of the encoder input, so padding never shifts a token's position.
"""
from __future__ import annotations

import math
from typing import Optional
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 512
    patch_size: int = 8
    max_positions: int = 1024
    max_target_positions: int = 32
    dropout: float = 0.0
    # append normalized x/y channels before patchifying (CoordConv)
    coord_features: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class PatchEncoder(nn.Module):
    """Strided convolution over non-overlapping patches, then a 1x1 mixing conv.

    With ``coord_features`` two extra input channels carry each pixel's
    x and y in [-1, 1], so patch features know where they are.
    """

    def __init__(self, d_model: int, patch_size: int, coord_features: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.coord_features = coord_features
        self.patch = nn.Conv2d(5 if coord_features else 3, d_model, kernel_size=patch_size, stride=patch_size)
        self.mix = nn.Conv2d(d_model, d_model, kernel_size=1)

    def forward(self, images: Tensor) -> Tensor:
        # images: (B, H, W, 3) uint8
        b, h, w, _ = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        dt = self.patch.weight.dtype
        x = images.permute(0, 3, 1, 2).to(dt) / 127.5 - 1.0
        if self.coord_features:
            ys = torch.linspace(-1.0, 1.0, h, dtype=dt, device=x.device).view(1, 1, h, 1).expand(b, 1, h, w)
            xs = torch.linspace(-1.0, 1.0, w, dtype=dt, device=x.device).view(1, 1, 1, w).expand(b, 1, h, w)
            x = torch.cat([x, xs, ys], 1)
        x = self.mix(F.gelu(self.patch(x)))
        return x.flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def forward(self, x: Tensor, mem: Tensor, key_mask: Tensor | None = None, causal: bool = False) -> Tensor:
        b, lq, d = x.shape
        lk = mem.shape[1]
        h = self.n_heads
        q = self.q(x).view(b, lq, h, d // h).transpose(1, 2)
        k = self.k(mem).view(b, lk, h, d // h).transpose(1, 2)
        v = self.v(mem).view(b, lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        neg = torch.finfo(scores.dtype).min
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], neg)
        if causal:
            future = torch.ones(lq, lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, neg)
        attn = scores.softmax(-1)
        attn = F.dropout(attn, self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(d_model, ffn_dim)
        self.down = nn.Linear(ffn_dim, d_model)
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.dropout(F.gelu(self.up(x)), self.dropout, self.training))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        y = self.ln1(x)
        x = x + F.dropout(self.attn(y, y, mask), self.dropout, self.training)
        return x + F.dropout(self.ffn(self.ln2(x)), self.dropout, self.training)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x: Tensor, memory: Tensor, memory_mask: Tensor) -> Tensor:
        y = self.ln1(x)
        x = x + F.dropout(self.self_attn(y, y, causal=True), self.dropout, self.training)
        x = x + F.dropout(self.cross_attn(self.ln2(x), memory, memory_mask), self.dropout, self.training)
        return x + F.dropout(self.ffn(self.ln3(x)), self.dropout, self.training)


def init_params(module: nn.Module, rng_seed: int, exclude: tuple[str, ...] = ()) -> None:
    """Seeded init: zero biases, unit LayerNorm gains, N(0, 1/fan_in) weights.

    For d_model x d_model projections the std is exactly 1/sqrt(d_model).
    Parameters are visited in registration order so the draw is reproducible.
    """
    g = torch.Generator().manual_seed(rng_seed)
    norm_params = {
        f"{mod_name}.{p}".lstrip(".")
        for mod_name, mod in module.named_modules()
        if isinstance(mod, nn.LayerNorm)
        for p in ("weight", "bias")
    }
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.startswith(exclude):
                continue
            if name.endswith("bias"):
                p.zero_()
            elif name in norm_params:
                p.fill_(1.0)
            else:
                # Linear (out, in), Embedding (V, d), Conv (out, in, k, k)
                fan_in = p[0].numel()
                std = 0.02 if "pos_embed" in name else 1.0 / math.sqrt(fan_in)
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)


def positions_from_mask(mask: Tensor) -> Tensor:
    """Sequential position ids over valid entries; padding gets 0."""
    return (mask.long().cumsum(-1) - 1).clamp(min=0)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, rng_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.image_encoder = PatchEncoder(cfg.d_model, cfg.patch_size, cfg.coord_features)
        self.enc_pos_embed = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.dec_pos_embed = nn.Embedding(cfg.max_target_positions, cfg.d_model)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        init_params(self, rng_seed)

    def embed_image(self, images: Tensor) -> Tensor:
        return self.image_encoder(images)

    def embed_source(self, images: Tensor, instruction: Tensor, instruction_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Query source sequence [image patches, instruction] and its mask."""
        patches = self.embed_image(images)
        pmask = torch.ones(patches.shape[:2], dtype=torch.bool, device=patches.device)
        return (
            torch.cat([patches, self.tok_embed(instruction)], 1),
            torch.cat([pmask, instruction_mask], 1),
        )

    def encode(self, inputs: Tensor, mask: Tensor, positions: Optional[Tensor] = None) -> Tensor:
        pos = positions_from_mask(mask) if positions is None else positions
        if inputs.shape[1] and int(pos.max()) >= self.cfg.max_positions:
            raise ValueError(f"encoder input of {int(pos.max()) + 1} positions exceeds {self.cfg.max_positions}")
        x = inputs + self.enc_pos_embed(pos)
        x = F.dropout(x, self.cfg.dropout, self.training)
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(self, dec_input: Tensor, memory: Tensor, memory_mask: Tensor) -> Tensor:
        """Teacher-forced logits (B, T, V); position i sees dec_input[:, :i+1] only."""
        t = dec_input.shape[1]
        if t > self.cfg.max_target_positions:
            raise ValueError(f"target length {t} exceeds {self.cfg.max_target_positions} positions")
        pos = torch.arange(t, device=dec_input.device)
        x = self.tok_embed(dec_input) + self.dec_pos_embed(pos)
        x = F.dropout(x, self.cfg.dropout, self.training)
        for layer in self.decoder:
            x = layer(x, memory, memory_mask)
        return self.dec_norm(x) @ self.tok_embed.weight.T

    def forward(self, images, instruction, instruction_mask, dec_input):
        src, mask = self.embed_source(images, instruction, instruction_mask)
        return self.decode(dec_input, self.encode(src, mask), mask)


def loss_nll(logits: Tensor, targets: Tensor, mask: Tensor) -> Tensor:
    """Mean negative log-likelihood over unmasked target positions."""
    if not bool(mask.any()):
        raise ValueError("all target positions are masked")
    logp = logits.log_softmax(-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.to(logp.dtype)
    return -(logp * m).sum() / m.sum()
