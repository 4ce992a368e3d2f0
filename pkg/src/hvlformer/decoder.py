"""Masked-attention transformer decoder with shared per-layer mask and class heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


@dataclass
class DecoderTrace:
    """Per-layer outputs, all batched.

    queries ``[B, Q, D]``, class_logits ``[B, Q, K]``, mask_logits
    ``[B, Q, H, W]``, attention ``[B, Q, h_n, w_n]`` (head-averaged),
    predictions ``[B, K, H, W]``; ``levels[n]`` is the pixel level layer n read.
    """

    queries: list[torch.Tensor] = field(default_factory=list)
    class_logits: list[torch.Tensor] = field(default_factory=list)
    mask_logits: list[torch.Tensor] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)
    predictions: list[torch.Tensor] = field(default_factory=list)
    levels: list[int] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.predictions)

    def select(self, idx) -> "DecoderTrace":
        return DecoderTrace(
            [x[idx] for x in self.queries],
            [x[idx] for x in self.class_logits],
            [x[idx] for x in self.mask_logits],
            [x[idx] for x in self.attention],
            [x[idx] for x in self.predictions],
            list(self.levels),
        )


def compose_prediction(class_logits: torch.Tensor, mask_logits: torch.Tensor) -> torch.Tensor:
    """``Y[c] = sum_i softmax(C)[i, c] * sigmoid(M[i])`` over queries."""
    probs = class_logits.softmax(dim=-1)
    return torch.einsum("...qk,...qhw->...khw", probs, mask_logits.sigmoid())


def class_probabilities(pred: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Normalise composed scores ``[..., K, H, W]`` into per-pixel class distributions."""
    return pred / (pred.sum(dim=-3, keepdim=True) + eps)


def segment(pred: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest id
    return pred.argmax(dim=-3)


def predict_masks(queries: torch.Tensor, z_pixel: torch.Tensor, mask_embed: nn.Module) -> torch.Tensor:
    """Mask logits ``[B, Q, H, W]`` = mask embeddings dotted with every pixel embedding."""
    return torch.einsum("bqd,bdhw->bqhw", mask_embed(queries), z_pixel)


def sine_position(h: int, w: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding ``[h*w, d]``."""
    quarter = max(d // 4, 1)
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freq
    py = torch.cat([ys.sin(), ys.cos()], dim=-1)
    px = torch.cat([xs.sin(), xs.cos()], dim=-1)
    pos = torch.cat([py[:, None, :].expand(h, w, -1), px[None, :, :].expand(h, w, -1)], dim=-1)
    pos = pos.reshape(h * w, -1)
    if pos.shape[1] < d:
        pos = F.pad(pos, (0, d - pos.shape[1]))
    return pos[:, :d].to(dtype)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention returning head-averaged probabilities."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, query, key, value, allowed: torch.Tensor | None = None):
        b, nq, d = query.shape
        ns = key.shape[1]
        hd = d // self.heads
        q = self.q(query).reshape(b, nq, self.heads, hd).transpose(1, 2)
        k = self.k(key).reshape(b, ns, self.heads, hd).transpose(1, 2)
        v = self.v(value).reshape(b, ns, self.heads, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if allowed is not None:
            logits = logits.masked_fill(~allowed[:, None], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out), attn.mean(dim=1)


class DecoderLayer(nn.Module):
    """Masked cross-attention, then self-attention, then FFN (post-norm)."""

    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.cross = MultiHeadAttention(d, heads)
        self.self_attn = MultiHeadAttention(d, heads)
        self.ffn = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Linear(ff, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, query_pos, memory, memory_pos, allowed):
        out, attn = self.cross(x + query_pos, memory + memory_pos, memory, allowed)
        x = self.norm1(x + out)
        qk = x + query_pos
        out, _ = self.self_attn(qk, qk, x)
        x = self.norm2(x + out)
        x = self.norm3(x + self.ffn(x))
        return x, attn


def attention_allowed(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Positions where the resized previous mask is foreground; empty rows fall back to all."""
    m = F.interpolate(mask_logits.detach(), size=size, mode="bilinear", align_corners=False)
    allowed = (m > 0).flatten(2)  # sigmoid > 0.5
    empty = ~allowed.any(dim=-1, keepdim=True)
    return allowed | empty


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.layers = nn.ModuleList([DecoderLayer(d, cfg.num_heads, 2 * d) for _ in range(cfg.decoder_layers)])
        self.query_embed = nn.Parameter(torch.zeros(cfg.num_queries, d))
        self.level_embed = nn.Parameter(torch.zeros(cfg.pixel_levels, d))
        self.decoder_norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, cfg.num_classes)
        self.mask_embed = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

    def level_for_layer(self, n: int, num_levels: int) -> int:
        """0-based pixel level read by 0-based layer ``n`` (round-robin, coarse first)."""
        return n % num_levels

    def heads(self, x: torch.Tensor, z_pixel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.decoder_norm(x)
        return self.class_head(h), predict_masks(h, z_pixel, self.mask_embed)

    def forward(self, queries: torch.Tensor, z_out: list[torch.Tensor], z_pixel: torch.Tensor) -> DecoderTrace:
        b, nq, d = queries.shape
        query_pos = self.query_embed[:nq][None].expand(b, -1, -1)
        memories = []
        for e, z in enumerate(z_out):
            h, w = z.shape[-2:]
            pos = sine_position(h, w, d, z.dtype).to(z.device)
            memories.append((z.flatten(2).transpose(1, 2) + self.level_embed[e], pos[None], (h, w)))

        trace = DecoderTrace()
        x = queries
        _, mask_logits = self.heads(x, z_pixel)
        for n, layer in enumerate(self.layers):
            e = self.level_for_layer(n, len(z_out))
            memory, pos, size = memories[e]
            allowed = attention_allowed(mask_logits, size)
            x, attn = layer(x, query_pos, memory, pos, allowed)
            class_logits, mask_logits = self.heads(x, z_pixel)
            trace.queries.append(x)
            trace.class_logits.append(class_logits)
            trace.mask_logits.append(mask_logits)
            trace.attention.append(attn.reshape(b, nq, *size))
            trace.predictions.append(compose_prediction(class_logits, mask_logits))
            trace.levels.append(e)
        return trace


def decode(queries, z_out, z_pixel, decoder: MaskDecoder) -> DecoderTrace:
    return decoder(queries, z_out, z_pixel)


def query_class_targets(num_classes: int, levels: int) -> torch.Tensor:
    """Fixed matching: query ``i`` always predicts class ``i // E``."""
    return torch.arange(num_classes * levels) // levels
