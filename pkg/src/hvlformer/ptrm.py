"""Pixel-text refinement: spatially gated, bidirectional query/feature adaptation.

Shapes are batched and channel-first: queries ``[B, K, D]``, pixel levels
``[B, D, h, w]``, text maps ``[B, K, J, h, w]``, visual maps ``[B, J, h, w]``
and gates ``[B, 1, h, w]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig


@dataclass
class SharedLatentPair:
    text: torch.Tensor  # T  [B, K, J, h, w]
    visual: torch.Tensor  # V  [B, J, h, w]
    affinity: torch.Tensor  # alpha  [B, K, h, w], sums to 1 over space

    @property
    def fused(self) -> torch.Tensor:
        return self.text + self.visual[:, None]


@dataclass
class AttentionGates:
    text: torch.Tensor  # W_T
    visual: torch.Tensor  # W_V
    fused: torch.Tensor  # W_F


@dataclass
class RefinedOutputs:
    queries: torch.Tensor  # [B, K, D]
    pixels: torch.Tensor  # [B, D, h, w]


class PTRMLevel(nn.Module):
    """Parameters of one pixel level: latent projections, gate convs, output maps."""

    def __init__(self, d: int, j: int, gate_hidden: int = 8):
        super().__init__()
        self.q_proj = nn.Linear(d, j)
        self.v_proj = nn.Conv2d(d, j, 1)
        self.gate = nn.Sequential(
            nn.Conv2d(3, gate_hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(gate_hidden, 3, 3, padding=1),
        )
        self.t_out = nn.Linear(j, d)
        self.v_out = nn.Conv2d(j, d, 1)

    def project(self, q: torch.Tensor, z: torch.Tensor) -> SharedLatentPair:
        return project_to_latent(q, z, self)

    def gates(self, pair: SharedLatentPair) -> AttentionGates:
        return compute_gates(pair, self)


def project_to_latent(q: torch.Tensor, z: torch.Tensor, level: PTRMLevel) -> SharedLatentPair:
    """Project queries and features into the shared space and spread each query over space.

    ``alpha_k`` is a spatial softmax of the query/feature inner product.  The
    text map is ``h*w * alpha_k * proj(q_k)``, i.e. the affinity rescaled to a
    spatial mean of one so pooling it back recovers ``proj(q_k)`` when the
    affinity is uniform.
    """
    v = level.v_proj(z)
    qp = level.q_proj(q)  # [B, K, J]
    b, j, h, w = v.shape
    logits = torch.einsum("bkj,bjs->bks", qp, v.reshape(b, j, h * w))
    alpha = torch.softmax(logits, dim=-1).reshape(b, -1, h, w)
    text = (h * w) * alpha[:, :, None] * qp[..., None, None]
    return SharedLatentPair(text, v, alpha)


def pool_maps(pair: SharedLatentPair) -> torch.Tensor:
    """Channel-and-query mean of T, V and F stacked as ``[B, 3, h, w]``."""
    st = pair.text.mean(dim=(1, 2))
    sv = pair.visual.mean(dim=1)
    sf = pair.fused.mean(dim=(1, 2))
    return torch.stack([st, sv, sf], dim=1)


def compute_gates(pair: SharedLatentPair, level: PTRMLevel) -> AttentionGates:
    w = torch.sigmoid(level.gate(pool_maps(pair)))
    return AttentionGates(w[:, 0:1], w[:, 1:2], w[:, 2:3])


def bidirectional_refine(pair: SharedLatentPair, gates: AttentionGates) -> tuple[torch.Tensor, torch.Tensor]:
    t_new = pair.text * (gates.visual * gates.fused)[:, None]
    v_new = pair.visual * gates.text * gates.fused
    return t_new, v_new


def finalize_level(t_new: torch.Tensor, v_new: torch.Tensor, q: torch.Tensor, level: PTRMLevel) -> RefinedOutputs:
    pooled = t_new.mean(dim=(-2, -1))  # [B, K, J]
    return RefinedOutputs(q + level.t_out(pooled), level.v_out(v_new))


def cross_scale_refine(
    queries: list[torch.Tensor],
    extra_levels: list[torch.Tensor],
    extra_params: list[PTRMLevel],
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Let every pixel level beyond the textual hierarchy refine all query levels.

    For each extra level ``e'`` and each textual level ``e`` in turn, gates are
    computed from the pair (queries e, features e'); the text map is updated
    with ``W_V^{e'} * W_F^{e'}`` and the visual map of ``e'`` accumulates
    ``W_T * W_F``.  Returns updated queries and the extra levels' outputs.
    """
    queries = list(queries)
    outs = []
    for z, level in zip(extra_levels, extra_params):
        v = None
        for e, q in enumerate(queries):
            pair = level.project(q, z)
            if v is not None:
                pair = SharedLatentPair(pair.text, v, pair.affinity)
            gates = level.gates(pair)
            t_new, v = bidirectional_refine(pair, gates)
            queries[e] = q + level.t_out(t_new.mean(dim=(-2, -1)))
        outs.append(level.v_out(v))
    return queries, outs


class PTRM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.levels = nn.ModuleList([PTRMLevel(cfg.embed_dim, cfg.latent_dim) for _ in range(cfg.pixel_levels)])

    def refine_level(self, q: torch.Tensor, z: torch.Tensor, e: int) -> RefinedOutputs:
        level = self.levels[e]
        pair = project_to_latent(q, z, level)
        gates = compute_gates(pair, level)
        t_new, v_new = bidirectional_refine(pair, gates)
        return finalize_level(t_new, v_new, q, level)

    def forward(self, q_levels: list[torch.Tensor], z_levels: list[torch.Tensor]
                ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """``q_levels``: E tensors ``[B, K, D]``; ``z_levels``: L >= E feature maps."""
        e_txt = len(q_levels)
        outs = [self.refine_level(q, z_levels[e], e) for e, q in enumerate(q_levels)]
        queries = [o.queries for o in outs]
        pixels = [o.pixels for o in outs]
        if e_txt < len(z_levels):
            queries, extra = cross_scale_refine(queries, z_levels[e_txt:], list(self.levels[e_txt:]))
            pixels += extra
        return queries, pixels


class CrossAttentionRefiner(nn.Module):
    """Ablation stand-in: plain bidirectional token cross-attention per level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.t2p = nn.ModuleList([nn.MultiheadAttention(d, cfg.num_heads, batch_first=True) for _ in range(cfg.pixel_levels)])
        self.p2t = nn.ModuleList([nn.MultiheadAttention(d, cfg.num_heads, batch_first=True) for _ in range(cfg.pixel_levels)])

    def forward(self, q_levels, z_levels):
        queries, pixels = [], []
        for e, z in enumerate(z_levels):
            b, d, h, w = z.shape
            tokens = z.flatten(2).transpose(1, 2)
            if e < len(q_levels):
                q = q_levels[e]
                q_new = q + self.t2p[e](q, tokens, tokens, need_weights=False)[0]
                tok_new = tokens + self.p2t[e](tokens, q, q, need_weights=False)[0]
                queries.append(q_new)
                pixels.append(tok_new.transpose(1, 2).reshape(b, d, h, w))
            else:
                pixels.append(z)
        return queries, pixels


class IdentityRefiner(nn.Module):
    def forward(self, q_levels, z_levels):
        return list(q_levels), list(z_levels)


def build_refiner(cfg: ModelConfig) -> nn.Module:
    if cfg.ptrm_mode == "ptrm":
        return PTRM(cfg)
    if cfg.ptrm_mode == "crossattn":
        return CrossAttentionRefiner(cfg)
    return IdentityRefiner()
