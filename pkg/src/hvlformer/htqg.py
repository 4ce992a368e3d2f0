"""Hierarchical textual query generation and semantic relevance estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

log = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class HierarchicalQuerySet:
    raw: torch.Tensor  # [K, E, D]
    relevance: torch.Tensor  # [B, K]
    weighted: torch.Tensor  # [B, K, E, D]


class QueryHeads(nn.Module):
    """E independent two-layer MLPs mapping a class embedding to one query per level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        if cfg.use_htqg:
            self.heads = nn.ModuleList([
                nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
                for _ in range(cfg.hierarchy_levels)
            ])
        else:
            # single-level baseline: one linear projection per class embedding
            self.heads = nn.ModuleList([nn.Linear(d, d) for _ in range(cfg.hierarchy_levels)])

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return torch.stack([head(t) for head in self.heads], dim=1)


def generate_queries(t: torch.Tensor, heads: QueryHeads) -> torch.Tensor:
    """``[K, C]`` text embeddings -> ``[K, E, D]`` hierarchical queries."""
    return heads(t)


def diversity_loss(q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over classes of the squared cosine summed over ordered level pairs."""
    k, e, _ = q.shape
    if e < 2:
        return q.new_zeros(())
    norms = q.norm(dim=-1)
    gram = q @ q.transpose(1, 2)
    cos = gram / (norms[:, :, None] * norms[:, None, :]).clamp_min(eps)
    off = ~torch.eye(e, dtype=torch.bool, device=q.device)
    return (cos**2)[:, off].sum(dim=1).mean()


class SemanticRelevanceEstimator(nn.Module):
    """``s_k = sigmoid(MLP([phi(f_1..f_L), t_k]))`` with phi a linear fusion of pooled levels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.phi = nn.Linear(cfg.pixel_levels * d, d)
        self.mlp = nn.Sequential(nn.Linear(2 * d, d), nn.GELU(), nn.Linear(d, 1))

    def logits(self, levels: list[torch.Tensor], t: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([z.mean(dim=(-2, -1)) for z in levels], dim=-1)
        fused = self.phi(pooled)  # [B, D]
        b, k = fused.shape[0], t.shape[0]
        pair = torch.cat([fused[:, None, :].expand(b, k, -1), t[None].expand(b, k, -1)], dim=-1)
        return self.mlp(pair).squeeze(-1)

    def forward(self, levels: list[torch.Tensor], t: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(levels, t))


def relevance_scores(levels: list[torch.Tensor], t: torch.Tensor, sre: SemanticRelevanceEstimator) -> torch.Tensor:
    return sre(levels, t)


def weight_queries(q: torch.Tensor, s: torch.Tensor, mode: str = "soft") -> torch.Tensor:
    """Scale every level of class k by its relevance: ``[K,E,D] x [B,K] -> [B,K,E,D]``."""
    if mode == "soft":
        w = s
    elif mode == "threshold":
        w = (s > 0.5).to(q.dtype)
    elif mode == "none":
        w = torch.ones_like(s)
    else:
        raise ValueError(f"unknown relevance mode {mode!r}")
    if q.dim() == 3:
        q = q[None]
    return w[..., None, None] * q


def pretrain_sre(
    sre: SemanticRelevanceEstimator,
    batches: Callable[[int], tuple[list[torch.Tensor], torch.Tensor]],
    t: torch.Tensor,
    iters: int,
    lr: float = 1e-3,
) -> list[float]:
    """Fit the estimator with BCE against class-presence targets, then freeze it.

    ``batches(i)`` returns (pooled-ready feature levels, ``[B, K]`` presence).
    Features and text embeddings are treated as constants.
    """
    sre.train()
    for p in sre.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(sre.parameters(), lr=lr, weight_decay=1e-4)
    t = t.detach()
    history = []
    for i in range(iters):
        levels, target = batches(i)
        levels = [z.detach() for z in levels]
        loss = F.binary_cross_entropy_with_logits(sre.logits(levels, t), target.to(t))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    freeze(sre)
    if history:
        log.info("SRE pretraining: loss %.4f -> %.4f over %d iters", history[0], history[-1], iters)
    return history


def freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
