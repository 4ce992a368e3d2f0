"""Full network: image encoder -> pixel decoder -> text queries -> refinement -> masked decoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ClassSpec, ModelConfig, seeded_init_
from .decoder import DecoderTrace, MaskDecoder
from .encoders import ImageEncoder, MultiScaleFeatures, PixelDecoder, TextEmbedder, TextEmbeddingSet
from .htqg import QueryHeads, SemanticRelevanceEstimator, freeze, weight_queries
from .ptrm import build_refiner


@dataclass
class ForwardOutput:
    raw: MultiScaleFeatures  # trainable encoder
    pixels: MultiScaleFeatures  # after the pixel decoder
    text: TextEmbeddingSet
    queries_raw: torch.Tensor  # [K, E, D]
    relevance: torch.Tensor  # [B, K]
    refined_queries: list[torch.Tensor]  # E x [B, K, D]
    z_out: list[torch.Tensor]
    trace: DecoderTrace


class HVLFormer(nn.Module):
    """Semi-supervised segmentation network with class-text queries.

    ``frozen_encoder`` is a snapshot of the image encoder taken once main
    training starts; it feeds the relevance estimator and the global-token
    regulariser.  It and the relevance estimator never reach the optimizer
    after freezing.
    """

    def __init__(self, cfg: ModelConfig, class_specs: list[ClassSpec], seed: int = 0, text_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.class_specs = list(class_specs)
        self.encoder = ImageEncoder(cfg)
        self.pixel_decoder = PixelDecoder(cfg)
        self.text = TextEmbedder(cfg, class_specs, text_seed)
        self.query_heads = QueryHeads(cfg)
        self.sre = SemanticRelevanceEstimator(cfg)
        self.refiner = build_refiner(cfg)
        self.decoder = MaskDecoder(cfg)
        for name in ("encoder", "pixel_decoder", "query_heads", "sre", "refiner", "decoder"):
            seeded_init_(getattr(self, name), seed, name)
        self.frozen_encoder = copy.deepcopy(self.encoder)
        freeze(self.frozen_encoder)

    @torch.no_grad()
    def snapshot_encoder(self) -> None:
        """Copy the current encoder weights into the frozen reference copy."""
        self.frozen_encoder.load_state_dict(self.encoder.state_dict())
        freeze(self.frozen_encoder)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def relevance(self, img: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, k = img.shape[0], t.shape[0]
        if self.cfg.sre_mode == "none":
            return torch.ones(b, k, dtype=t.dtype, device=t.device)
        with torch.no_grad():
            levels = self.frozen_encoder(img).levels
        return self.sre(levels, t)

    def forward(self, img: torch.Tensor) -> ForwardOutput:
        cfg = self.cfg
        raw = self.encoder(img)
        pixels = self.pixel_decoder(raw)
        text = self.text()
        q = self.query_heads(text.t)  # [K, E, D]
        s = self.relevance(img, text.t)
        mode = "none" if cfg.sre_mode == "none" else cfg.sre_mode
        q_tilde = weight_queries(q, s, mode)  # [B, K, E, D]
        q_levels = [q_tilde[:, :, e] for e in range(cfg.hierarchy_levels)]
        refined, z_out = self.refiner(q_levels, pixels.levels)
        # class-major ordering: query i = k * E + e
        queries = torch.stack(refined, dim=2).flatten(1, 2)
        trace = self.decoder(queries, z_out, pixels.per_pixel)
        return ForwardOutput(raw, pixels, text, q, s, refined, z_out, trace)

    @torch.no_grad()
    def predict(self, img: torch.Tensor) -> torch.Tensor:
        """Per-pixel class ids ``[B, H, W]`` from the last decoder layer."""
        return self(img).trace.predictions[-1].argmax(dim=1)
