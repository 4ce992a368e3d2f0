"""Image encoder, pixel decoder and the frozen text encoder with learnable prompts."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ClassSpec, ModelConfig, generator

REFERENCE_TEMPLATE = ("a clean origami of a", "with attributes :")
FIXED_PROMPT = "a photo of a"


@dataclass
class MultiScaleFeatures:
    """Pixel features, channel-first.

    ``levels`` are ``[B, D, h_e, w_e]`` ordered coarse to fine, ``per_pixel``
    is ``[B, D, H, W]`` and ``cls_token`` is ``[B, D]``.
    """

    levels: list[torch.Tensor]
    per_pixel: torch.Tensor
    cls_token: torch.Tensor

    def select(self, idx) -> "MultiScaleFeatures":
        return MultiScaleFeatures([z[idx] for z in self.levels], self.per_pixel[idx], self.cls_token[idx])


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GELU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GELU(),
    )


class ImageEncoder(nn.Module):
    """Four strided conv stages (strides 2, 4, 8, 16) with lateral projections to D."""

    STAGE_STRIDES = (2, 4, 8, 16)

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = list(cfg.encoder_channels)
        d = cfg.embed_dim
        self.stages = nn.ModuleList([
            _conv_block(3, c[0], 2),
            _conv_block(c[0], c[1], 2),
            _conv_block(c[1], c[2], 2),
            _conv_block(c[2], c[3], 2),
        ])
        self.level_index = [self.STAGE_STRIDES.index(s) for s in cfg.feature_strides]
        self.lateral = nn.ModuleList([nn.Conv2d(c[i], d, 1) for i in self.level_index])
        self.fine = nn.Conv2d(c[0], d, 1)
        self.cls_proj = nn.Linear(c[3], d)

    def forward(self, img: torch.Tensor) -> MultiScaleFeatures:
        h, w = self.cfg.image_size
        if img.dim() != 4 or img.shape[1] != 3 or tuple(img.shape[-2:]) != (h, w):
            raise ValueError(f"expected [B, 3, {h}, {w}] images, got {tuple(img.shape)}")
        x = img * 2.0 - 1.0
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        levels = [lat(outs[i]) for lat, i in zip(self.lateral, self.level_index)]
        per_pixel = F.interpolate(self.fine(outs[0]), size=(h, w), mode="bilinear", align_corners=False)
        cls_token = self.cls_proj(outs[-1].mean(dim=(-2, -1)))
        return MultiScaleFeatures(levels, per_pixel, cls_token)


def encode_image(img: torch.Tensor, encoder: ImageEncoder) -> MultiScaleFeatures:
    return encoder(img)


class PixelDecoder(nn.Module):
    """Top-down FPN with lateral inputs, followed by M residual refinement blocks.

    Block ``m`` refines level ``m mod L`` after fusing the upsampled coarser
    level, so six blocks over three levels visit each level twice.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.num_levels = cfg.pixel_levels
        self.blocks = nn.ModuleList([
            nn.Sequential(nn.Conv2d(d, d, 3, padding=1), nn.GELU(), nn.Conv2d(d, d, 3, padding=1))
            for _ in range(cfg.pixel_decoder_layers)
        ])
        self.pixel_proj = nn.Sequential(nn.Conv2d(d, d, 1), nn.GELU(), nn.Conv2d(d, d, 1))

    def forward(self, raw: MultiScaleFeatures) -> MultiScaleFeatures:
        p = [raw.levels[0]]
        for z in raw.levels[1:]:
            p.append(z + F.interpolate(p[-1], size=z.shape[-2:], mode="bilinear", align_corners=False))
        for m, block in enumerate(self.blocks):
            e = m % self.num_levels
            x = p[e]
            if e > 0:
                x = x + F.interpolate(p[e - 1], size=x.shape[-2:], mode="bilinear", align_corners=False)
            p[e] = p[e] + block(x)
        h, w = self.cfg.image_size
        up = F.interpolate(p[-1], size=(h, w), mode="bilinear", align_corners=False)
        per_pixel = self.pixel_proj(up + raw.per_pixel)
        return MultiScaleFeatures(p, per_pixel, raw.cls_token)


def pixel_decode(raw: MultiScaleFeatures, decoder: PixelDecoder) -> MultiScaleFeatures:
    return decoder(raw)


# --------------------------------------------------------------------------
# text side


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass
class TextEmbeddingSet:
    t: torch.Tensor  # [K, C] learnable-prompt embeddings
    t0: torch.Tensor  # [K, C] frozen reference embeddings
    prompt: torch.Tensor | None  # [K, P, C]
    attributes: list[list[str]]


class FrozenTextEncoder(nn.Module):
    """Seeded token table plus a two-layer mean-pooling mixer; no trainable weights.

    Every weight is a buffer, so nothing here can reach an optimizer.
    """

    def __init__(self, vocab: list[str], dim: int, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.vocab = {w: i for i, w in enumerate(sorted(set(vocab)))}
        table = torch.stack([
            torch.randn(dim, generator=generator(seed, f"token:{w}"), dtype=torch.float64)
            for w in self.vocab
        ])
        self.register_buffer("table", table.float())
        scale = dim ** -0.5
        self.register_buffer("w1", (torch.randn(dim, dim, generator=generator(seed, "mixer.w1"), dtype=torch.float64) * scale).float())
        self.register_buffer("w2", (torch.randn(dim, dim, generator=generator(seed, "mixer.w2"), dtype=torch.float64) * scale).float())
        self.overrides: dict[str, torch.Tensor] = {}

    def embed_words(self, words: list[str]) -> torch.Tensor:
        missing = [w for w in words if w not in self.vocab]
        if missing:
            raise KeyError(f"no token embedding for {missing}")
        idx = torch.tensor([self.vocab[w] for w in words], dtype=torch.long)
        return self.table[idx]

    def embed_name(self, name: str) -> torch.Tensor:
        if name in self.overrides:
            return self.overrides[name].to(self.table)[None]
        words = tokenize(name)
        if not words:
            raise KeyError(f"class name {name!r} has no tokens")
        return self.embed_words(words)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``[L, C]`` token embeddings -> ``[C]`` sentence embedding."""
        x = tokens + torch.tanh(tokens @ self.w1.to(tokens))
        pooled = x.mean(dim=0)
        return pooled + torch.tanh(pooled @ self.w2.to(tokens))


class TextEmbedder(nn.Module):
    """Learnable per-class prompts encoded by the frozen text encoder."""

    def __init__(self, cfg: ModelConfig, class_specs: list[ClassSpec], text_seed: int = 0, extra_vocab=()):
        super().__init__()
        self.cfg = cfg
        self.class_specs = list(class_specs)
        vocab = tokenize(" ".join(REFERENCE_TEMPLATE) + " " + FIXED_PROMPT)
        for spec in class_specs:
            vocab += tokenize(spec.name)
            for a in spec.attributes:
                vocab += tokenize(a)
        for word in extra_vocab:
            vocab += tokenize(word)
        self.encoder = FrozenTextEncoder(vocab, cfg.embed_dim, text_seed)
        k, p, c = cfg.num_classes, cfg.prompt_tokens, cfg.embed_dim
        if cfg.prompt_mode == "learnable":
            self.prompt = nn.Parameter(torch.randn(k, p, c, generator=generator(text_seed, "prompt")) * 0.02)
        else:
            self.prompt = None
        self.register_buffer("t0", self._reference_embeddings())

    def _attr_tokens(self, spec: ClassSpec) -> torch.Tensor | None:
        if not self.cfg.use_attributes or not spec.attributes:
            return None
        return self.encoder.embed_words(tokenize(" ".join(spec.attributes)))

    @torch.no_grad()
    def _reference_embeddings(self) -> torch.Tensor:
        pre = self.encoder.embed_words(tokenize(REFERENCE_TEMPLATE[0]))
        mid = self.encoder.embed_words(tokenize(REFERENCE_TEMPLATE[1]))
        rows = []
        for spec in self.class_specs:
            parts = [pre, self.encoder.embed_name(spec.name)]
            attrs = self._attr_tokens(spec)
            if attrs is not None:
                parts += [mid, attrs]
            rows.append(self.encoder(torch.cat(parts)))
        return torch.stack(rows)

    def refresh_reference(self) -> None:
        self.t0.copy_(self._reference_embeddings())

    def import_name_embeddings(self, names: list[str], vectors: torch.Tensor) -> None:
        """Replace the class-name token embeddings with externally exported vectors."""
        if vectors.shape[1] != self.cfg.embed_dim:
            raise ValueError(f"embedding dim {vectors.shape[1]} != {self.cfg.embed_dim}")
        for n, v in zip(names, vectors):
            self.encoder.overrides[n] = v.detach().float().clone()
        self.refresh_reference()

    def forward(self, class_specs: list[ClassSpec] | None = None) -> TextEmbeddingSet:
        specs = class_specs if class_specs is not None else self.class_specs
        rows = []
        fixed = None
        if self.prompt is None:
            fixed = self.encoder.embed_words(tokenize(FIXED_PROMPT))
        for spec in specs:
            if not 0 <= spec.class_id < self.cfg.num_classes:
                raise KeyError(f"class id {spec.class_id} out of range")
            prompt = self.prompt[spec.class_id] if self.prompt is not None else fixed
            parts = [prompt, self.encoder.embed_name(spec.name).to(prompt)]
            attrs = self._attr_tokens(spec)
            if attrs is not None:
                parts.append(attrs.to(prompt))
            rows.append(self.encoder(torch.cat(parts)))
        t = torch.stack(rows)
        return TextEmbeddingSet(t, self.t0.to(t), self.prompt, [s.attributes for s in specs])


def encode_text(class_specs: list[ClassSpec], embedder: TextEmbedder) -> TextEmbeddingSet:
    return embedder(class_specs)


# --------------------------------------------------------------------------
# embedding files: b"HVTE", uint32 K, uint32 C, K x (uint16 len + utf-8 name),
# then K*C little-endian float32 values, row-major

_MAGIC = b"HVTE"


def save_text_embeddings(path: str, names: list[str], vectors: torch.Tensor) -> None:
    vectors = vectors.detach().cpu().float().contiguous()
    k, c = vectors.shape
    if len(names) != k:
        raise ValueError("one name per embedding row required")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", k, c))
        for n in names:
            b = n.encode("utf-8")
            fh.write(struct.pack("<H", len(b)) + b)
        fh.write(struct.pack(f"<{k * c}f", *vectors.reshape(-1).tolist()))


def load_text_embeddings(path: str) -> tuple[list[str], torch.Tensor]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a text-embedding file")
        k, c = struct.unpack("<II", fh.read(8))
        names = []
        for _ in range(k):
            (n,) = struct.unpack("<H", fh.read(2))
            names.append(fh.read(n).decode("utf-8"))
        data = fh.read(4 * k * c)
        if len(data) != 4 * k * c:
            raise ValueError(f"{path} is truncated")
        vals = struct.unpack(f"<{k * c}f", data)
    return names, torch.tensor(vals, dtype=torch.float32).reshape(k, c)
