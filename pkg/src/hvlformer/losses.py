"""Segmentation, regularisation and cross-view consistency objectives."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import TrainConfig
from .decoder import DecoderTrace, class_probabilities, query_class_targets

CLAMP = 1e-8
COS_EPS = 1e-8


class NonFiniteLoss(FloatingPointError):
    def __init__(self, part: str):
        super().__init__(f"loss component {part!r} is not finite")
        self.part = part


@dataclass
class LossBundle:
    seg: torch.Tensor
    reg_L: torch.Tensor
    reg_VL: torch.Tensor
    reg_V: torch.Tensor
    div: torch.Tensor
    cmcr_mask: torch.Tensor
    cmcr_class: torch.Tensor
    cmcr_align: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


# --------------------------------------------------------------------------
# segmentation


def _check_gt(gt: torch.Tensor, num_classes: int) -> torch.Tensor:
    bad = (gt < 0) | ((gt >= num_classes) & (gt != num_classes))
    if bad.any():
        raise ValueError(f"ground truth contains ids outside 0..{num_classes - 1} and IGNORE={num_classes}")
    return gt != num_classes


def mask_bce(mask_logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean BCE over valid pixels, per leading index: ``[..., H, W] -> [...]``."""
    per_pixel = F.binary_cross_entropy_with_logits(mask_logits, target, reduction="none")
    v = valid.to(per_pixel)
    return (per_pixel * v).flatten(-2).sum(-1) / v.flatten(-2).sum(-1).clamp_min(1.0)


def mask_dice(mask_logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """``1 - (2|P.G| + 1) / (|P| + |G| + 1)`` over valid pixels."""
    v = valid.to(mask_logits)
    p = mask_logits.sigmoid() * v
    g = target * v
    inter = (p * g).flatten(-2).sum(-1)
    return 1.0 - (2.0 * inter + 1.0) / (p.flatten(-2).sum(-1) + g.flatten(-2).sum(-1) + 1.0)


def seg_loss(trace: DecoderTrace, gt: torch.Tensor, tcfg: TrainConfig, num_classes: int,
             levels: int, return_parts: bool = False):
    """Deep-supervised mask BCE + Dice + query classification under fixed matching."""
    valid = _check_gt(gt, num_classes)  # [B, H, W]
    targets = query_class_targets(num_classes, levels).to(gt.device)  # [Q]
    binary = (gt[:, None] == targets[None, :, None, None]).to(trace.mask_logits[0].dtype)
    valid_q = valid[:, None].expand_as(binary)
    w = tcfg.seg_weights
    bce = dice = ce = 0.0
    for cls_logits, mask_logits in zip(trace.class_logits, trace.mask_logits):
        bce = bce + mask_bce(mask_logits, binary, valid_q).mean()
        dice = dice + mask_dice(mask_logits, binary, valid_q).mean()
        b, q, k = cls_logits.shape
        ce = ce + F.cross_entropy(cls_logits.reshape(b * q, k), targets.repeat(b))
    n = trace.num_layers
    bce, dice, ce = bce / n, dice / n, ce / n
    total = w["bce"] * bce + w["dice"] * dice + w["cls"] * ce
    if return_parts:
        return total, {"bce": bce, "dice": dice, "cls": ce}
    return total


# --------------------------------------------------------------------------
# regularisers


def reg_language(t: torch.Tensor, t0: torch.Tensor) -> torch.Tensor:
    """Row-wise CE of normalised similarities ``t t0^T`` against the identity assignment."""
    logits = F.normalize(t, dim=-1) @ F.normalize(t0, dim=-1).T
    return F.cross_entropy(logits, torch.arange(t.shape[0], device=t.device))


def reg_vision_language(features: torch.Tensor, t: torch.Tensor, gt: torch.Tensor, temperature: float = 0.07
                        ) -> torch.Tensor:
    """Per-pixel CE of ``softmax(cos(f_p, t_k) / b)``; IGNORE pixels excluded, empty -> 0.

    ``features`` is ``[B, D, H, W]``, ``t`` is ``[K, D]`` and ``gt`` ``[B, H, W]``.
    """
    k = t.shape[0]
    valid = _check_gt(gt, k)
    scores = torch.einsum("bdhw,kd->bkhw", F.normalize(features, dim=1), F.normalize(t, dim=-1)) / temperature
    if not valid.any():
        return scores.sum() * 0.0
    per_pixel = F.cross_entropy(scores, gt.clamp_max(k - 1), reduction="none")
    return per_pixel[valid].mean()


def reg_vision(f_cls: torch.Tensor, f_cls_frozen: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between pooled summaries, averaged over the batch."""
    return ((f_cls - f_cls_frozen) ** 2).sum(dim=-1).mean()


# --------------------------------------------------------------------------
# cross-view consistency


def _bce_prob(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # torch clamps the logs internally, so an exact match costs exactly 0
    return F.binary_cross_entropy(p.clamp(0.0, 1.0), y, reduction="none")


def cmcr_mask(
    pred_o: list[torch.Tensor],
    pred_w: list[torch.Tensor],
    pred_s: list[torch.Tensor],
    valid_w: torch.Tensor,
    valid_s: torch.Tensor,
    tau: float = 0.95,
    weights: dict[str, float] | None = None,
    mode: str = "hard",
) -> torch.Tensor:
    """Confidence-gated BCE of augmented-view predictions against original-view pseudo-labels.

    All maps are per-pixel class distributions ``[B, K, H, W]`` already in
    the original frame; ``valid_*`` are ``[B, H, W]``.  The original view is
    detached.  Each view term is averaged over its gated valid pixels.
    """
    weights = weights or {"weak": 0.5, "strong": 0.1}
    total = 0.0
    for po, pw, ps in zip(pred_o, pred_w, pred_s):
        po = po.detach()
        conf, label = po.max(dim=1)
        gate = conf >= tau
        if mode == "hard":
            target = F.one_hot(label, po.shape[1]).permute(0, 3, 1, 2).to(po)
        else:
            target = po
        layer = 0.0
        for pa, valid, wt in ((pw, valid_w, weights["weak"]), (ps, valid_s, weights["strong"])):
            sel = (gate & valid).to(po)
            count = sel.sum()
            per_pixel = _bce_prob(pa, target).mean(dim=1)
            term = (per_pixel * sel).sum() / count.clamp_min(1.0)
            layer = layer + wt * term
        total = total + layer
    return total / max(len(pred_o), 1)


def _check_distribution(p: torch.Tensor, name: str) -> None:
    if (p < -1e-12).any() or not torch.allclose(p.sum(-1), torch.ones_like(p[..., 0]), atol=1e-6):
        raise ValueError(f"{name} rows must be probability distributions")


def _kl(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # clamp only inside the logs: zero-probability entries contribute exactly 0
    return (p * (p.clamp(CLAMP, 1.0).log() - m.clamp(CLAMP, 1.0).log())).sum(-1)


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def cmcr_class(c_o: list[torch.Tensor], c_w: list[torch.Tensor], c_s: list[torch.Tensor],
               mode: str = "pairwise") -> torch.Tensor:
    """Jensen-Shannon consistency of per-query class distributions ``[B, Q, K]``.

    ``pairwise``: ``0.5 * (JS(C, C_w) + JS(C, C_s))``.  ``three_term``:
    ``0.5 * sum_v KL(C_v || M)`` with ``M`` the mean of the three views.
    Averaged over queries and layers.
    """
    total = 0.0
    for po, pw, ps in zip(c_o, c_w, c_s):
        for name, p in (("original", po), ("weak", pw), ("strong", ps)):
            _check_distribution(p, f"class probabilities ({name})")
        if mode == "pairwise":
            per_query = 0.5 * (js_divergence(po, pw) + js_divergence(po, ps))
        elif mode == "three_term":
            m = (po + pw + ps) / 3.0
            per_query = 0.5 * (_kl(po, m) + _kl(pw, m) + _kl(ps, m))
        else:
            raise ValueError(f"unknown class-consistency mode {mode!r}")
        total = total + per_query.mean()
    return total / max(len(c_o), 1)


def masked_cosine(a: torch.Tensor, b: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Cosine of flattened ``[..., h, w]`` maps with invalid positions zeroed in both."""
    if valid is not None:
        v = valid.to(a)
        a, b = a * v, b * v
    a, b = a.flatten(-2), b.flatten(-2)
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(COS_EPS)


def cmcr_align(a_o: list[torch.Tensor], a_w: list[torch.Tensor], a_s: list[torch.Tensor],
               valid_w: list[torch.Tensor] | None = None, valid_s: list[torch.Tensor] | None = None
               ) -> torch.Tensor:
    """``[1 - cos(A, A_w)] + [1 - cos(A, A_s)]`` per query, averaged over queries and layers.

    Maps are ``[B, Q, h, w]`` in the original frame; validity maps are
    ``[B, h, w]`` per layer (``None`` means all valid).
    """
    total = 0.0
    for n, (ao, aw, as_) in enumerate(zip(a_o, a_w, a_s)):
        vw = None if valid_w is None else valid_w[n][:, None]
        vs = None if valid_s is None else valid_s[n][:, None]
        per_query = (1.0 - masked_cosine(ao, aw, vw)) + (1.0 - masked_cosine(ao, as_, vs))
        total = total + per_query.mean()
    return total / max(len(a_o), 1)


def warp_trace_views(trace: DecoderTrace, geoms, strides: list[int]):
    """Back-warp one view's predictions and attention maps into the original frame.

    Returns (per-layer probability maps, per-layer attention maps, pixel
    validity ``[B, H, W]``, per-layer attention validity ``[B, h, w]``).
    """
    from .data import warp_back

    preds = torch.stack([class_probabilities(p) for p in trace.predictions])  # [N, B, K, H, W]
    n_layers, bsz = preds.shape[:2]
    warped_p, valid_p = [], []
    for b, g in enumerate(geoms):
        wp, v = warp_back(g, preds[:, b])
        warped_p.append(wp)
        valid_p.append(v)
    warped_p = torch.stack(warped_p, dim=1)
    valid_p = torch.stack(valid_p)

    attn_out, attn_valid = [], []
    for n in range(n_layers):
        a = trace.attention[n]
        stride = strides[trace.levels[n]]
        rows, vals = [], []
        for b, g in enumerate(geoms):
            wa, v = warp_back(g, a[b], stride)
            rows.append(wa)
            vals.append(v)
        attn_out.append(torch.stack(rows))
        attn_valid.append(torch.stack(vals))
    return list(warped_p), attn_out, valid_p, attn_valid


def cmcr_losses(trace_o: DecoderTrace, trace_w: DecoderTrace, trace_s: DecoderTrace,
                geoms_w, geoms_s, strides: list[int], tcfg: TrainConfig) -> dict[str, torch.Tensor]:
    """All three consistency terms for a batch of unlabeled triplets."""
    pred_o = [class_probabilities(p) for p in trace_o.predictions]
    pw, aw, vw, avw = warp_trace_views(trace_w, geoms_w, strides)
    ps, as_, vs, avs = warp_trace_views(trace_s, geoms_s, strides)
    layers = range(trace_o.num_layers)
    if tcfg.cmcr_last_layer_only:
        layers = [trace_o.num_layers - 1]
    pick = lambda xs: [xs[n] for n in layers]  # noqa: E731
    out = {}
    out["cmcr_mask"] = cmcr_mask(pick(pred_o), pick(pw), pick(ps), vw, vs, tcfg.tau,
                                 tcfg.cmcr_view_weights, tcfg.pseudo_label_mode)
    out["cmcr_class"] = cmcr_class(pick([c.softmax(-1) for c in trace_o.class_logits]),
                                   pick([c.softmax(-1) for c in trace_w.class_logits]),
                                   pick([c.softmax(-1) for c in trace_s.class_logits]),
                                   tcfg.cmcr_class_mode)
    out["cmcr_align"] = cmcr_align(pick(trace_o.attention), pick(aw), pick(as_), pick(avw), pick(avs))
    return out


# --------------------------------------------------------------------------
# combination

PARTS = ("seg", "reg_L", "reg_VL", "reg_V", "div", "cmcr_mask", "cmcr_class", "cmcr_align")


def total_loss(parts: dict[str, torch.Tensor | float], tcfg: TrainConfig) -> LossBundle:
    """``seg + l_reg*(L+VL+V) + l_div*div + l_cmcr*(mask+class+align)``; disabled CMCR terms count as 0."""
    ref = next((v for v in parts.values() if isinstance(v, torch.Tensor)), None)
    vals = {}
    for name in PARTS:
        v = parts.get(name, 0.0)
        if not isinstance(v, torch.Tensor):
            v = torch.tensor(float(v), dtype=ref.dtype if ref is not None else torch.float64)
        if not torch.isfinite(v).all():
            raise NonFiniteLoss(name)
        vals[name] = v
    lam = tcfg.lambdas
    cmcr = vals["seg"] * 0
    for term in tcfg.cmcr_terms:
        cmcr = cmcr + vals[f"cmcr_{term}"]
    total = (vals["seg"]
             + lam["reg"] * (vals["reg_L"] + vals["reg_VL"] + vals["reg_V"])
             + lam["div"] * vals["div"]
             + lam["cmcr"] * cmcr)
    if not torch.isfinite(total):
        raise NonFiniteLoss("total")
    return LossBundle(total=total, **vals)

