"""Segmentation metrics and the query/feature alignment diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Sample, images_to_tensor, masks_to_tensor

COS_EPS = 1e-8


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``K x K`` counts, rows = ground truth, columns = prediction; IGNORE excluded."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    keep = (gt >= 0) & (gt < num_classes)
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where TP+FP+FN = 0) and their mean over the remaining classes."""
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


@dataclass
class MetricsReport:
    per_class_iou: list[float]
    miou: float
    confusion: list[list[int]]
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "confusion": self.confusion,
            "diagnostics": self.diagnostics,
        }


@torch.no_grad()
def predict_samples(model, samples: list[Sample], batch_size: int = 16) -> list[np.ndarray]:
    model.eval()
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        img = images_to_tensor([s.image for s in chunk])
        preds.extend(model.predict(img).cpu().numpy())
    return preds


def evaluate(model, samples: list[Sample], batch_size: int = 16, diagnostics: bool = False) -> MetricsReport:
    """Confusion/IoU of last-layer argmax predictions over ``samples``."""
    if not samples:
        raise ValueError("evaluation set is empty")
    k = model.cfg.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for s, p in zip(samples, predict_samples(model, samples, batch_size)):
        conf += confusion_matrix(p, masks_to_tensor([s.mask], k)[0].numpy(), k)
    iou, miou = iou_from_confusion(conf)
    report = MetricsReport(iou.tolist(), miou, conf.tolist())
    if diagnostics:
        report.diagnostics = diagnose(model, samples, batch_size)
    return report


# --------------------------------------------------------------------------
# diagnostics


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine ``[..., n, d] x [..., m, d] -> [..., n, m]``."""
    num = a @ b.transpose(-1, -2)
    den = a.norm(dim=-1)[..., :, None] * b.norm(dim=-1)[..., None, :]
    return num / den.clamp_min(COS_EPS)


def mean_cosine_alignment(queries: torch.Tensor, z_pixel: torch.Tensor) -> torch.Tensor:
    """``S = 1/(E K) sum_e sum_k 1/(HW) sum_p cos(Q^e_k, Z(p))`` for one image.

    ``queries`` is ``[E, K, D]``; ``z_pixel`` is ``[D, H, W]``.
    """
    e, k, d = queries.shape
    pixels = z_pixel.reshape(d, -1).T  # [HW, D]
    return _cos(queries.reshape(e * k, d), pixels).mean()


def diagonal_dominance(queries: torch.Tensor, z_out: list[torch.Tensor]) -> torch.Tensor:
    """Entry ``(e, e')`` = class mean of ``cos(Q^e_k, GAP(z_out^{e'}))``.

    ``queries`` is ``[E, K, D]``, ``z_out`` a list of ``[D, h, w]`` maps.
    """
    pooled = torch.stack([z.mean(dim=(-2, -1)) for z in z_out])  # [L, D]
    return _cos(queries, pooled[None].expand(queries.shape[0], -1, -1)).mean(dim=1)


def diagonal_summary(matrix: torch.Tensor) -> dict:
    m = matrix[:, : matrix.shape[0]]
    e = m.shape[0]
    diag = float(torch.diagonal(m).mean())
    off = float((m.sum() - torch.diagonal(m).sum()) / max(e * e - e, 1)) if e > 1 else float("nan")
    return {"diagonal_mean": diag, "off_diagonal_mean": off, "dominant": bool(e > 1 and diag > off)}


def sre_stats(s: torch.Tensor) -> dict:
    return {"min": float(s.min()), "max": float(s.max()), "mean": float(s.mean())}


@torch.no_grad()
def diagnose(model, samples: list[Sample], batch_size: int = 16) -> dict:
    """Average alignment S and diagonal-dominance matrix over ``samples``, plus relevance stats."""
    model.eval()
    s_vals, mats, rel = [], [], []
    for i in range(0, len(samples), batch_size):
        img = images_to_tensor([s.image for s in samples[i: i + batch_size]])
        out = model(img)
        q = torch.stack(out.refined_queries, dim=1)  # [B, E, K, D]
        for b in range(img.shape[0]):
            s_vals.append(float(mean_cosine_alignment(q[b], out.pixels.per_pixel[b])))
            mats.append(diagonal_dominance(q[b], [z[b] for z in out.z_out]))
        rel.append(out.relevance)
    matrix = torch.stack(mats).mean(dim=0)
    return {
        "mean_cosine_S": float(np.mean(s_vals)),
        "diagonal_dominance": matrix.tolist(),
        **{f"diag_{k}": v for k, v in diagonal_summary(matrix).items()},
        "sre_stats": sre_stats(torch.cat(rel)),
    }


def relevance_separation(model, samples: list[Sample], batch_size: int = 16) -> tuple[float, float]:
    """Mean relevance of present vs absent classes on labeled samples."""
    from .data import presence_targets

    pres, absn = [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i: i + batch_size]
            img = images_to_tensor([s.image for s in chunk])
            target = presence_targets(masks_to_tensor([s.mask for s in chunk], model.cfg.num_classes),
                                      model.cfg.num_classes)
            s = model.relevance(img, model.text().t)
            pres.append(s[target > 0])
            absn.append(s[target == 0])
    pres_t, abs_t = torch.cat(pres), torch.cat(absn)
    return float(pres_t.mean()), float(abs_t.mean()) if abs_t.numel() else float("nan")

