"""Semi-supervised training loop.

One iteration draws a labeled batch and a batch of unlabeled (original, weak,
strong) triplets, runs every image through the network in a single batched
forward pass, and takes one AdamW step on the combined objective.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .checkpoint import checkpoint_from_model, save_checkpoint
from .config import ExperimentConfig, default_class_specs, poly_lr
from .data import (AugmentParams, DataSplit, SplitSpec, generate_dataset, images_to_tensor,
                   make_split, masks_to_tensor, presence_targets, sample_batch)
from .htqg import diversity_loss, pretrain_sre
from .metrics import evaluate
from .model import HVLFormer

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, part: str, last_good: str | None):
        super().__init__(f"non-finite loss ({part}) at iteration {iteration}; last good checkpoint: {last_good}")
        self.iteration = iteration
        self.part = part
        self.last_good = last_good


@dataclass
class TrainResult:
    model: HVLFormer
    history: list[dict] = field(default_factory=list)
    sre_history: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None


def build_data(cfg: ExperimentConfig) -> tuple[DataSplit, list]:
    """Toy train split (labeled subset chosen by ``train.seed``) and held-out validation set."""
    d, m = cfg.data, cfg.model
    train = generate_dataset(d.num_train, m, d.data_seed)
    val = generate_dataset(d.num_val, m, d.data_seed, offset=d.num_train)
    aug = AugmentParams(grid=max(m.feature_strides)).scaled(d.weak_strength, d.strong_strength)
    specs = default_class_specs(m.num_classes, d.dataset)
    split = make_split(train, m.num_classes, SplitSpec(d.labeled_fraction, d.rare_class_boost),
                       cfg.train.seed, specs, aug)
    return split, val


def cmcr_enabled(cfg: ExperimentConfig) -> bool:
    t = cfg.train
    return t.lambdas["cmcr"] > 0 and bool(t.cmcr_terms) and t.unlabeled_batch > 0


# --------------------------------------------------------------------------
# pre-training stages


def warm_encoder(model: HVLFormer, split: DataSplit, cfg: ExperimentConfig) -> list[float]:
    """Optional supervised warm-up of the image encoder with a throwaway linear classifier."""
    t = cfg.train
    if t.encoder_warm_iters <= 0:
        return []
    k = model.cfg.num_classes
    head = nn.Conv2d(model.cfg.embed_dim, k, 1)
    opt = torch.optim.AdamW(list(model.encoder.parameters()) + list(head.parameters()), lr=t.lr * 10,
                            weight_decay=t.weight_decay)
    hist = []
    for it in range(t.encoder_warm_iters):
        labeled, _ = sample_batch(split, -1 - it, t.seed, t.labeled_batch, 0)
        img = images_to_tensor([s.image for s in labeled])
        gt = masks_to_tensor([s.mask for s in labeled], k)
        loss = F.cross_entropy(head(model.encoder(img).per_pixel), gt, ignore_index=k)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        hist.append(float(loss))
    return hist


def pretrain_relevance(model: HVLFormer, split: DataSplit, cfg: ExperimentConfig) -> list[float]:
    t = cfg.train
    k = model.cfg.num_classes
    if model.cfg.sre_mode == "none" or t.sre_pretrain_iters <= 0:
        for p in model.sre.parameters():
            p.requires_grad_(False)
        return []
    with torch.no_grad():
        text = model.text().t

    def batches(i):
        labeled, _ = sample_batch(split, 10_000_000 + i, t.seed, t.labeled_batch, 0)
        img = images_to_tensor([s.image for s in labeled])
        with torch.no_grad():
            levels = model.frozen_encoder(img).levels
        return levels, presence_targets(masks_to_tensor([s.mask for s in labeled], k), k)

    return pretrain_sre(model.sre, batches, text, t.sre_pretrain_iters, t.sre_lr)


def prepare_model(cfg: ExperimentConfig, split: DataSplit, model: HVLFormer | None = None,
                  sre_ready: bool = False) -> tuple[HVLFormer, list[float]]:
    """Build the network, run the warm phase, snapshot the encoder and fit the relevance estimator."""
    torch.manual_seed(cfg.train.seed)
    if model is None:
        specs = split.class_specs or default_class_specs(cfg.model.num_classes, cfg.data.dataset)
        model = HVLFormer(cfg.model, specs, seed=cfg.train.seed)
    if sre_ready:
        return model, []
    warm_encoder(model, split, cfg)
    model.snapshot_encoder()
    return model, pretrain_relevance(model, split, cfg)


# --------------------------------------------------------------------------
# one step


def compute_losses(model: HVLFormer, labeled, triplets, cfg: ExperimentConfig) -> L.LossBundle:
    t, m = cfg.train, model.cfg
    k = m.num_classes
    n_lab, n_un = len(labeled), len(triplets)
    images = [s.image for s in labeled]
    if n_un:
        images += [tr.original.image for tr in triplets]
        images += [tr.weak.image for tr in triplets]
        images += [tr.strong.image for tr in triplets]
    dtype = next(model.parameters()).dtype
    img = images_to_tensor(images, dtype)
    gt = masks_to_tensor([s.mask for s in labeled], k)

    out = model(img)
    lab = slice(0, n_lab)
    parts = {
        "seg": L.seg_loss(out.trace.select(lab), gt, t, k, m.hierarchy_levels),
        "reg_L": L.reg_language(out.text.t, out.text.t0),
        "reg_VL": L.reg_vision_language(out.raw.per_pixel[lab], out.text.t, gt, t.vl_temperature),
        "div": diversity_loss(out.queries_raw),
    }
    with torch.no_grad():
        frozen_cls = model.frozen_encoder(img[lab]).cls_token
    parts["reg_V"] = L.reg_vision(out.raw.cls_token[lab], frozen_cls)
    if n_un:
        o = slice(n_lab, n_lab + n_un)
        w = slice(n_lab + n_un, n_lab + 2 * n_un)
        s = slice(n_lab + 2 * n_un, n_lab + 3 * n_un)
        parts.update(L.cmcr_losses(out.trace.select(o), out.trace.select(w), out.trace.select(s),
                                   [tr.geom_w for tr in triplets], [tr.geom_s for tr in triplets],
                                   list(m.feature_strides), t))
    return L.total_loss(parts, t)


# --------------------------------------------------------------------------
# main loop


def train(
    cfg: ExperimentConfig,
    split: DataSplit | None = None,
    val=None,
    out_dir: str | None = None,
    model: HVLFormer | None = None,
    sre_ready: bool = False,
    log_every: int = 50,
    eval_samples: int = 64,
) -> TrainResult:
    t = cfg.train
    if split is None:
        split, val = build_data(cfg)
    model, sre_hist = prepare_model(cfg, split, model, sre_ready)
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=t.lr, weight_decay=t.weight_decay)
    n_unlabeled = t.unlabeled_batch if cmcr_enabled(cfg) else 0

    metrics_fh = None
    ckpt_path = last_good = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    history = []
    start = time.time()
    try:
        for it in range(t.total_iters):
            model.train()
            lr = poly_lr(it, t)
            for g in opt.param_groups:
                g["lr"] = lr
            labeled, triplets = sample_batch(split, it, t.seed, t.labeled_batch, n_unlabeled)
            try:
                bundle = compute_losses(model, labeled, triplets, cfg)
            except L.NonFiniteLoss as err:
                raise TrainingAborted(it, err.part, last_good) from err
            opt.zero_grad(set_to_none=True)
            bundle.total.backward()
            opt.step()

            rec = {"iteration": it, "lr": lr, **bundle.as_floats()}
            if t.eval_every and val and (it + 1) % t.eval_every == 0:
                rec["val_miou"] = evaluate(model, val[:eval_samples]).miou
            history.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
            if log_every and (it % log_every == 0 or it == t.total_iters - 1):
                log.info("it %d  lr %.2e  total %.4f  seg %.4f  cmcr %.4f/%.4f/%.4f  (%.0fs)", it, lr,
                         rec["total"], rec["seg"], rec["cmcr_mask"], rec["cmcr_class"], rec["cmcr_align"],
                         time.time() - start)
            if ckpt_path and t.ckpt_every and (it + 1) % t.ckpt_every == 0:
                save_checkpoint(checkpoint_from_model(model, cfg, it + 1), ckpt_path)
                last_good = ckpt_path
    finally:
        if metrics_fh:
            metrics_fh.close()
    if ckpt_path:
        save_checkpoint(checkpoint_from_model(model, cfg, t.total_iters), ckpt_path)
    model.eval()
    return TrainResult(model, history, sre_hist, ckpt_path)
