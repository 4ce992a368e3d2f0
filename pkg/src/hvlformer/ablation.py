"""Named ablation variants and a harness that trains and scores each one per seed."""

from __future__ import annotations

import csv
import logging
from typing import Callable

from .config import ExperimentConfig, clone
from .metrics import evaluate
from .train import build_data, train

log = logging.getLogger(__name__)

LAMBDA_SWEEP = (1.0, 3.0, 5.0, 8.0, 10.0)


def _set(**model_kw) -> Callable[[ExperimentConfig], None]:
    def apply(cfg: ExperimentConfig) -> None:
        for k, v in model_kw.items():
            setattr(cfg.model, k, v)
    return apply


def _terms(*terms: str) -> Callable[[ExperimentConfig], None]:
    def apply(cfg: ExperimentConfig) -> None:
        cfg.train.cmcr_terms = list(terms)
    return apply


def _no_htqg(cfg: ExperimentConfig) -> None:
    # one linear query per class from the bare class name, no relevance weighting
    cfg.model.hierarchy_levels = 1
    cfg.model.use_htqg = False
    cfg.model.use_attributes = False
    cfg.model.sre_mode = "none"


def _supervised(cfg: ExperimentConfig) -> None:
    cfg.train.lambdas["cmcr"] = 0.0


VARIANTS: dict[str, Callable[[ExperimentConfig], None]] = {
    "full": lambda cfg: None,
    "no_htqg": _no_htqg,
    "no_hqg": _set(hierarchy_levels=1),
    "no_sre": _set(sre_mode="none"),
    "sre_threshold": _set(sre_mode="threshold"),
    "no_ptrm": _set(ptrm_mode="none"),
    "ptrm_crossattn": _set(ptrm_mode="crossattn"),
    "cmcr_mask_only": _terms("mask"),
    "cmcr_mask_class": _terms("mask", "class"),
    "fixed_prompt": _set(prompt_mode="fixed"),
    "no_attributes": _set(use_attributes=False),
    "supervised_only": _supervised,
}
ABLATIONS = sorted(list(VARIANTS) + ["lambda_sweep"])


def variant_configs(name: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand an ablation name into ``(variant label, config)`` pairs."""
    if name == "lambda_sweep":
        out = []
        for lam in LAMBDA_SWEEP:
            cfg = clone(base)
            cfg.train.lambdas["cmcr"] = lam
            out.append((f"lambda_cmcr={lam:g}", cfg))
        return out
    if name not in VARIANTS:
        raise KeyError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
    cfg = clone(base)
    VARIANTS[name](cfg)
    return [(name, cfg)]


FIELDS = ["ablation", "variant", "seed", "miou", "mean_cosine_S", "diag_diagonal_mean",
          "diag_off_diagonal_mean", "sre_mean", "final_loss"]


def run_variant(label: str, cfg: ExperimentConfig, seed: int, val_limit: int | None = None) -> dict:
    cfg = clone(cfg)
    cfg.train.seed = seed
    split, val = build_data(cfg)
    result = train(cfg, split, val, log_every=0)
    val = val[:val_limit] if val_limit else val
    report = evaluate(result.model, val, diagnostics=True)
    d = report.diagnostics
    return {
        "variant": label,
        "seed": seed,
        "miou": report.miou,
        "mean_cosine_S": d["mean_cosine_S"],
        "diag_diagonal_mean": d["diag_diagonal_mean"],
        "diag_off_diagonal_mean": d["diag_off_diagonal_mean"],
        "sre_mean": d["sre_stats"]["mean"],
        "final_loss": result.history[-1]["total"] if result.history else float("nan"),
    }


def ablate(name: str, base: ExperimentConfig, seeds=(0, 1, 2), csv_path: str | None = None,
           val_limit: int | None = None) -> list[dict]:
    rows = []
    for label, cfg in variant_configs(name, base):
        for seed in seeds:
            row = {"ablation": name, **run_variant(label, cfg, seed, val_limit)}
            log.info("%s seed %d: mIoU %.4f", label, seed, row["miou"])
            rows.append(row)
    if csv_path:
        write_csv(rows, csv_path)
    return rows


def write_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in FIELDS})
