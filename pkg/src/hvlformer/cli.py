"""Command-line entry point: ``hvlformer <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys

import numpy as np
import torch

from .config import (ExperimentConfig, apply_override, config_keys, default_class_specs, dump_config,
                     load_config, validate_config)

log = logging.getLogger("hvlformer")

VERBS = ("gen-data", "pretrain-sre", "train", "eval", "diagnose", "ablate", "export-text-embeddings")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hvlformer", description="Text-query semi-supervised segmentation on toy data.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.seed=1 (repeatable)")
        sp.add_argument("--out", help="output directory (created if absent)")
        sp.add_argument("--encoder-warm-iters", type=int, help="shortcut for train.encoder_warm_iters")
        sp.add_argument("-v", "--verbose", action="store_true")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")

    common(sub.add_parser("gen-data", help="write the toy dataset to disk"))
    sp = sub.add_parser("pretrain-sre", help="warm the encoder and fit the relevance estimator")
    common(sp)
    sp.add_argument("--force", action="store_true")
    sp = sub.add_parser("train", help="run semi-supervised training")
    common(sp)
    sp.add_argument("--init", help="start from a pretrain-sre checkpoint")
    sp.add_argument("--text-embeddings", help="import class-name embeddings from an exported file")
    sp.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on the validation set")
    common(sp, ckpt=True)
    sp.add_argument("--limit", type=int, help="evaluate only the first N validation images")
    sp = sub.add_parser("diagnose", help="alignment / hierarchy / relevance diagnostics")
    common(sp, ckpt=True)
    sp.add_argument("--limit", type=int)
    sp = sub.add_parser("ablate", help="train and score a named ablation")
    common(sp)
    sp.add_argument("--name", required=True)
    sp.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    sp.add_argument("--limit", type=int)
    sp = sub.add_parser("export-text-embeddings", help="write class-name embeddings to a file")
    common(sp)
    sp.add_argument("--ckpt", help="take the embedder from this checkpoint instead of a fresh one")
    return p


def split_dotted(rest: list[str]) -> list[str]:
    """Turn ``--train.seed 3`` / ``--train.seed=3`` leftovers into ``train.seed=3`` overrides."""
    known = set(config_keys())
    out, i = [], 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"flag {tok} needs a value")
            val = rest[i + 1]
            i += 2
        if key not in known:
            raise UsageError(f"unrecognized argument: --{key}")
        out.append(f"{key}={val}")
    return out


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir: str, verb: str, argv: list[str], cfg: ExperimentConfig, extra=None) -> None:
    manifest = {
        "verb": verb,
        "argv": list(argv),
        "seed": cfg.train.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "git_describe": git_describe(),
        **(extra or {}),
    }
    manifest["config"]["model"]["image_size"] = list(manifest["config"]["model"]["image_size"])
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# plots


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(history: list[dict], path: str) -> None:
    plt = _plt()
    its = [r["iteration"] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "seg", "cmcr_mask", "cmcr_class", "cmcr_align"):
        ax.plot(its, [r[key] for r in history], label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_iou(report, names: list[str], path: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    vals = [0.0 if v is None or np.isnan(v) else v for v in report.per_class_iou]
    ax.bar(names, vals)
    ax.set_ylim(0, 1)
    ax.set_title(f"mIoU {report.miou:.3f}")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_panels(samples, preds, num_classes: int, path: str, n: int = 4) -> None:
    plt = _plt()
    n = min(n, len(samples))
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        for ax, im, title in zip(axes[i], (samples[i].image, samples[i].mask, preds[i]), ("image", "gt", "pred")):
            if im.ndim == 2:
                ax.imshow(im, cmap="tab10", vmin=0, vmax=max(num_classes, 10))
            else:
                ax.imshow(im)
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_matrix(matrix, path: str) -> None:
    plt = _plt()
    m = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(m, vmin=-1, vmax=1, cmap="coolwarm")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=8)
    ax.set_xlabel("pixel level")
    ax.set_ylabel("query level")
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# verbs


def _val_set(cfg: ExperimentConfig, limit: int | None):
    from .data import generate_dataset

    n = cfg.data.num_val if not limit else min(limit, cfg.data.num_val)
    return generate_dataset(n, cfg.model, cfg.data.data_seed, offset=cfg.data.num_train)


def _guard(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def cmd_gen_data(args, cfg, out) -> dict:
    from .data import generate_dataset, make_split, save_dataset, SplitSpec

    specs = default_class_specs(cfg.model.num_classes, cfg.data.dataset)
    train = generate_dataset(cfg.data.num_train, cfg.model, cfg.data.data_seed)
    val = generate_dataset(cfg.data.num_val, cfg.model, cfg.data.data_seed, offset=cfg.data.num_train)
    split = make_split(train, cfg.model.num_classes, SplitSpec(cfg.data.labeled_fraction, cfg.data.rare_class_boost),
                       cfg.train.seed, specs)
    save_dataset(out, train + val, specs, {
        "train": [s.sample_id for s in train],
        "val": [s.sample_id for s in val],
        "labeled": [train[i].sample_id for i in split.labeled_ids],
        "unlabeled": [train[i].sample_id for i in split.unlabeled_ids],
    })
    return {"num_train": len(train), "num_val": len(val), "labeled": len(split.labeled_ids)}


def cmd_pretrain_sre(args, cfg, out) -> dict:
    from .checkpoint import checkpoint_from_model, save_checkpoint
    from .train import build_data, prepare_model

    path = os.path.join(out, "sre.bin")
    _guard(path, args.force)
    split, _ = build_data(cfg)
    model, hist = prepare_model(cfg, split)
    save_checkpoint(checkpoint_from_model(model, cfg, 0, {"stage": "sre"}), path)
    return {"checkpoint": path, "sre_loss_first": hist[0] if hist else None, "sre_loss_last": hist[-1] if hist else None}


def cmd_train(args, cfg, out) -> dict:
    from .checkpoint import build_model, load_checkpoint
    from .encoders import load_text_embeddings
    from .train import build_data, train

    _guard(os.path.join(out, "checkpoint.bin"), args.force)
    model, sre_ready = None, False
    if args.init:
        ck = load_checkpoint(args.init)
        model = build_model(ck)
        sre_ready = ck.extra.get("stage") == "sre"
    split, val = build_data(cfg)
    if args.text_embeddings:
        from .model import HVLFormer

        model = model or HVLFormer(cfg.model, split.class_specs, seed=cfg.train.seed)
        names, vecs = load_text_embeddings(args.text_embeddings)
        model.text.import_name_embeddings(names, vecs)
    result = train(cfg, split, val, out_dir=out, model=model, sre_ready=sre_ready)
    plot_losses(result.history, os.path.join(out, "loss_curves.png"))
    final = result.history[-1] if result.history else {}
    return {"checkpoint": result.checkpoint_path, "final_loss": final.get("total")}


def cmd_eval(args, cfg, out) -> dict:
    from .checkpoint import build_model, load_checkpoint
    from .metrics import evaluate, predict_samples

    ck = load_checkpoint(args.ckpt)
    model = build_model(ck)
    val = _val_set(ck.cfg, args.limit)
    report = evaluate(model, val)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    names = [c.name for c in ck.class_specs]
    plot_iou(report, names, os.path.join(out, "per_class_iou.png"))
    plot_panels(val, predict_samples(model, val[:4]), ck.cfg.model.num_classes, os.path.join(out, "qualitative.png"))
    print(f"mIoU {report.miou:.4f}")
    return {"miou": report.miou}


def cmd_diagnose(args, cfg, out) -> dict:
    from .checkpoint import build_model, load_checkpoint
    from .metrics import diagnose

    ck = load_checkpoint(args.ckpt)
    model = build_model(ck)
    diag = diagnose(model, _val_set(ck.cfg, args.limit))
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        json.dump(diag, fh, indent=2)
    plot_matrix(diag["diagonal_dominance"], os.path.join(out, "diagonal_dominance.png"))
    print(f"mean_cosine_S {diag['mean_cosine_S']:.4f}  diagonal {diag['diag_diagonal_mean']:.4f}  "
          f"off-diagonal {diag['diag_off_diagonal_mean']:.4f}  sre {diag['sre_stats']}")
    return {"mean_cosine_S": diag["mean_cosine_S"]}


def cmd_ablate(args, cfg, out) -> dict:
    from .ablation import ablate, variant_configs

    variant_configs(args.name, cfg)  # fail fast on unknown names
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    path = os.path.join(out, f"ablation_{args.name}.csv")
    rows = ablate(args.name, cfg, seeds, path, args.limit)
    return {"csv": path, "rows": len(rows)}


def cmd_export(args, cfg, out) -> dict:
    from .encoders import TextEmbedder, save_text_embeddings

    if args.ckpt:
        from .checkpoint import build_model, load_checkpoint

        text = build_model(load_checkpoint(args.ckpt)).text
    else:
        text = TextEmbedder(cfg.model, default_class_specs(cfg.model.num_classes, cfg.data.dataset))
    names = [c.name for c in text.class_specs]
    with torch.no_grad():
        vecs = torch.stack([text.encoder.embed_name(n).mean(dim=0) for n in names])
    path = os.path.join(out, "text_embeddings.bin")
    save_text_embeddings(path, names, vecs)
    return {"file": path, "classes": len(names)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-sre": cmd_pretrain_sre,
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
    "export-text-embeddings": cmd_export,
}


def run(argv: list[str] | None = None) -> int:
    from .train import TrainingAborted

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        overrides = list(args.set) + split_dotted(rest)
        if args.encoder_warm_iters is not None:
            overrides.append(f"train.encoder_warm_iters={args.encoder_warm_iters}")
        cfg = load_config(args.config, overrides)
    except UsageError as err:
        msg = str(err)
        print(msg if msg.startswith("usage") else f"{parser.format_usage()}{parser.prog}: error: {msg}",
              file=sys.stderr)
        return EXIT_INVALID
    except (KeyError, ValueError) as err:
        print(f"{parser.format_usage()}invalid configuration: {err}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return EXIT_ABORT

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    report = validate_config(cfg.model, cfg.train, default_class_specs(cfg.model.num_classes, cfg.data.dataset)
                             if cfg.model.num_classes <= 7 else None)
    if not report.ok:
        print(f"configuration invalid:\n{report}", file=sys.stderr)
        return EXIT_INVALID

    out = args.out or os.path.join("runs", args.verb)
    os.makedirs(out, exist_ok=True)
    torch.manual_seed(cfg.train.seed)
    try:
        result = COMMANDS[args.verb](args, cfg, out)
    except KeyError as err:
        print(f"error: {err.args[0] if err.args else err}", file=sys.stderr)
        return EXIT_INVALID
    except FileExistsError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, FileNotFoundError, FloatingPointError) as err:
        print(f"aborted: {err}", file=sys.stderr)
        write_manifest(out, args.verb, argv, cfg, {"status": "aborted", "error": str(err)})
        return EXIT_ABORT
    dump_config(cfg, os.path.join(out, "config.yaml"))
    write_manifest(out, args.verb, argv, cfg, {"status": "ok", "result": result})
    return EXIT_OK


def main() -> None:
    sys.exit(run())
