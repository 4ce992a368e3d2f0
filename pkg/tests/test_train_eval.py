import math

import numpy as np
import pytest
import torch

from conftest import small_experiment, tiny_model_config
from hvlformer import losses as L
from hvlformer import train as train_mod
from hvlformer.ablation import LAMBDA_SWEEP, ablate, variant_configs
from hvlformer.checkpoint import build_model, checkpoint_from_model, load_checkpoint, save_checkpoint
from hvlformer.config import ExperimentConfig, TrainConfig
from hvlformer.data import Sample, images_to_tensor
from hvlformer.metrics import (confusion_matrix, diagnose, diagonal_dominance, diagonal_summary, evaluate,
                               iou_from_confusion, mean_cosine_alignment, relevance_separation)
from hvlformer.train import TrainingAborted, build_data, prepare_model, train

FROZEN_PREFIXES = ("text.encoder.", "text.t0", "sre.", "frozen_encoder.")


def tiny_experiment(**train_kw) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.model = tiny_model_config()
    cfg.train = TrainConfig(lr=1e-3, warmup_iters=2, total_iters=10, labeled_batch=2, unlabeled_batch=2,
                            sre_pretrain_iters=5, tau=0.5)
    cfg.data.num_train = 12
    cfg.data.num_val = 4
    cfg.data.labeled_fraction = 0.5
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


def frozen_state(model):
    return {k: v.clone() for k, v in model.state_dict().items() if k.startswith(FROZEN_PREFIXES)}


# --------------------------------------------------------------------------
# training loop


@pytest.mark.slow
def test_smoke_run_history_finite():
    result = train(small_experiment(total_iters=50), log_every=0)
    assert len(result.history) == 50
    for rec in result.history:
        for k, v in rec.items():
            assert math.isfinite(v), (rec["iteration"], k)
    assert any(rec["cmcr_mask"] > 0 or rec["cmcr_class"] > 0 for rec in result.history)


def test_frozen_parts_unchanged_by_training():
    cfg = tiny_experiment(total_iters=15)
    split, val = build_data(cfg)
    model, _ = prepare_model(cfg, split)
    before = frozen_state(model)
    assert any(k.startswith("sre.") for k in before) and "text.t0" in before
    trainable = {k: v.clone() for k, v in model.state_dict().items() if k.startswith("decoder.")}
    train(cfg, split, val, model=model, sre_ready=True, log_every=0)
    after = frozen_state(model)
    for k in before:
        assert before[k].numpy().tobytes() == after[k].numpy().tobytes(), k
    assert any(not torch.equal(v, model.state_dict()[k]) for k, v in trainable.items())


def test_supervised_mode_never_touches_unlabeled_branch(monkeypatch):
    def boom(*a, **kw):
        raise AssertionError("unlabeled branch executed")

    monkeypatch.setattr(L, "cmcr_losses", boom)
    monkeypatch.setattr(train_mod, "make_views", boom, raising=False)
    cfg = tiny_experiment(total_iters=3)
    cfg.train.lambdas = {"reg": 0.0, "div": 0.0, "cmcr": 0.0}
    hist = train(cfg, log_every=0).history
    assert all(r["cmcr_mask"] == r["cmcr_class"] == r["cmcr_align"] == 0.0 for r in hist)


def test_nan_loss_aborts_and_keeps_last_checkpoint(monkeypatch, tmp_path):
    calls = {"n": 0}
    real = L.reg_vision

    def flaky(a, b):
        calls["n"] += 1
        out = real(a, b)
        return out * float("nan") if calls["n"] == 4 else out

    monkeypatch.setattr(L, "reg_vision", flaky)
    cfg = tiny_experiment(total_iters=10, ckpt_every=2)
    with pytest.raises(TrainingAborted) as err:
        train(cfg, out_dir=str(tmp_path), log_every=0)
    assert err.value.iteration == 3 and err.value.part == "reg_V"
    assert err.value.last_good == str(tmp_path / "checkpoint.bin")
    assert load_checkpoint(err.value.last_good).iteration == 2
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3


def test_metrics_records_written(tmp_path):
    import json

    cfg = tiny_experiment(total_iters=4, eval_every=2)
    train(cfg, out_dir=str(tmp_path), log_every=0)
    recs = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in recs] == [0, 1, 2, 3]
    assert {"lr", "total", "seg", "cmcr_align"} <= set(recs[0])
    assert "val_miou" in recs[1] and "val_miou" not in recs[0]


def test_relevance_separation_after_pretraining():
    cfg = small_experiment(sre_pretrain_iters=300)
    cfg.data.labeled_fraction = 0.5
    split, val = build_data(cfg)
    model, hist = prepare_model(cfg, split)
    assert hist[-1] < hist[0]
    present, absent = relevance_separation(model, val)
    assert present - absent > 0.1


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_experiment(total_iters=3)
    result = train(cfg, log_every=0)
    model = result.model
    model.text.encoder.overrides["circle"] = torch.randn(cfg.model.embed_dim)
    model.text.refresh_reference()
    path = str(tmp_path / "c.bin")
    save_checkpoint(checkpoint_from_model(model, cfg, 3, {"note": "x"}), path)
    ckpt = load_checkpoint(path)
    assert ckpt.iteration == 3 and ckpt.extra == {"note": "x"} and ckpt.config_hash == cfg.config_hash()
    loaded = build_model(ckpt)
    _, val = build_data(cfg)
    img = images_to_tensor([s.image for s in val])
    with torch.no_grad():
        a, b = model(img), loaded(img)
    for x, y in zip(a.trace.predictions + a.trace.mask_logits + a.trace.class_logits,
                    b.trace.predictions + b.trace.mask_logits + b.trace.class_logits):
        assert torch.equal(x, y)
    assert torch.equal(a.relevance, b.relevance)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(str(p))


# --------------------------------------------------------------------------
# metrics


def brute_confusion(pred, gt, k):
    conf = np.zeros((k, k), dtype=np.int64)
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            if gt[y, x] < k:
                conf[gt[y, x], pred[y, x]] += 1
    return conf


def brute_iou(conf):
    k = conf.shape[0]
    ious = []
    for c in range(k):
        tp = conf[c, c]
        fp = sum(conf[r, c] for r in range(k) if r != c)
        fn = sum(conf[c, r] for r in range(k) if r != c)
        ious.append(None if tp + fp + fn == 0 else tp / (tp + fp + fn))
    kept = [v for v in ious if v is not None]
    return ious, sum(kept) / len(kept)


def test_two_class_half_prediction():
    gt = np.zeros((4, 4), dtype=np.int64)
    pred = np.zeros((4, 4), dtype=np.int64)
    pred[:, 2:] = 1
    conf = confusion_matrix(pred, gt, 2)
    iou, miou = iou_from_confusion(conf)
    assert iou[0] == 0.5 and iou[1] == 0.0 and miou == 0.25
    assert (conf == brute_confusion(pred, gt, 2)).all()


@pytest.mark.parametrize("seed", range(20))
def test_confusion_and_miou_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = 4
    gt = rng.integers(0, k + 1, (8, 8))  # includes IGNORE
    gt[gt == 2] = rng.integers(0, 2)  # often leaves a class unused
    pred = rng.integers(0, k, (8, 8))
    conf = confusion_matrix(pred, gt, k)
    assert (conf == brute_confusion(pred, gt, k)).all()
    assert (conf.sum(axis=1) == np.bincount(gt[gt < k], minlength=k)).all()
    iou, miou = iou_from_confusion(conf)
    ref, ref_m = brute_iou(conf)
    for a, b in zip(iou, ref):
        assert (b is None and np.isnan(a)) or a == b
    assert miou == ref_m


def test_evaluate_perfect_pure_and_empty(tiny_cfg, tiny_specs):
    from hvlformer.model import HVLFormer

    model = HVLFormer(tiny_cfg, tiny_specs).eval()
    rng = np.random.default_rng(0)
    imgs = [rng.random((8, 8, 3)).astype(np.float32) for _ in range(3)]
    preds = model.predict(images_to_tensor(imgs)).numpy()
    samples = [Sample(i, p) for i, p in zip(imgs, preds)]
    rep = evaluate(model, samples)
    assert rep.miou == 1.0
    assert np.array(rep.confusion).sum() == 3 * 64
    noisy = [Sample(s.image, np.where(rng.random((8, 8)) < 0.3, 3, (s.mask + 1) % 3)) for s in samples]
    assert evaluate(model, noisy, diagnostics=True).to_dict() == evaluate(model, noisy, diagnostics=True).to_dict()
    with pytest.raises(ValueError):
        evaluate(model, [])


def naive_mean_cosine(q, z):
    e, k, d = q.shape
    h, w = z.shape[1:]
    total = 0.0
    for a in range(e):
        for c in range(k):
            qa = [float(v) for v in q[a, c]]
            acc = 0.0
            for y in range(h):
                for x in range(w):
                    zp = [float(v) for v in z[:, y, x]]
                    dot = sum(i * j for i, j in zip(qa, zp))
                    n = math.sqrt(sum(i * i for i in qa)) * math.sqrt(sum(j * j for j in zp))
                    acc += dot / n
            total += acc / (h * w)
    return total / (e * k)


@pytest.mark.parametrize("shape", [(1, 2, 1, 2), (2, 3, 4, 4), (3, 4, 4, 4), (2, 1, 2, 8)])
def test_mean_cosine_matches_loop_oracle(shape):
    e, k, h, w = shape
    g = torch.Generator().manual_seed(e * 100 + k)
    q = torch.randn(e, k, 5, generator=g, dtype=torch.float64)
    z = torch.randn(5, h, w, generator=g, dtype=torch.float64)
    assert abs(mean_cosine_alignment(q, z).item() - naive_mean_cosine(q, z)) <= 1e-10


def test_mean_cosine_trivial_cases():
    q = torch.tensor([[[1.0, 0.0, 0.0]]], dtype=torch.float64)
    par = torch.zeros(3, 2, 2, dtype=torch.float64)
    par[0] = torch.tensor([[1.0, 2.0], [0.5, 3.0]])
    assert mean_cosine_alignment(q, par).item() == pytest.approx(1.0, abs=1e-15)
    orth = torch.zeros(3, 2, 2, dtype=torch.float64)
    orth[1:] = 1.0
    assert mean_cosine_alignment(q, orth).item() == 0.0


def test_diagonal_dominance_shapes_and_range(tiny_cfg, tiny_specs):
    from hvlformer.model import HVLFormer

    model = HVLFormer(tiny_cfg, tiny_specs).eval()
    rng = np.random.default_rng(1)
    samples = [Sample(rng.random((8, 8, 3)).astype(np.float32), rng.integers(0, 3, (8, 8))) for _ in range(2)]
    d = diagnose(model, samples)
    m = np.array(d["diagonal_dominance"])
    assert m.shape == (2, 2) and np.isfinite(m).all() and (np.abs(m) <= 1.0).all()
    assert set(d["sre_stats"]) == {"min", "max", "mean"}
    one = diagonal_dominance(torch.randn(1, 3, 8, dtype=torch.float64), [torch.randn(8, 2, 2, dtype=torch.float64)])
    assert one.shape == (1, 1)
    assert diagonal_summary(one)["dominant"] is False


def test_diagonal_dominance_entries_oracle():
    g = torch.Generator().manual_seed(3)
    q = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    z = [torch.randn(4, 2, 2, generator=g, dtype=torch.float64), torch.randn(4, 4, 4, generator=g, dtype=torch.float64)]
    m = diagonal_dominance(q, z)
    for e in range(2):
        for f in range(2):
            pooled = z[f].mean(dim=(1, 2))
            ref = np.mean([float(torch.dot(q[e, k], pooled) / (q[e, k].norm() * pooled.norm())) for k in range(3)])
            assert abs(m[e, f].item() - ref) < 1e-12


# --------------------------------------------------------------------------
# ablations


def test_ablation_names():
    base = ExperimentConfig()
    with pytest.raises(KeyError, match="lambda_sweep"):
        variant_configs("no_such_thing", base)
    sweep = variant_configs("lambda_sweep", base)
    assert [c.train.lambdas["cmcr"] for _, c in sweep] == list(LAMBDA_SWEEP) == [1, 3, 5, 8, 10]
    (_, c), = variant_configs("sre_threshold", base)
    assert c.model.sre_mode == "threshold"
    (_, c), = variant_configs("no_hqg", base)
    assert c.model.hierarchy_levels == 1
    (_, c), = variant_configs("no_htqg", base)
    assert c.model.hierarchy_levels == 1 and c.model.sre_mode == "none" and not c.model.use_htqg
    (_, c), = variant_configs("cmcr_mask_only", base)
    assert c.train.cmcr_terms == ["mask"]
    assert base.model.hierarchy_levels == 3 and base.train.cmcr_terms == ["mask", "class", "align"]


def test_ablate_writes_one_row_per_variant_and_seed(tmp_path):
    base = tiny_experiment(total_iters=2, sre_pretrain_iters=1)
    path = tmp_path / "out.csv"
    rows = ablate("no_ptrm", base, seeds=(0, 1), csv_path=str(path))
    assert [(r["variant"], r["seed"]) for r in rows] == [("no_ptrm", 0), ("no_ptrm", 1)]
    text = path.read_text().splitlines()
    assert len(text) == 3 and text[0].startswith("ablation,variant,seed,miou")
