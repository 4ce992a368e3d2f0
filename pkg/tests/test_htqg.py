import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_model_config
from fdcheck import fd_check
from hvlformer.config import seeded_init_
from hvlformer.data import presence_targets
from hvlformer.htqg import (QueryHeads, SemanticRelevanceEstimator, diversity_loss, generate_queries,
                            pretrain_sre, weight_queries)


def test_orthogonal_levels_zero_diversity():
    q = torch.eye(3, dtype=torch.float64)[None]
    assert diversity_loss(q).item() == 0.0


def test_identical_pair_gives_two():
    v = torch.tensor([[1.0, 2.0, -1.0]], dtype=torch.float64)
    q = torch.stack([v, v], dim=1)
    assert diversity_loss(q).item() == pytest.approx(2.0, abs=1e-12)


def test_hand_example_three_levels():
    # (1,0), (0,1), (1,1)/sqrt2: cos^2 = 0, 0.5, 0.5 per unordered pair, doubled
    r = 1 / math.sqrt(2)
    q = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [r, r]]], dtype=torch.float64)
    assert abs(diversity_loss(q).item() - 2.0) <= 1e-10


def test_single_level_and_zero_vectors():
    assert diversity_loss(torch.randn(4, 1, 5)).item() == 0.0
    assert diversity_loss(torch.zeros(2, 3, 4)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_diversity_nonnegative_and_scale_invariant(seed, alpha):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(3, 3, 5, generator=g, dtype=torch.float64)
    base = diversity_loss(q)
    assert base >= 0
    scale = torch.ones(3, 3, 1, dtype=torch.float64)
    scale[1, 2] = alpha
    assert diversity_loss(q * scale).item() == pytest.approx(base.item(), rel=1e-9)


def test_diversity_gradcheck():
    q = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    fd_check(lambda: diversity_loss(q), [q])


def test_heads_are_disjoint_and_functional():
    cfg = tiny_model_config()
    heads = seeded_init_(QueryHeads(cfg), 0, "heads")
    t = torch.randn(3, cfg.embed_dim)
    t[2] = t[1]
    q = generate_queries(t, heads)
    assert q.shape == (3, 2, cfg.embed_dim)
    assert torch.equal(q[1], q[2])
    ids = [{id(p) for p in h.parameters()} for h in heads.heads]
    assert not ids[0] & ids[1]


def test_zero_heads_give_zero_queries():
    cfg = tiny_model_config()
    heads = QueryHeads(cfg)
    for p in heads.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(heads(torch.randn(3, cfg.embed_dim)), torch.zeros(3, 2, cfg.embed_dim))


def test_heads_gradcheck():
    cfg = tiny_model_config()
    heads = seeded_init_(QueryHeads(cfg), 0, "heads").double()
    t = torch.randn(3, cfg.embed_dim, dtype=torch.float64)
    fd_check(lambda: heads(t).sum(), list(heads.parameters()))


def test_sre_zero_output_is_half_and_range():
    cfg = tiny_model_config()
    sre = seeded_init_(SemanticRelevanceEstimator(cfg), 0, "sre")
    levels = [torch.randn(2, cfg.embed_dim, 2, 2), torch.randn(2, cfg.embed_dim, 4, 4)]
    t = torch.randn(3, cfg.embed_dim)
    s = sre(levels, t)
    assert s.shape == (2, 3) and ((s > 0) & (s < 1)).all()
    torch.nn.init.zeros_(sre.mlp[-1].weight)
    torch.nn.init.zeros_(sre.mlp[-1].bias)
    assert torch.equal(sre(levels, t), torch.full((2, 3), 0.5))


def test_weight_queries_examples():
    q = torch.randn(3, 2, 4)
    half = weight_queries(q, torch.full((1, 3), 0.5))
    assert torch.equal(half[0], q / 2)
    tiny = weight_queries(q, torch.full((1, 3), 1e-12))
    assert tiny.abs().max() < 1e-10
    s = torch.tensor([[0.2, 0.7, 0.5]])
    assert torch.equal(weight_queries(q, s, "threshold")[0], q * torch.tensor([0.0, 1.0, 0.0])[:, None, None])
    perm = torch.tensor([2, 0, 1])
    assert torch.equal(weight_queries(q[perm], s[:, perm]), weight_queries(q, s)[:, perm])
    with pytest.raises(ValueError):
        weight_queries(q, s, "bogus")


def test_pretrain_sre_separates_presence_and_freezes():
    cfg = tiny_model_config(embed_dim=8)
    sre = seeded_init_(SemanticRelevanceEstimator(cfg), 0, "sre")
    g = torch.Generator().manual_seed(0)
    t = torch.randn(3, 8, generator=g)
    protos = torch.randn(3, 8, generator=g) * 2

    def batches(i):
        gen = torch.Generator().manual_seed(100 + i)
        present = (torch.rand(8, 3, generator=gen) > 0.5).float()
        feat = present @ protos + 0.1 * torch.randn(8, 8, generator=gen)
        levels = [feat[:, :, None, None].expand(-1, -1, 2, 2), feat[:, :, None, None].expand(-1, -1, 4, 4)]
        return levels, present

    hist = pretrain_sre(sre, batches, t, iters=300, lr=1e-2)
    assert hist[-1] < hist[0]
    assert all(not p.requires_grad for p in sre.parameters())
    levels, present = batches(999)
    s = sre(levels, t)
    assert s[present > 0].mean() - s[present == 0].mean() > 0.1


def test_presence_from_mask():
    assert presence_targets(torch.tensor([[[0, 0], [2, 2]]]), 3).tolist() == [[1, 0, 1]]
