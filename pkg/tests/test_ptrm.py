import torch

from conftest import tiny_model_config
from fdcheck import fd_check
from hvlformer.config import seeded_init_
from hvlformer.ptrm import (PTRM, AttentionGates, CrossAttentionRefiner, IdentityRefiner, PTRMLevel,
                            bidirectional_refine, build_refiner, compute_gates,
                            cross_scale_refine, finalize_level, pool_maps, project_to_latent)

D = J = 8


def _level(seed=0):
    return seeded_init_(PTRMLevel(D, J), seed, "level").double()


def _inputs(b=2, k=3, h=4, w=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, k, D, generator=g, dtype=torch.float64),
            torch.randn(b, D, h, w, generator=g, dtype=torch.float64))


def test_uniform_visual_gives_uniform_affinity():
    lvl = _level()
    q, _ = _inputs()
    z = torch.ones(2, D, 4, 4, dtype=torch.float64)
    pair = project_to_latent(q, z, lvl)
    assert torch.allclose(pair.affinity, torch.full_like(pair.affinity, 1 / 16), atol=1e-15)


def test_affinity_sums_to_one_and_fused_is_sum():
    lvl = _level()
    q, z = _inputs()
    pair = project_to_latent(q, z, lvl)
    assert torch.allclose(pair.affinity.sum(dim=(-2, -1)), torch.ones(2, 3, dtype=torch.float64), atol=1e-6)
    assert torch.equal(pair.fused, pair.text + pair.visual[:, None])
    assert pair.text.shape == (2, 3, J, 4, 4)


def test_zero_gate_convs_give_half():
    lvl = _level()
    for p in lvl.gate.parameters():
        torch.nn.init.zeros_(p)
    gates = compute_gates(project_to_latent(*_inputs(), lvl), lvl)
    for g in (gates.text, gates.visual, gates.fused):
        assert torch.equal(g, torch.full_like(g, 0.5))


def test_gates_in_open_interval_and_three_channels():
    lvl = _level()
    pair = project_to_latent(*_inputs(k=5), lvl)
    assert pool_maps(pair).shape[1] == 3
    gates = compute_gates(pair, lvl)
    for g in (gates.text, gates.visual, gates.fused):
        assert ((g > 0) & (g < 1)).all() and g.shape == (2, 1, 4, 4)


def _pair():
    return project_to_latent(*_inputs(), _level())


def test_identity_gates():
    pair = _pair()
    ones = torch.ones(2, 1, 4, 4, dtype=torch.float64)
    t, v = bidirectional_refine(pair, AttentionGates(ones, ones, ones))
    assert torch.equal(t, pair.text) and torch.equal(v, pair.visual)


def test_gate_veto_is_exact():
    pair = _pair()
    ones = torch.ones(2, 1, 4, 4, dtype=torch.float64)
    t, v = bidirectional_refine(pair, AttentionGates(ones, ones, torch.zeros_like(ones)))
    assert not t.any() and not v.any()


def test_half_gates_quarter_text():
    pair = _pair()
    half = torch.full((2, 1, 4, 4), 0.5, dtype=torch.float64)
    t, _ = bidirectional_refine(pair, AttentionGates(half, half, half))
    assert torch.equal(t, pair.text / 4)


def test_residual_safety_bit_exact():
    lvl = _level()
    q, z = _inputs()
    pair = project_to_latent(q, z, lvl)
    # seeded init leaves the output bias at zero, so a zero text map adds exactly nothing
    assert not lvl.t_out.bias.any()
    out = finalize_level(torch.zeros_like(pair.text), pair.visual, q, lvl)
    assert torch.equal(out.queries, q)
    assert out.pixels.shape == z.shape


def test_level_gradchecks():
    lvl = _level()
    q, z = _inputs(b=1)
    q.requires_grad_(True)
    z.requires_grad_(True)

    def full():
        pair = project_to_latent(q, z, lvl)
        t, v = bidirectional_refine(pair, compute_gates(pair, lvl))
        out = finalize_level(t, v, q, lvl)
        return out.queries.pow(2).sum() + out.pixels.sin().sum()

    fd_check(full, list(lvl.parameters()) + [q, z], n=32)
    fd_check(lambda: project_to_latent(q, z, lvl).text.tanh().sum(), [q, z] + list(lvl.parameters()), n=16)


def test_cross_scale_noop_when_no_extra_levels():
    q, _ = _inputs()
    queries, outs = cross_scale_refine([q], [], [])
    assert queries[0] is q and outs == []


def test_ptrm_handles_fewer_query_levels():
    cfg = tiny_model_config(hierarchy_levels=1)
    ptrm = seeded_init_(PTRM(cfg), 0, "refiner")
    q = torch.randn(2, 3, cfg.embed_dim)
    z = [torch.randn(2, cfg.embed_dim, 2, 2), torch.randn(2, cfg.embed_dim, 4, 4)]
    queries, pixels = ptrm([q], z)
    assert len(queries) == 1 and len(pixels) == 2
    assert [p.shape for p in pixels] == [zz.shape for zz in z]
    # one refinement per pixel level: the query differs from the per-level-only result
    single = ptrm.refine_level(q, z[0], 0).queries
    assert not torch.allclose(queries[0], single)


def test_ptrm_matches_manual_composition():
    cfg = tiny_model_config()
    ptrm = seeded_init_(PTRM(cfg), 0, "refiner")
    q = [torch.randn(1, 3, cfg.embed_dim) for _ in range(2)]
    z = [torch.randn(1, cfg.embed_dim, 2, 2), torch.randn(1, cfg.embed_dim, 4, 4)]
    queries, pixels = ptrm(q, z)
    for e in range(2):
        lvl = ptrm.levels[e]
        pair = project_to_latent(q[e], z[e], lvl)
        t, v = bidirectional_refine(pair, compute_gates(pair, lvl))
        ref = finalize_level(t, v, q[e], lvl)
        assert torch.equal(queries[e], ref.queries) and torch.equal(pixels[e], ref.pixels)


def test_alternative_refiners():
    cfg = tiny_model_config()
    q = [torch.randn(2, 3, cfg.embed_dim) for _ in range(2)]
    z = [torch.randn(2, cfg.embed_dim, 2, 2), torch.randn(2, cfg.embed_dim, 4, 4)]
    assert isinstance(build_refiner(tiny_model_config(ptrm_mode="none")), IdentityRefiner)
    ca = build_refiner(tiny_model_config(ptrm_mode="crossattn"))
    assert isinstance(ca, CrossAttentionRefiner)
    queries, pixels = ca(q, z)
    assert [p.shape for p in pixels] == [zz.shape for zz in z] and queries[0].shape == q[0].shape
