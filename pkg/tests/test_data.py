import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hvlformer.config import ModelConfig, default_class_specs
from hvlformer.data import (AugmentParams, GeomRecord, Sample, SplitSpec, generate_dataset, generate_sample,
                            load_dataset, make_split, make_views, masks_to_tensor, presence_targets, read_split,
                            sample_batch, save_dataset, warp_back)

CFG = ModelConfig()
K = CFG.num_classes


def test_generation_is_deterministic():
    a = generate_dataset(1, CFG, 0)[0]
    b = generate_dataset(1, CFG, 0)[0]
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = generate_dataset(1, CFG, 1)[0]
    assert not np.array_equal(a.image, c.image)


def test_every_class_occurs_in_200_samples():
    masks = np.stack([s.mask for s in generate_dataset(200, CFG, 0)])
    counts = np.bincount(masks.ravel(), minlength=K)
    assert (counts[:K] > 0).all()


def test_samples_are_valid_with_one_to_four_disjoint_shapes():
    from scipy import ndimage

    for s in generate_dataset(50, CFG, 3):
        s.validate(K)
        fg = s.mask > 0
        _, n = ndimage.label(fg)
        assert 1 <= n <= 4 or len(np.unique(s.mask)) > 1
        # shapes never touch: no 4-neighbour pair carries two different foreground ids
        for a, b in ((s.mask[1:], s.mask[:-1]), (s.mask[:, 1:], s.mask[:, :-1])):
            assert not ((a > 0) & (b > 0) & (a != b)).any()


def test_sample_validate_rejects_bad_ids():
    s = generate_sample(CFG, 0, 0)
    s.mask[0, 0] = K + 3
    with pytest.raises(ValueError):
        s.validate(K)


def test_identity_views_equal_original():
    s = generate_sample(CFG, 0, 0)
    tr = make_views(s, 5, params=AugmentParams.identity(), num_classes=K)
    assert tr.geom_w.is_identity and tr.geom_s.is_identity
    assert np.allclose(tr.weak.image, s.image) and np.allclose(tr.strong.image, s.image)
    assert np.array_equal(tr.strong.mask, s.mask)


def test_weak_view_keeps_geometry():
    s = generate_sample(CFG, 0, 1)
    tr = make_views(s, 1, num_classes=K)
    assert np.array_equal(tr.weak.mask, s.mask)
    assert tr.geom_w.is_identity


def test_views_are_deterministic():
    s = generate_sample(CFG, 0, 2)
    a, b = make_views(s, 9, num_classes=K), make_views(s, 9, num_classes=K)
    assert np.array_equal(a.strong.image, b.strong.image) and a.geom_s == b.geom_s


def test_flip_inverse_maps_column_to_mirror():
    g = GeomRecord(8, 8, flip=True)
    y, x = g.inverse(np.array([2, 2]), np.array([0, 5]))
    assert list(x) == [7, 2] and list(y) == [2, 2]


def test_cutmix_hole_is_invalid():
    g = GeomRecord(64, 64, box=(16, 32, 48, 64))
    valid = g.validity()
    assert not valid[16:48, 32:64].any()
    assert valid[:16].all() and valid[48:].all() and valid[16:48, :32].all()
    idx, orig_valid = g.gather_index()
    assert not orig_valid[16:48, 32:64].any()


def test_warp_back_at_coarse_stride():
    g = GeomRecord(64, 64, flip=True, dy=16, dx=-16, box=(0, 0, 16, 16))
    view = torch.arange(16, dtype=torch.float64).reshape(4, 4)
    warped, valid = warp_back(g, view, stride=16)
    for y in range(4):
        for x in range(4):
            vy, vx = y + 1, (3 - x) - 1
            inside = 0 <= vy < 4 and 0 <= vx < 4 and not (vy == 0 and vx == 0)
            assert bool(valid[y, x]) == inside
            if inside:
                assert warped[y, x] == view[vy, vx]


def test_misaligned_stride_rejected():
    with pytest.raises(ValueError):
        GeomRecord(64, 64, dy=8).gather_index(16)


def _roundtrip(seed: int, size: int = 32, grid: int = 8) -> None:
    cfg = ModelConfig(image_size=(size, size), feature_strides=[8, 4, 2])
    s = generate_sample(cfg, seed, 0)
    donor = generate_sample(cfg, seed + 1, 0)
    params = AugmentParams(grid=grid, p_flip=0.5, p_translate=0.7, p_cutmix=0.7)
    tr = make_views(s, seed, donor, params, cfg.num_classes)
    for geom, view in ((tr.geom_w, tr.weak), (tr.geom_s, tr.strong)):
        # every valid view pixel lands exactly on its original coordinate and label
        valid_view = geom.validity()
        yy, xx = np.nonzero(valid_view)
        oy, ox = geom.inverse(yy, xx)
        assert ((oy >= 0) & (oy < size) & (ox >= 0) & (ox < size)).all()
        assert np.array_equal(view.mask[yy, xx], s.mask[oy, ox])
        fy, fx = geom.forward(oy, ox)
        assert np.array_equal(fy, yy) and np.array_equal(fx, xx)
        # warping the view mask back reproduces the original on valid pixels
        warped, valid = warp_back(geom, torch.as_tensor(view.mask))
        assert torch.equal(warped[valid], torch.as_tensor(s.mask)[valid])
        for stride in (2, 4, 8):
            _, v = warp_back(geom, torch.zeros(size // stride, size // stride), stride)
            assert v.shape == (size // stride, size // stride)


def test_warp_roundtrip_1000_random_triplets():
    for seed in range(1000):
        _roundtrip(seed)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.integers(-2, 2), st.integers(-2, 2),
       st.one_of(st.none(), st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(1, 2), st.integers(1, 2))))
def test_gather_index_inverts_forward(seed, flip, cy, cx, box):
    if box is not None:
        y0, x0, bh, bw = box
        box = (y0 * 4, x0 * 4, min(y0 + bh, 4) * 4, min(x0 + bw, 4) * 4)
        if box[0] == box[2] or box[1] == box[3]:
            box = None
    g = GeomRecord(16, 16, flip, cy * 4, cx * 4, box)
    rng = np.random.default_rng(seed)
    orig = torch.as_tensor(rng.normal(size=(16, 16)))
    # push the original forward into view coordinates, then pull it back
    view = torch.full((16, 16), float("nan"), dtype=torch.float64)
    yy, xx = np.mgrid[0:16, 0:16]
    vy, vx = g.forward(yy, xx)
    ok = (vy >= 0) & (vy < 16) & (vx >= 0) & (vx < 16)
    view[vy[ok], vx[ok]] = orig[yy[ok], xx[ok]]
    back, valid = warp_back(g, view)
    assert torch.equal(back[valid], orig[valid])
    assert int(valid.sum()) == int(g.validity().sum())


def test_presence_targets_example():
    mask = torch.tensor([[[0, 2], [2, 0]]])
    assert presence_targets(mask, 3).tolist() == [[1.0, 0.0, 1.0]]


def test_split_full_fraction_reuses_pool_and_batches():
    samples = generate_dataset(10, CFG, 0)
    split = make_split(samples, K, SplitSpec(1.0), 0)
    assert split.unlabeled_ids == list(range(10))
    lab, trip = sample_batch(split, 0, 0)
    assert len(lab) == 8 and len(trip) == 8


def test_split_validation():
    with pytest.raises(ValueError):
        SplitSpec(0.0)
    with pytest.raises(ValueError):
        SplitSpec(0.5, rare_class_boost=0.5)


def test_missing_classes_are_flagged():
    samples = generate_dataset(20, CFG, 0)
    split = make_split(samples, K, SplitSpec(0.05), 0)
    assert split.labeled_ids
    present = set(np.unique(np.concatenate([samples[i].mask.ravel() for i in split.labeled_ids])))
    assert set(split.missing_classes) == set(range(K)) - present


def test_boost_one_is_uniform():
    samples = generate_dataset(30, CFG, 0)
    split = make_split(samples, K, SplitSpec(0.5, 1.0), 0)
    assert np.allclose(split.labeled_weights, 1.0)


def test_rare_class_boost_increases_frequency():
    probs = np.array([0.002, 0.25, 0.25, 0.25, 0.248])
    samples = generate_dataset(300, CFG, 4, class_probs=probs)
    rare = 1
    n_rare = sum(rare in s.mask for s in samples)
    assert 1 <= n_rare <= 10

    def freq(boost):
        split = make_split([Sample(s.image, s.mask) for s in samples], K, SplitSpec(1.0, boost), 0)
        hits = 0
        for it in range(1000):
            lab, _ = sample_batch(split, it, 0, 8, 0)
            hits += sum(rare in s.mask for s in lab)
        return hits / 8000

    base, boosted = freq(1.0), freq(10.0)
    sigma = np.sqrt(base * (1 - base) / 8000) + np.sqrt(boosted * (1 - boosted) / 8000)
    assert boosted - base > 3 * sigma


def test_dataset_disk_roundtrip(tmp_path):
    samples = generate_dataset(3, CFG, 0)
    specs = default_class_specs(K)
    save_dataset(str(tmp_path), samples, specs, {"train": [s.sample_id for s in samples]})
    loaded, loaded_specs = load_dataset(str(tmp_path), read_split(str(tmp_path), "train"))
    assert [c.name for c in loaded_specs] == [c.name for c in specs]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_masks_to_tensor_maps_negative_to_ignore():
    m = np.array([[0, -1], [2, 1]])
    assert masks_to_tensor([m], 3).tolist() == [[[0, 3], [2, 1]]]
