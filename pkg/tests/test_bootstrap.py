import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from maskboot.bootstrap import (
    PrototypeBank,
    assign_labels,
    bootstrap_masks,
    extract_cluster_features,
    normalize_rows,
    sample_cluster_count,
    spherical_kmeans,
    upsample_labels,
)
from maskboot.config import BootstrapConfig, EncoderConfig, SceneGenConfig
from maskboot.encoder import build_models, forward_stages
from maskboot.errors import InfeasibleClusteringError
from maskboot.rng import stream
from maskboot.scenegen import Scene, generate_scene


def test_sample_cluster_count_degenerate(rng):
    assert all(sample_cluster_count(rng, 8, 8) == 8 for _ in range(20))


def test_sample_cluster_count_bounds(rng):
    draws = [sample_cluster_count(rng, 2, 256) for _ in range(10_000)]
    assert min(draws) >= 2 and max(draws) <= 256


def test_sample_cluster_count_multinomial(rng):
    n = 10_000
    draws = np.array([sample_cluster_count(rng, 2, 5) for _ in range(n)])
    sigma = np.sqrt(0.25 * 0.75 / n)
    for k in (2, 3, 4, 5):
        assert abs((draws == k).mean() - 0.25) < 3 * sigma


def test_extract_features_shape_and_norm():
    cfg = EncoderConfig()
    online, _ = build_models(cfg, stream(0, "init"))
    images = torch.randn(16, 3, 64, 64)
    rows, dead = extract_cluster_features(online.backbone, images, "s2.b2")
    assert rows.shape == (16 * 16 * 16, 32)
    assert np.allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-6)
    assert dead >= 0


def test_extract_features_row_order_oracle(tiny_encoder_cfg):
    online, _ = build_models(tiny_encoder_cfg, stream(1, "init"))
    images = torch.from_numpy(np.random.default_rng(0).normal(size=(3, 3, 64, 64)))
    rows, _ = extract_cluster_features(online.backbone, images, "s2.b2")
    with torch.no_grad():
        fmap = forward_stages(online.backbone, images)["s2.b2"].numpy()
    b, d, h, w = fmap.shape
    for img, r, c in [(0, 0, 0), (1, 3, 7), (2, h - 1, w - 1)]:
        cell = fmap[img, :, r, c].astype(np.float64)
        norm = np.linalg.norm(cell)
        if norm < 1e-12:  # documented dead-cell rule: first basis vector
            cell = np.zeros(d)
            cell[0] = 1.0
        else:
            cell = cell / norm
        row = rows[img * h * w + r * w + c]
        assert np.allclose(row, cell, atol=1e-10)


def test_zero_rows_replaced():
    rows = np.array([[0.0, 0.0], [3.0, 4.0]])
    out, dead = normalize_rows(rows)
    assert dead == 1
    assert np.array_equal(out[0], [1.0, 0.0])
    assert np.allclose(out[1], [0.6, 0.8])


def test_kmeans_orthonormal_recovery(rng):
    features = np.eye(4)
    res = spherical_kmeans(features, 4, rng)
    assert res.objective[-1] == pytest.approx(1.0)
    # prototypes are the rows up to permutation
    sims = features @ res.prototypes.T
    assert np.allclose(np.sort(sims.max(axis=1)), 1.0)
    assert sorted(res.assignments.tolist()) == [0, 1, 2, 3]


def test_kmeans_single_cluster(rng):
    gen = np.random.default_rng(5)
    rows, _ = normalize_rows(gen.normal(size=(50, 6)) + 3.0)
    res = spherical_kmeans(rows, 1, rng)
    mean = rows.mean(axis=0)
    assert np.allclose(res.prototypes[0], mean / np.linalg.norm(mean), atol=1e-12)


def _cone_data(n=200, d=8, seed=0):
    gen = np.random.default_rng(seed)
    centers = np.eye(d)[:3]
    labels = gen.integers(0, 3, size=n)
    pts = centers[labels] + 0.05 * gen.normal(size=(n, d))
    pts, _ = normalize_rows(pts)
    return pts, labels


def naive_cosine_kmeans(pts, k, gen, iters=30):
    # independent restart oracle: random init, plain Lloyd loop
    protos = pts[gen.choice(len(pts), size=k, replace=False)].copy()
    for _ in range(iters):
        assign = np.argmax(pts @ protos.T, axis=1)
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                m = members.mean(axis=0)
                protos[c] = m / np.linalg.norm(m)
    assign = np.argmax(pts @ protos.T, axis=1)
    obj = (pts @ protos.T)[np.arange(len(pts)), assign].mean()
    return assign, obj


def test_kmeans_three_cones_matches_restart_oracle(rng):
    pts, _ = _cone_data()
    res = spherical_kmeans(pts, 3, rng)
    gen = np.random.default_rng(99)
    best_assign, best_obj = None, -np.inf
    for _ in range(50):
        assign, obj = naive_cosine_kmeans(pts, 3, gen)
        if obj > best_obj:
            best_assign, best_obj = assign, obj
    assert adjusted_rand_score(res.assignments, best_assign) == pytest.approx(1.0)


def test_kmeans_objective_monotone(rng):
    gen = np.random.default_rng(7)
    for trial in range(5):
        rows, _ = normalize_rows(gen.normal(size=(120, 5)))
        res = spherical_kmeans(rows, 8, rng, max_iter=30)
        diffs = np.diff(res.objective)
        assert (diffs >= -1e-12).all()


def test_kmeans_prototypes_unit_norm_with_reseeding(rng):
    # duplicated rows force empty clusters and reseeding
    base = np.eye(3)
    rows = np.concatenate([base[[0]]] * 10 + [base[[1]]] * 10)
    res = spherical_kmeans(rows, 5, rng, max_iter=20)
    assert np.allclose(np.linalg.norm(res.prototypes, axis=1), 1.0, atol=1e-9)


def test_kmeans_infeasible(rng):
    with pytest.raises(InfeasibleClusteringError):
        spherical_kmeans(np.eye(3), 4, rng)


def test_kmeans_minibatch_mode(rng):
    pts, _ = _cone_data(n=300)
    res = spherical_kmeans(pts, 3, rng, max_iter=20, minibatch=True, minibatch_size=64)
    assert np.allclose(np.linalg.norm(res.prototypes, axis=1), 1.0, atol=1e-9)
    assert res.assignments.shape == (300,)


def test_assign_labels_exact_prototypes(rng):
    protos, _ = normalize_rows(np.random.default_rng(1).normal(size=(4, 6)))
    bank = PrototypeBank(prototypes=protos, stage="s2.b2", epoch=0)
    fmap = protos[[2, 0, 3, 1]].T.reshape(6, 2, 2)
    grid = assign_labels(fmap, bank)
    assert np.array_equal(grid, np.array([[2, 0], [3, 1]]))


def test_assign_labels_tie_breaks_low():
    protos = np.array([[1.0, 0.0], [0.0, 1.0]])
    bank = PrototypeBank(prototypes=protos, stage="s2.b2", epoch=0)
    cell = np.array([1.0, 1.0]) / np.sqrt(2)  # equidistant
    fmap = cell.reshape(2, 1, 1)
    assert assign_labels(fmap, bank)[0, 0] == 0


def test_assign_labels_euclid_equals_cosine(rng):
    protos, _ = normalize_rows(np.random.default_rng(2).normal(size=(6, 8)))
    bank = PrototypeBank(prototypes=protos, stage="s2.b2", epoch=0)
    cells = np.random.default_rng(3).normal(size=(1000, 8))
    cells, _ = normalize_rows(cells)
    grid = assign_labels(cells.T.reshape(8, 40, 25), bank)
    euclid = np.argmin(
        np.linalg.norm(cells[:, None, :] - protos[None, :, :], axis=2), axis=1
    ).reshape(40, 25)
    assert np.array_equal(grid, euclid)


def test_upsample_constant():
    mset = upsample_labels(np.array([[5]], dtype=np.int32), (16, 16))
    assert np.array_equal(mset.grid, np.full((16, 16), 5))
    assert mset.labels().tolist() == [5]


def test_upsample_integer_blocks():
    grid = np.arange(4, dtype=np.int32).reshape(2, 2)
    mset = upsample_labels(grid, (8, 8))
    assert np.array_equal(mset.grid[:4, :4], np.zeros((4, 4)))
    assert np.array_equal(mset.grid[:4, 4:], np.ones((4, 4)))
    assert np.array_equal(mset.grid[4:, :4], np.full((4, 4), 2))
    assert np.array_equal(mset.grid[4:, 4:], np.full((4, 4), 3))


def test_upsample_coordinate_oracle():
    gen = np.random.default_rng(4)
    grid = gen.integers(0, 7, size=(3, 3)).astype(np.int32)
    mset = upsample_labels(grid, (64, 64))
    for r in range(0, 64, 7):
        for c in range(0, 64, 5):
            # independent index arithmetic: nearest source center
            sy = (r + 0.5) * 3 / 64 - 0.5
            sx = (c + 0.5) * 3 / 64 - 0.5
            iy = int(np.clip(np.ceil(sy - 0.5), 0, 2))
            ix = int(np.clip(np.ceil(sx - 0.5), 0, 2))
            assert mset.grid[r, c] == grid[iy, ix]


def test_bootstrap_masks_structure(tiny_encoder_cfg, small_scenes):
    online, _ = build_models(tiny_encoder_cfg, stream(3, "init"))
    cfg = BootstrapConfig(k_min=2, k_max=6, cluster_batch=4, kmeans_iters=10)
    images = [s.image for s in small_scenes]
    sets, prov = bootstrap_masks(online.backbone, images, cfg, stream(3, "kmeans"))
    assert len(sets) == len(images)
    for mset, k in zip(sets, np.repeat(prov.k_values, 4)):
        assert mset.is_partition()
        assert mset.grid.min() >= 0 and mset.grid.max() < k
    assert all(2 <= k <= 6 for k in prov.k_values)


def test_bootstrap_masks_deterministic(tiny_encoder_cfg, small_scenes):
    online, _ = build_models(tiny_encoder_cfg, stream(3, "init"))
    cfg = BootstrapConfig(k_min=2, k_max=6, cluster_batch=4, kmeans_iters=10)
    images = [s.image for s in small_scenes]
    a, _ = bootstrap_masks(online.backbone, images, cfg, stream(3, "kmeans"))
    b, _ = bootstrap_masks(online.backbone, images, cfg, stream(3, "kmeans"))
    for ma, mb in zip(a, b):
        assert np.array_equal(ma.grid, mb.grid)


class ColorStub(torch.nn.Module):
    """Identity-like encoder: features are 4x4-average-pooled raw colors."""

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, x):
        pooled = torch.nn.functional.avg_pool2d(x, 4)
        return {"s2.b2": pooled, "s2": pooled, "s3": pooled, "s4": pooled}


def _solid_color_scene(seed: int) -> Scene:
    # 4px-aligned solid rectangles with disjoint colors, flat gray background
    gen = np.random.default_rng(seed)
    img = np.full((64, 64, 3), 0.5, dtype=np.float32)
    mask = np.zeros((64, 64), dtype=np.int32)
    colors = {1: (1.0, 0.1, 0.1), 2: (0.1, 0.1, 1.0)}
    for cid, color in colors.items():
        y = int(gen.integers(0, 8)) * 4
        x = int(gen.integers(0, 8)) * 4
        h = int(gen.integers(3, 6)) * 4
        w = int(gen.integers(3, 6)) * 4
        img[y : y + h, x : x + w] = color
        mask[y : y + h, x : x + w] = cid
    return Scene(image=img, gt_mask=mask, object_count=2, seed=seed)


def test_bootstrap_color_stub_high_miou():
    from maskboot.eval import hungarian_miou

    scenes = [_solid_color_scene(s) for s in range(8)]
    cfg = BootstrapConfig(k_min=3, k_max=3, cluster_batch=8, kmeans_iters=30)
    sets, _ = bootstrap_masks(ColorStub(), [s.image for s in scenes], cfg, stream(0, "kmeans"))
    mious = [hungarian_miou(m, s.mask_set()) for m, s in zip(sets, scenes)]
    assert np.mean(mious) >= 0.9
